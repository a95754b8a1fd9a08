"""Method-level drivers: Local, FedEH (teacher), FedEL, FedEKD and FedEKD*."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .distill import DistillConfig
from .evaluate import MetricReport, evaluate_federation
from .federation import (
    ClientState,
    RoundConfig,
    ServerState,
    TrainResult,
    make_clients,
    train_until_stopped,
)
from .kg import FederatedDataset
from .scorers import EmbeddingTable, InitParams

# run mode -> (round mode, display name)
RUN_MODES = {
    "local": ("local", "Local"),
    "teacher": ("fedE", "FedEH"),
    "baseline-low": ("fedE", "FedEL"),
    "distill": ("distill", "FedEKD"),
}


@dataclass
class MethodRun:
    name: str
    dim: int
    result: TrainResult
    test: MetricReport

    @property
    def tables(self) -> list[EmbeddingTable]:
        return [c.table for c in self.result.best]

    @property
    def clients(self) -> list[ClientState]:
        return self.result.best


def method_name(run_mode: str, dcfg: DistillConfig | None = None) -> str:
    name = RUN_MODES[run_mode][1]
    if run_mode == "distill" and dcfg is not None and not dcfg.aats:
        name += "*"
    return name


def run_method(fed: FederatedDataset, run_mode: str, kind: str, params: InitParams, rcfg: RoundConfig,
               seed: int, dcfg: DistillConfig | None = None,
               teachers: list[EmbeddingTable] | None = None, transe_norm: int = 1,
               log_path=None) -> MethodRun:
    """Initialise server and clients, train with early stopping, and
    evaluate the best local tables on the test split."""
    if run_mode not in RUN_MODES:
        raise ValueError(f"unknown run mode {run_mode!r}; expected one of {sorted(RUN_MODES)}")
    mode = RUN_MODES[run_mode][0]
    if mode == "distill" and teachers is None:
        raise ValueError("distill mode needs teacher tables")
    rcfg = replace(rcfg, mode=mode)
    clients = make_clients(fed, params, kind, seed, teachers if mode == "distill" else None,
                           dcfg, rcfg.lr, transe_norm)
    server = None if mode == "local" else ServerState.create(fed, params, kind, seed + 1)
    result = train_until_stopped(server, clients, rcfg, dcfg if mode == "distill" else None,
                                 log_path=log_path)
    test = evaluate_federation([c.table for c in result.best], [c.graph for c in result.best], "test")
    return MethodRun(method_name(run_mode, dcfg), params.dim, result, test)


def compare_methods(fed: FederatedDataset, kind: str, teacher_params: InitParams, student_params: InitParams,
                    rcfg: RoundConfig, seed: int, dcfg: DistillConfig,
                    ablation: bool = False) -> dict[str, MethodRun]:
    """Train FedEH, FedEL and FedEKD (plus FedEKD* when ``ablation``) on one
    partition with a shared seed; the FedEKD runs distill from FedEH."""
    runs = {"FedEH": run_method(fed, "teacher", kind, teacher_params, rcfg, seed)}
    runs["FedEL"] = run_method(fed, "baseline-low", kind, student_params, rcfg, seed)
    variants = [dcfg, replace(dcfg, aats=False)] if ablation else [dcfg]
    for cfg in variants:
        run = run_method(fed, "distill", kind, student_params, rcfg, seed, cfg, teachers=runs["FedEH"].tables)
        runs[run.name] = run
    return runs
