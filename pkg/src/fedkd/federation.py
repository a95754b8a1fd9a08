"""FedE-style rounds: the server averages entity embeddings per entity,
clients overwrite their local entity rows and train locally. Relation
embeddings never leave a client."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import optim
from .distill import NET_PARAMS, DistillConfig, TemperatureNet, distill_step
from .evaluate import MetricReport, evaluate_federation
from .kg import FederatedDataset, KnowledgeGraph, sample_negative_batch
from .scorers import EmbeddingTable, InitParams, hard_label_loss, init_embeddings

log = logging.getLogger(__name__)

MODES = ("local", "fedE", "distill")


@dataclass
class RoundConfig:
    local_epochs: int = 3
    batch_size: int = 512
    eval_every: int = 5
    patience: int = 3
    max_rounds: int = 1000
    mode: str = "fedE"
    n_negatives: int = 256
    lr: float = 1e-4
    adv_alpha: float = 1.0
    loss_kind: str = "adversarial"
    margin: float = 1.0
    head_corruption: bool = False
    parallel: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, not {self.mode!r}")
        for name in ("local_epochs", "batch_size", "eval_every", "patience", "max_rounds", "n_negatives"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ValueError(f"lr must be a positive finite number, not {self.lr}")


@dataclass
class ServerState:
    entity: np.ndarray  # (num_global_entities, d_e)
    mask: np.ndarray  # (num_clients, num_global_entities) bool

    @classmethod
    def create(cls, fed: FederatedDataset, params: InitParams, kind: str, seed: int) -> "ServerState":
        rng = np.random.default_rng(seed)
        table = init_embeddings(params, kind, fed.num_global_entities, 1, rng)
        mask = np.zeros((fed.num_clients, fed.num_global_entities), dtype=bool)
        for c, emap in enumerate(fed.entity_maps):
            mask[c, emap] = True
        return cls(table.entity, mask)


@dataclass
class ClientState:
    client_id: int
    graph: KnowledgeGraph
    entity_map: np.ndarray
    table: EmbeddingTable
    rng: np.random.Generator
    adam: dict[str, optim.AdamState] = field(default_factory=dict)
    teacher: EmbeddingTable | None = None
    net: TemperatureNet | None = None
    epochs: int = 0

    def __post_init__(self):
        if not self.adam:
            self.adam = {"entity": optim.AdamState.like(self.table.entity),
                         "relation": optim.AdamState.like(self.table.relation)}
            if self.net is not None:
                for name, value in self.net.params().items():
                    self.adam[f"net.{name}"] = optim.AdamState.like(value)

    def set_lr(self, lr: float) -> None:
        for state in self.adam.values():
            state.lr = lr

    def snapshot(self) -> "ClientState":
        """Deep copy of everything mutable; the graph is shared."""
        rng = np.random.Generator(type(self.rng.bit_generator)())
        rng.bit_generator.state = self.rng.bit_generator.state
        return ClientState(self.client_id, self.graph, self.entity_map, self.table.copy(), rng,
                           {k: v.copy() for k, v in self.adam.items()}, self.teacher,
                           self.net.copy() if self.net is not None else None, self.epochs)


def make_clients(fed: FederatedDataset, params: InitParams, kind: str, seed: int,
                 teachers: list[EmbeddingTable] | None = None,
                 distill: DistillConfig | None = None, lr: float = 1e-4,
                 transe_norm: int = 1) -> list[ClientState]:
    """Per-client tables, optimizers and independent random streams.

    Table init and training draw from one stream per client; temperature nets
    draw from a separate stream so enabling distillation does not shift the
    training draws.
    """
    seq = np.random.SeedSequence(seed)
    streams = seq.spawn(2 * fed.num_clients)
    clients = []
    for c, (kg, emap) in enumerate(zip(fed.clients, fed.entity_maps)):
        rng = np.random.default_rng(streams[2 * c])
        table = init_embeddings(params, kind, kg.num_entities, kg.num_relations, rng, transe_norm)
        teacher = net = None
        if teachers is not None:
            teacher = teachers[c]
            if teacher.kind != kind:
                raise ValueError(f"client {c}: teacher is {teacher.kind}, student is {kind}")
            if teacher.num_entities != kg.num_entities or teacher.num_relations != kg.num_relations:
                raise ValueError(f"client {c}: teacher vocabulary does not match the partition")
            cfg = distill or DistillConfig()
            net = TemperatureNet.init(np.random.default_rng(streams[2 * c + 1]), cfg.tau_min, cfg.tau_max)
        client = ClientState(c, kg, emap, table, rng, teacher=teacher, net=net)
        client.set_lr(lr)
        clients.append(client)
    return clients


# ---------------------------------------------------------------------------
# Server side

def aggregate(server: ServerState, tables: list[np.ndarray], entity_maps: list[np.ndarray]) -> np.ndarray:
    """Average each global entity over the clients holding it, in place."""
    width = server.entity.shape[1]
    sums = np.zeros_like(server.entity)
    counts = np.zeros(server.entity.shape[0])
    for c, (ent, emap) in enumerate(zip(tables, entity_maps)):
        if ent.ndim != 2 or ent.shape[1] != width:
            raise ValueError(f"client {c} entity width {ent.shape[1:]} does not match server width {width}")
        if ent.shape[0] != len(emap):
            raise ValueError(f"client {c} has {ent.shape[0]} rows but {len(emap)} mapped entities")
        sums[emap] += ent
        counts[emap] += 1
    held = counts > 0
    server.entity[held] = sums[held] / counts[held, None]
    return server.entity


def distribute(server: ServerState, client: ClientState) -> np.ndarray:
    client.table.entity[:] = server.entity[client.entity_map]
    return client.table.entity


# ---------------------------------------------------------------------------
# Client side

def _negatives(client: ClientState, positives: np.ndarray, cfg: RoundConfig):
    if not cfg.head_corruption:
        return sample_negative_batch(client.graph, positives, cfg.n_negatives, client.rng), None
    head_rows = client.rng.random(len(positives)) < 0.5
    out = np.empty((len(positives), cfg.n_negatives), dtype=np.int64)
    for rows, slot in ((~head_rows, "tail"), (head_rows, "head")):
        if rows.any():
            out[rows] = sample_negative_batch(client.graph, positives[rows], cfg.n_negatives,
                                              client.rng, corrupt=slot)
    return out, head_rows


def train_batch(client: ClientState, positives: np.ndarray, cfg: RoundConfig,
                dcfg: DistillConfig | None) -> float:
    negatives, head_rows = _negatives(client, positives, cfg)
    if cfg.mode == "distill":
        res = distill_step(client.table, client.teacher, client.net, positives, negatives, dcfg,
                           cfg.adv_alpha, cfg.loss_kind, cfg.margin, head_rows)
        loss, grad = res.loss, res.student_grad
        if res.net_grad is not None:
            for name in NET_PARAMS:
                optim.apply_dense(client.adam[f"net.{name}"], getattr(client.net, name), res.net_grad[name])
    else:
        loss, grad = hard_label_loss(client.table, positives, negatives, cfg.adv_alpha,
                                     cfg.loss_kind, cfg.margin, head_rows)
    optim.apply_sparse(client.adam["entity"], client.table.entity, grad.entity)
    optim.apply_sparse(client.adam["relation"], client.table.relation, grad.relation)
    return loss


def train_epoch(client: ClientState, cfg: RoundConfig, dcfg: DistillConfig | None) -> float:
    train = client.graph.train
    order = client.rng.permutation(len(train))
    losses = []
    for start in range(0, len(train), cfg.batch_size):
        losses.append(train_batch(client, train[order[start:start + cfg.batch_size]], cfg, dcfg))
    client.epochs += 1
    return float(np.mean(losses))


def local_training(client: ClientState, cfg: RoundConfig, dcfg: DistillConfig | None) -> list[float]:
    if cfg.mode == "distill" and (client.teacher is None or client.net is None):
        raise ValueError(f"client {client.client_id}: distill mode needs a teacher and a temperature net")
    return [train_epoch(client, cfg, dcfg) for _ in range(cfg.local_epochs)]


def run_round(server: ServerState | None, clients: list[ClientState], cfg: RoundConfig,
              dcfg: DistillConfig | None = None) -> list[list[float]]:
    """One communication round; returns per-client, per-epoch mean losses."""
    federated = cfg.mode != "local"
    if federated:
        for client in clients:
            distribute(server, client)
    if cfg.parallel and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=len(clients)) as pool:
            losses = list(pool.map(lambda c: local_training(c, cfg, dcfg), clients))
    else:
        losses = [local_training(c, cfg, dcfg) for c in clients]
    if federated:
        aggregate(server, [c.table.entity for c in clients], [c.entity_map for c in clients])
    return losses


# ---------------------------------------------------------------------------
# Orchestration

@dataclass
class TrainResult:
    best: list[ClientState]
    best_round: int
    best_report: MetricReport
    rounds_run: int
    truncated: bool
    history: list[dict]
    best_server: ServerState | None = None


def train_until_stopped(server: ServerState | None, clients: list[ClientState], cfg: RoundConfig,
                        dcfg: DistillConfig | None = None,
                        evaluator: Callable[[list[ClientState]], MetricReport] | None = None,
                        log_path=None) -> TrainResult:
    """Train with periodic validation and patience-based early stopping.

    Returns snapshots of all clients taken at the best validation MRR.
    """
    if evaluator is None:
        evaluator = lambda cs: evaluate_federation([c.table for c in cs], [c.graph for c in cs], "valid")
    best = best_report = best_server = None
    best_round, bad_evals, history = 0, 0, []
    start = time.perf_counter()
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        rnd = 0
        stopped = False
        losses: list[list[float]] = []
        while rnd < cfg.max_rounds:
            rnd += 1
            losses = run_round(server, clients, cfg, dcfg)
            last = rnd == cfg.max_rounds
            if rnd % cfg.eval_every and not (last and best is None):
                continue
            report = evaluator(clients)
            record = {
                "round": rnd,
                "losses": [float(np.mean(l)) for l in losses],
                "valid": report.summary(),
                "wall_clock": round(time.perf_counter() - start, 3),
            }
            history.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
            log.info("round %d valid MRR %.4f", rnd, report.mrr)
            if best is None or report.mrr > best_report.mrr:
                best, best_report, best_round, bad_evals = [c.snapshot() for c in clients], report, rnd, 0
                if server is not None:
                    best_server = ServerState(server.entity.copy(), server.mask)
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    stopped = True
                    break
    finally:
        if fh:
            fh.close()
    return TrainResult(best, best_round, best_report, rnd, not stopped, history, best_server)
