"""Experiment configuration stored as a flat ``key = value`` text file."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

from .distill import DistillConfig
from .federation import RoundConfig
from .scorers import MODEL_KINDS, InitParams

RUN_MODES = ("local", "teacher", "baseline-low", "distill")

# (dataset, kge) -> tau_max; anything not listed uses DEFAULT_TAU_MAX
TAU_MAX = {
    ("FB-R3", "TransE"): 2.0,
    ("FB-R3", "RotatE"): 2.0,
    ("FB-R3", "ComplEx"): 1.5,
    ("FB-R5", "RotatE"): 1.5,
    ("FB-R5", "ComplEx"): 1.5,
    ("FB-R10", "TransE"): 1.5,
}
DEFAULT_TAU_MAX = 10.0


class ConfigError(ValueError):
    pass


def default_tau_max(dataset: str, kge: str) -> float:
    return TAU_MAX.get((dataset, kge), DEFAULT_TAU_MAX)


@dataclass
class TrainConfig:
    kge: str = "TransE"
    mode: str = "teacher"
    dataset: str = ""
    teacher_dim: int = 256
    student_dim: int = 128
    gamma_teacher: float = 8.0
    gamma_student: float = 6.0
    epsilon: float = 2.0
    batch_size: int = 512
    local_epochs: int = 3
    lr: float = 1e-4
    lam: float = 3.0
    tau: float = 1.0
    tau_min: float = 1.0
    tau_max: float | None = None
    aats: bool = True
    kl_direction: str = "student_teacher"
    n_negatives: int = 256
    adv_alpha: float = 1.0
    loss: str = "adversarial"
    margin: float = 1.0
    transe_norm: int = 1
    head_corruption: bool = False
    filtered: bool = True
    seed: int = 0
    eval_every: int = 5
    eval_every_local: int = 10
    patience: int = 3
    max_rounds: int = 1000
    parallel_clients: bool = False
    partition_dir: str = ""
    teacher_checkpoint: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.kge not in MODEL_KINDS:
            raise ConfigError(f"kge must be one of {MODEL_KINDS}, not {self.kge!r}")
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}, not {self.mode!r}")
        if self.loss not in ("adversarial", "margin"):
            raise ConfigError(f"loss must be 'adversarial' or 'margin', not {self.loss!r}")
        if self.transe_norm not in (1, 2):
            raise ConfigError("transe_norm must be 1 or 2")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be a positive finite number, not {self.lr}")

    @property
    def resolved_tau_max(self) -> float:
        return self.tau_max if self.tau_max is not None else default_tau_max(self.dataset, self.kge)

    @property
    def is_high_dim(self) -> bool:
        return self.mode in ("local", "teacher")

    def init_params(self) -> InitParams:
        if self.is_high_dim:
            return InitParams(self.gamma_teacher, self.epsilon, self.teacher_dim)
        return InitParams(self.gamma_student, self.epsilon, self.student_dim)

    def teacher_params(self) -> InitParams:
        return InitParams(self.gamma_teacher, self.epsilon, self.teacher_dim)

    def round_config(self) -> RoundConfig:
        # the local baseline trains epoch by epoch and validates every eval_every_local epochs
        local = self.mode == "local"
        return RoundConfig(
            local_epochs=1 if local else self.local_epochs,
            batch_size=self.batch_size,
            eval_every=self.eval_every_local if local else self.eval_every,
            patience=self.patience,
            max_rounds=self.max_rounds * (self.local_epochs if local else 1),
            n_negatives=self.n_negatives,
            lr=self.lr,
            adv_alpha=self.adv_alpha,
            loss_kind=self.loss,
            margin=self.margin,
            head_corruption=self.head_corruption,
            parallel=self.parallel_clients,
        )

    def distill_config(self) -> DistillConfig:
        return DistillConfig(self.lam, self.tau, self.tau_min, self.resolved_tau_max, self.aats,
                             self.kl_direction)

    def resolved(self) -> "TrainConfig":
        return dataclasses.replace(self, tau_max=self.resolved_tau_max)

    # -- serialization -----------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                value = "none"
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str, **overrides) -> "TrainConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read(), **overrides)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in values.items():
            try:
                kwargs[key] = _coerce(value, types[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        return cls(**kwargs)


def _coerce(value, type_name: str):
    if not isinstance(value, str):
        return value
    if type_name == "bool":
        lowered = value.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    if type_name == "float | None":
        return None if value.lower() in ("none", "") else float(value)
    return value
