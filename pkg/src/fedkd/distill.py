"""Score-distribution distillation with adaptive asymmetric temperatures.

The student mimics the teacher's softmax distribution over a positive triple
and its corrupted negatives. The positive's temperature comes from a small
MLP fed with the teacher's confidence in that positive; negatives share a
fixed temperature. Hard and soft losses are mixed with a weight that grows
as both losses shrink.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scorers import (
    EmbeddingTable,
    NumericError,
    TableGrad,
    candidate_indices,
    hard_loss_from_scores,
    score_and_grad,
    score_batch,
    sigmoid,
)

NET_PARAMS = ("w1", "b1", "w2", "b2")


@dataclass
class DistillConfig:
    lam: float = 3.0
    tau: float = 1.0
    tau_min: float = 1.0
    tau_max: float = 10.0
    aats: bool = True
    kl_direction: str = "student_teacher"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.tau <= 0 or self.tau_min <= 0:
            raise ValueError("temperatures must be positive")
        if self.tau_max < self.tau_min:
            raise ValueError("tau_max must be >= tau_min")
        if self.kl_direction not in ("student_teacher", "teacher_student"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")


@dataclass
class TemperatureNet:
    """``conf -> (tau_max - tau_min) * sigmoid(w2 relu(w1 conf + b1) + b2) + tau_min``."""

    w1: np.ndarray  # (hidden, 1)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (1, hidden)
    b2: np.ndarray  # 0-d
    tau_min: float = 1.0
    tau_max: float = 10.0

    def __post_init__(self):
        if not self.tau_max >= self.tau_min > 0:
            raise ValueError("need tau_max >= tau_min > 0")
        self.b2 = np.asarray(self.b2, dtype=np.float64)

    @classmethod
    def init(cls, rng: np.random.Generator, tau_min: float = 1.0, tau_max: float = 10.0,
             hidden: int = 32) -> "TemperatureNet":
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        w1 = rng.uniform(-1.0, 1.0, size=(hidden, 1))
        w2 = rng.uniform(-1.0 / np.sqrt(hidden), 1.0 / np.sqrt(hidden), size=(1, hidden))
        return cls(w1, np.zeros(hidden), w2, np.zeros(()), tau_min, tau_max)

    @classmethod
    def zeros(cls, tau_min: float = 1.0, tau_max: float = 10.0, hidden: int = 32) -> "TemperatureNet":
        return cls(np.zeros((hidden, 1)), np.zeros(hidden), np.zeros((1, hidden)), np.zeros(()),
                   tau_min, tau_max)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in NET_PARAMS}

    def copy(self) -> "TemperatureNet":
        return TemperatureNet(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                              self.tau_min, self.tau_max)

    def forward(self, confidence):
        x = np.asarray(confidence, dtype=np.float64)
        pre = x[..., None] * self.w1[:, 0] + self.b1
        hidden = np.maximum(pre, 0.0)
        out = hidden @ self.w2[0] + self.b2
        gate = sigmoid(out)
        tau = np.clip((self.tau_max - self.tau_min) * gate + self.tau_min, self.tau_min, self.tau_max)
        return tau, (x, pre, hidden, gate)

    def backward(self, cache, dtau) -> dict[str, np.ndarray]:
        x, pre, hidden, gate = cache
        dout = np.asarray(dtau) * (self.tau_max - self.tau_min) * gate * (1.0 - gate)
        dhidden = dout[..., None] * self.w2[0]
        dpre = dhidden * (pre > 0)
        return {
            "w1": (dpre * x[..., None]).reshape(-1, self.w1.shape[0]).sum(0)[:, None],
            "b1": dpre.reshape(-1, self.b1.shape[0]).sum(0),
            "w2": (dout[..., None] * hidden).reshape(-1, self.w2.shape[1]).sum(0)[None, :],
            "b2": np.asarray(dout.sum()),
        }


def adaptive_temperature(net: TemperatureNet, confidence):
    tau = net.forward(confidence)[0]
    return float(tau) if np.ndim(tau) == 0 else tau


# ---------------------------------------------------------------------------
# Distributions

def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


def confidence_from_scores(teacher_scores: np.ndarray) -> np.ndarray:
    """Temperature-1 softmax probability of column 0 (the positive)."""
    return np.exp(_log_softmax(teacher_scores)[..., 0])


def temperature_matrix(tau_pos, tau_neg: float, num_candidates: int) -> np.ndarray:
    """Per-candidate temperatures: ``tau_pos`` for column 0, ``tau_neg`` elsewhere."""
    tau_pos = np.asarray(tau_pos, dtype=np.float64)
    out = np.full(tau_pos.shape + (num_candidates,), float(tau_neg))
    out[..., 0] = tau_pos
    return out


def asymmetric_log_probs(scores: np.ndarray, tau_pos, tau_neg: float) -> np.ndarray:
    return _log_softmax(scores / temperature_matrix(tau_pos, tau_neg, scores.shape[-1]))


@dataclass
class ScoreDistribution:
    """Probabilities over ``[positive, negative_1, ..., negative_n]``."""

    probs: np.ndarray
    log_probs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.log_probs is None:
            self.log_probs = np.log(self.probs)


def _candidate_scores(table: EmbeddingTable, positive, negatives) -> np.ndarray:
    h, r, t = (int(x) for x in positive)
    tails = np.concatenate([[t], np.asarray(negatives, dtype=np.int64).ravel()])
    return score_batch(table, h, r, tails)


def _tails_of(negatives):
    return getattr(negatives, "corrupted_tails", negatives)


def teacher_confidence(teacher: EmbeddingTable, positive, negatives) -> float:
    scores = _candidate_scores(teacher, positive, _tails_of(negatives))
    if not np.isfinite(scores).all():
        raise NumericError("non-finite teacher score")
    return float(confidence_from_scores(scores))


def asymmetric_distribution(table: EmbeddingTable, positive, negatives, tau_pos: float,
                            tau_neg: float) -> ScoreDistribution:
    if tau_pos <= 0 or tau_neg <= 0:
        raise ValueError("temperatures must be positive")
    logp = asymmetric_log_probs(_candidate_scores(table, positive, _tails_of(negatives)), tau_pos, tau_neg)
    return ScoreDistribution(np.exp(logp), logp)


def kl_from_logs(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """``KL(P || Q)`` along the last axis.

    Summed as ``p*d - p + q`` with ``d = log p - log q``. For normalized
    inputs this equals the usual sum, but every term is nonnegative even
    after rounding, so the result never dips below zero.
    """
    p, q = np.exp(logp), np.exp(logq)
    with np.errstate(invalid="ignore", over="ignore"):
        d = logp - logq
        near = p * (d + np.expm1(-d))
        far = (p * d - p) + q
        terms = np.where(d > -1.0, near, far)
    return np.where(p > 0, terms, q).sum(-1)


def soft_label_loss(student: ScoreDistribution, teacher: ScoreDistribution,
                    direction: str = "student_teacher") -> float:
    """KL divergence between the two distributions; the expectation is taken
    under the student for ``direction="student_teacher"``."""
    if direction == "student_teacher":
        return float(kl_from_logs(student.log_probs, teacher.log_probs))
    return float(kl_from_logs(teacher.log_probs, student.log_probs))


def combined_loss(hard: float, soft: float, lam: float) -> tuple[float, float]:
    """``(hard + coef * soft, coef)`` with ``coef = lam / (hard + soft)``.

    ``coef`` is a plain number; callers must not differentiate through it.
    """
    denom = hard + soft
    coef = lam / denom if denom > 0 else 0.0
    return hard + coef * soft, coef


# ---------------------------------------------------------------------------
# Training step

@dataclass
class StepResult:
    loss: float
    hard: float
    soft: float
    coef: float
    student_grad: TableGrad
    net_grad: dict | None
    tau_pos: np.ndarray


def _kl_grads(logp, logq, batch):
    """Gradients of ``mean KL(P || Q)`` w.r.t. the logits of P and of Q."""
    p, q = np.exp(logp), np.exp(logq)
    kl = kl_from_logs(logp, logq)
    gp = p * (logp - logq - kl[..., None]) / batch
    gq = (q - p) / batch
    return kl, gp, gq


def distill_step(student: EmbeddingTable, teacher: EmbeddingTable, net: TemperatureNet,
                 positives: np.ndarray, negatives: np.ndarray, config: DistillConfig,
                 alpha: float = 1.0, loss_kind: str = "adversarial", margin: float = 1.0,
                 head_rows=None) -> StepResult:
    """Loss and gradients for one distillation mini-batch.

    The teacher table is only read. Gradients are returned for the student
    table and, when adaptive temperatures are on, for ``net``.
    """
    H, R, T = candidate_indices(positives, negatives, head_rows)
    s_stu, backward = score_and_grad(student, H, R, T)
    s_tea = score_batch(teacher, H, R, T)
    for name, s in (("student", s_stu), ("teacher", s_tea)):
        bad = ~np.isfinite(s).all(axis=-1)
        if bad.any():
            raise NumericError(f"non-finite {name} score at batch item {int(np.argmax(bad))}")

    hard, d_hard = hard_loss_from_scores(s_stu, alpha, loss_kind, margin)

    batch = s_stu.shape[0]
    if config.aats:
        tau_pos, cache = net.forward(confidence_from_scores(s_tea))
    else:
        tau_pos, cache = np.full(batch, config.tau), None
    temps = temperature_matrix(tau_pos, config.tau, s_stu.shape[1])
    logp = _log_softmax(s_stu / temps)
    logq = _log_softmax(s_tea / temps)
    if config.kl_direction == "student_teacher":
        kl, gz_stu, gz_tea = _kl_grads(logp, logq, batch)
    else:
        kl, gz_tea, gz_stu = _kl_grads(logq, logp, batch)
    bad = ~np.isfinite(kl)
    if bad.any():
        raise NumericError(f"non-finite soft loss at batch item {int(np.argmax(bad))}")
    soft = float(kl.mean())

    loss, coef = combined_loss(hard, soft, config.lam)
    student_grad = backward(d_hard + coef * (gz_stu / temps))
    net_grad = None
    if cache is not None:
        dtau = -(gz_stu[:, 0] * s_stu[:, 0] + gz_tea[:, 0] * s_tea[:, 0]) / tau_pos ** 2
        net_grad = net.backward(cache, coef * dtau)
    return StepResult(loss, hard, soft, coef, student_grad, net_grad, tau_pos)
