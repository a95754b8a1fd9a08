"""TransE / RotatE / ComplEx scoring with analytic gradients.

Complex-valued embeddings (RotatE entities, ComplEx entities and relations)
are stored interleaved: even columns hold real parts, odd columns imaginary
parts. Higher scores mean more plausible triples for every model kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODEL_KINDS = ("TransE", "RotatE", "ComplEx")


class NumericError(FloatingPointError):
    """Training produced a non-finite value."""


@dataclass
class InitParams:
    gamma: float
    epsilon: float
    dim: int

    def __post_init__(self):
        if self.gamma <= 0 or self.epsilon <= 0:
            raise ValueError("gamma and epsilon must be positive")
        if self.dim <= 0:
            raise ValueError("dim must be positive")

    @property
    def bound(self) -> float:
        return (self.gamma + self.epsilon) / self.dim


@dataclass
class EmbeddingTable:
    kind: str
    dim: int
    gamma: float
    epsilon: float
    entity: np.ndarray
    relation: np.ndarray
    transe_norm: int = 1

    @property
    def num_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation.shape[0]

    @property
    def bound(self) -> float:
        return (self.gamma + self.epsilon) / self.dim

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.kind, self.dim, self.gamma, self.epsilon,
                              self.entity.copy(), self.relation.copy(), self.transe_norm)


def widths(kind: str, dim: int) -> tuple[int, int]:
    """Column counts of the (entity, relation) matrices."""
    if kind == "TransE":
        return dim, dim
    if kind == "RotatE":
        return 2 * dim, dim
    if kind == "ComplEx":
        return 2 * dim, 2 * dim
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def init_embeddings(params: InitParams, kind: str, num_entities: int, num_relations: int,
                    rng: np.random.Generator, transe_norm: int = 1) -> EmbeddingTable:
    de, dr = widths(kind, params.dim)
    b = params.bound
    entity = rng.uniform(-b, b, size=(num_entities, de))
    relation = rng.uniform(-b, b, size=(num_relations, dr))
    return EmbeddingTable(kind, params.dim, params.gamma, params.epsilon, entity, relation, transe_norm)


# ---------------------------------------------------------------------------
# Batched forward / backward over gathered embeddings

def _forward(table: EmbeddingTable, eh, er, et):
    kind = table.kind
    if kind == "TransE":
        u = eh + er - et
        if table.transe_norm == 1:
            return table.gamma - np.abs(u).sum(-1), u
        norm = np.sqrt((u * u).sum(-1))
        return table.gamma - norm, (u, norm)
    if kind == "RotatE":
        phase = er * (np.pi / table.bound)
        c, s = np.cos(phase), np.sin(phase)
        hr, hi = eh[..., 0::2], eh[..., 1::2]
        a = hr * c - hi * s - et[..., 0::2]
        b = hr * s + hi * c - et[..., 1::2]
        mod = np.sqrt(a * a + b * b)
        return table.gamma - mod.sum(-1), (c, s, a, b, mod)
    if kind == "ComplEx":
        hr, hi = eh[..., 0::2], eh[..., 1::2]
        rr, ri = er[..., 0::2], er[..., 1::2]
        tr, ti = et[..., 0::2], et[..., 1::2]
        out = (hr * rr * tr + hi * rr * ti + hr * ri * ti - hi * ri * tr).sum(-1)
        return out, None
    raise ValueError(f"unknown model kind {kind!r}")


def _backward(table: EmbeddingTable, eh, er, et, cache, dscore):
    """Gradients of ``sum(dscore * score)`` w.r.t. the gathered rows."""
    g = dscore[..., None]
    kind = table.kind
    if kind == "TransE":
        if table.transe_norm == 1:
            du = -np.sign(cache) * g
        else:
            u, norm = cache
            safe = np.where(norm > 0, norm, 1.0)[..., None]
            du = -np.where(norm[..., None] > 0, u / safe, 0.0) * g
        return du, du, -du
    if kind == "RotatE":
        c, s, a, b, mod = cache
        safe = np.where(mod > 0, mod, 1.0)
        na = np.where(mod > 0, a / safe, 0.0) * g
        nb = np.where(mod > 0, b / safe, 0.0) * g
        hr, hi = eh[..., 0::2], eh[..., 1::2]
        dh = np.empty(na.shape[:-1] + (2 * na.shape[-1],))
        dh[..., 0::2] = -(na * c + nb * s)
        dh[..., 1::2] = -(-na * s + nb * c)
        dt = np.empty(dh.shape)
        dt[..., 0::2] = na
        dt[..., 1::2] = nb
        dphase = -(na * (-hr * s - hi * c) + nb * (hr * c - hi * s))
        return dh, dphase * (np.pi / table.bound), dt
    hr, hi = eh[..., 0::2], eh[..., 1::2]
    rr, ri = er[..., 0::2], er[..., 1::2]
    tr, ti = et[..., 0::2], et[..., 1::2]
    shape = np.broadcast_shapes(eh.shape, er.shape, et.shape)
    dh, dr, dt = np.empty(shape), np.empty(shape), np.empty(shape)
    dh[..., 0::2] = (rr * tr + ri * ti) * g
    dh[..., 1::2] = (rr * ti - ri * tr) * g
    dr[..., 0::2] = (hr * tr + hi * ti) * g
    dr[..., 1::2] = (hr * ti - hi * tr) * g
    dt[..., 0::2] = (hr * rr - hi * ri) * g
    dt[..., 1::2] = (hi * rr + hr * ri) * g
    return dh, dr, dt


@dataclass
class RowGrad:
    """Gradient for a subset of matrix rows; ``rows`` are unique and sorted."""

    rows: np.ndarray
    values: np.ndarray

    @classmethod
    def scatter(cls, idx: np.ndarray, vals: np.ndarray, num_rows: int | None = None) -> "RowGrad":
        """Sum ``vals`` rows sharing an index."""
        idx = idx.reshape(-1)
        vals = vals.reshape(len(idx), -1)
        width = vals.shape[1]
        if num_rows is not None and num_rows <= len(idx):
            present = np.bincount(idx, minlength=num_rows) > 0
            rows = np.flatnonzero(present)
            flat = (idx[:, None] * width + np.arange(width)).ravel()
            out = np.bincount(flat, weights=vals.ravel(), minlength=num_rows * width)
            return cls(rows, out.reshape(num_rows, width)[rows])
        rows, inverse = np.unique(idx, return_inverse=True)
        flat = (inverse[:, None] * width + np.arange(width)).ravel()
        out = np.bincount(flat, weights=vals.ravel(), minlength=len(rows) * width)
        return cls(rows, out.reshape(len(rows), width))

    def dense(self, num_rows: int) -> np.ndarray:
        out = np.zeros((num_rows, self.values.shape[1]))
        out[self.rows] = self.values
        return out


@dataclass
class TableGrad:
    entity: RowGrad
    relation: RowGrad


def _check_ids(table: EmbeddingTable, h, r, t) -> None:
    for name, ids, bound in (("head", h, table.num_entities), ("relation", r, table.num_relations),
                             ("tail", t, table.num_entities)):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= bound):
            raise IndexError(f"{name} id out of range [0, {bound})")


def score_batch(table: EmbeddingTable, h, r, t) -> np.ndarray:
    """Scores for broadcastable index arrays ``h``, ``r``, ``t``."""
    h, r, t = (np.asarray(x) for x in (h, r, t))
    return _forward(table, table.entity[h], table.relation[r], table.entity[t])[0]


def _collapse(idx: np.ndarray, grad: np.ndarray):
    """Flatten ``(idx, grad)``; pre-sum along the last index axis when the
    index is constant along it (e.g. the head of tail-corrupted candidates)."""
    grad = np.broadcast_to(grad, idx.shape + (grad.shape[-1],))
    if idx.ndim >= 2 and idx.shape[-1] > 1 and (idx == idx[..., :1]).all():
        return idx[..., 0].ravel(), grad.sum(axis=-2).reshape(-1, grad.shape[-1])
    return idx.ravel(), grad.reshape(idx.size, -1)


def score_and_grad(table: EmbeddingTable, h, r, t):
    """Scores plus a closure mapping ``dscore`` to a :class:`TableGrad`."""
    h, r, t = np.broadcast_arrays(*(np.asarray(x) for x in (h, r, t)))
    eh, er, et = table.entity[h], table.relation[r], table.entity[t]
    scores, cache = _forward(table, eh, er, et)

    def backward(dscore: np.ndarray) -> TableGrad:
        dh, dr, dt = _backward(table, eh, er, et, cache, dscore)
        parts = [_collapse(h, dh), _collapse(t, dt)]
        ent = RowGrad.scatter(np.concatenate([p[0] for p in parts]),
                              np.concatenate([p[1] for p in parts]), table.num_entities)
        return TableGrad(ent, RowGrad.scatter(*_collapse(r, dr), table.num_relations))

    return scores, backward


def score(table: EmbeddingTable, h: int, r: int, t: int) -> float:
    _check_ids(table, h, r, t)
    return float(score_batch(table, h, r, t))


def score_gradients(table: EmbeddingTable, h: int, r: int, t: int):
    """``(d score/d e_h, d score/d e_r, d score/d e_t)`` treating the three
    slots as independent rows (relevant when ``h == t``)."""
    _check_ids(table, h, r, t)
    eh, er, et = table.entity[h], table.relation[r], table.entity[t]
    _, cache = _forward(table, eh, er, et)
    return _backward(table, eh, er, et, cache, np.float64(1.0))


# ---------------------------------------------------------------------------
# Hard-label loss

def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    return np.exp(log_sigmoid(x))


def _softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def hard_loss_from_scores(scores: np.ndarray, alpha: float = 1.0, kind: str = "adversarial",
                          margin: float = 1.0):
    """Mean hard-label loss and its gradient w.r.t. ``scores``.

    ``scores`` is ``(B, n + 1)`` with the positive in column 0. The
    self-adversarial weights are treated as constants.
    """
    pos, neg = scores[:, 0], scores[:, 1:]
    batch = scores.shape[0]
    grad = np.empty_like(scores)
    if kind == "adversarial":
        w = _softmax(alpha * neg)
        per_item = -log_sigmoid(pos) - (w * log_sigmoid(-neg)).sum(-1)
        grad[:, 0] = -sigmoid(-pos)
        grad[:, 1:] = w * sigmoid(neg)
    elif kind == "margin":
        viol = margin - pos[:, None] + neg
        active = (viol > 0).astype(float) / neg.shape[1]
        per_item = np.maximum(viol, 0.0).mean(-1)
        grad[:, 0] = -active.sum(-1)
        grad[:, 1:] = active
    else:
        raise ValueError(f"unknown hard loss kind {kind!r}")
    bad = ~np.isfinite(per_item)
    if bad.any():
        raise NumericError(f"non-finite hard loss at batch item {int(np.argmax(bad))}")
    return float(per_item.mean()), grad / batch


def candidate_indices(positives: np.ndarray, negatives: np.ndarray, head_rows=None):
    """``(H, R, T)`` index arrays of shape ``(B, n + 1)``; column 0 is the
    positive. Rows flagged in ``head_rows`` corrupt the head instead of the tail."""
    positives = np.asarray(positives, dtype=np.int64)
    b, n = negatives.shape
    H = np.repeat(positives[:, :1], n + 1, axis=1)
    R = np.repeat(positives[:, 1:2], n + 1, axis=1)
    T = np.repeat(positives[:, 2:], n + 1, axis=1)
    if head_rows is None:
        T[:, 1:] = negatives
    else:
        head_rows = np.asarray(head_rows, dtype=bool)
        T[~head_rows, 1:] = negatives[~head_rows]
        H[head_rows, 1:] = negatives[head_rows]
    return H, R, T


def hard_label_loss(table: EmbeddingTable, positives: np.ndarray, negatives: np.ndarray,
                    alpha: float = 1.0, kind: str = "adversarial", margin: float = 1.0,
                    head_rows=None):
    """Hard loss over a batch of ``positives`` ``(B, 3)`` with corrupted
    entities ``negatives`` ``(B, n)``. Returns ``(loss, TableGrad)``."""
    if len(positives) == 0:
        raise ValueError("empty batch")
    scores, backward = score_and_grad(table, *candidate_indices(positives, negatives, head_rows))
    loss, dscores = hard_loss_from_scores(scores, alpha, kind, margin)
    return loss, backward(dscores)
