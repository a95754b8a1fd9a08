"""Adam with lazy (sparse) moment updates for embedding rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scorers import NumericError, RowGrad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: np.ndarray, lr: float = 1e-4, **kwargs) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64),
                   lr=lr, **kwargs)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.lr, self.beta1, self.beta2, self.eps)


def _update(state: AdamState, params: np.ndarray, rows, g: np.ndarray) -> None:
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m[rows] + (1.0 - b1) * g
    v = b2 * state.v[rows] + (1.0 - b2) * (g * g)
    state.m[rows] = m
    state.v[rows] = v
    m_hat = m / (1.0 - b1 ** state.t)
    v_hat = v / (1.0 - b2 ** state.t)
    updated = params[rows] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.isfinite(updated).all():
        where = ""
        if rows is not ...:
            finite = np.isfinite(updated.reshape(len(updated), -1)).all(axis=1)
            where = f" in row {int(rows[np.argmin(finite)])}"
        raise NumericError(f"parameter update diverged{where}")
    params[rows] = updated


def apply_sparse(state: AdamState, params: np.ndarray, grads) -> np.ndarray:
    """Adam step on the rows present in ``grads``, in place.

    ``grads`` is a :class:`RowGrad` or a mapping ``row -> gradient row``.
    Moments of rows absent from ``grads`` are left untouched.
    """
    if not isinstance(grads, RowGrad):
        rows = np.fromiter(grads.keys(), dtype=np.int64, count=len(grads))
        vals = np.array([np.asarray(grads[r], dtype=np.float64) for r in rows.tolist()])
        grads = RowGrad(rows, vals.reshape(len(rows), *params.shape[1:]))
    finite = np.isfinite(grads.values.reshape(len(grads.rows), -1)).all(axis=1)
    if not finite.all():
        raise NumericError(f"non-finite gradient in row {int(grads.rows[np.argmin(finite)])}")
    _update(state, params, grads.rows, grads.values.reshape((len(grads.rows),) + params.shape[1:]))
    return params


def apply_dense(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(grad).all():
        raise NumericError("non-finite dense gradient")
    _update(state, params, ..., grad)
    return params
