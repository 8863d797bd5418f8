"""Matching loss functions and their derivatives w.r.t. the output pre-activation.

Each loss pairs with an output activation so that the gradient and the
Hessian w.r.t. h = h_L take simple closed forms:

    squared_error         (linear):   value ||yhat - y||^2, grad 2(yhat - y), H = 2 I
    binary_cross_entropy  (logistic): grad yhat - y, H = diag(yhat (1 - yhat))
    softmax_cross_entropy (softmax):  grad yhat - y, H = diag(yhat) - yhat yhat^T

All values are nonnegative and every H is symmetric positive semidefinite.
Cross-entropy values are computed from pre-activations with softplus /
log-sum-exp, never from clipped probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network
from .exceptions import ShapeError
from .network import ForwardCache

SQUARED_ERROR = "squared_error"
BINARY_CROSS_ENTROPY = "binary_cross_entropy"
SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"
LOSS_KINDS = (SQUARED_ERROR, BINARY_CROSS_ENTROPY, SOFTMAX_CROSS_ENTROPY)

MATCHING_ACTIVATION = {
    SQUARED_ERROR: network.LINEAR,
    BINARY_CROSS_ENTROPY: network.LOGISTIC,
    SOFTMAX_CROSS_ENTROPY: network.SOFTMAX,
}


@dataclass(frozen=True)
class LossSpec:
    kind: str
    softmax_perturbation: float = 1e-4

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ShapeError(f"unknown loss kind: {self.kind!r}")
        if self.softmax_perturbation < 0:
            raise ShapeError("softmax_perturbation must be nonnegative")

    def check_matches(self, shape: network.NetworkShape) -> None:
        expected = MATCHING_ACTIVATION[self.kind]
        actual = shape.activations[-1]
        if actual != expected:
            raise ShapeError(
                f"loss {self.kind!r} requires a {expected!r} output layer, "
                f"network has {actual!r}"
            )


def _targets(cache: ForwardCache, y, kind: str) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    cols = y.reshape(-1, 1) if y.ndim == 1 else y
    m_out = cache.output.shape[0]
    if cols.ndim != 2 or cols.shape != (m_out, cache.ncols):
        raise ShapeError(
            f"targets of shape {y.shape} do not match outputs "
            f"({m_out}, {cache.ncols})"
        )
    if np.any(np.isnan(cols)):
        raise ValueError("targets contain NaN")
    if kind in (BINARY_CROSS_ENTROPY, SOFTMAX_CROSS_ENTROPY):
        if np.any(cols < 0.0) or np.any(cols > 1.0):
            raise ValueError("cross-entropy targets must lie in [0, 1]")
    if kind == SOFTMAX_CROSS_ENTROPY:
        sums = np.sum(cols, axis=0)
        if np.any(np.abs(sums - 1.0) > 1e-8):
            raise ValueError("softmax cross-entropy targets must sum to 1")
    return cols


def _softplus(h: np.ndarray) -> np.ndarray:
    return np.maximum(h, 0.0) + np.log1p(np.exp(-np.abs(h)))


def _logsumexp_cols(h: np.ndarray) -> np.ndarray:
    m = np.max(h, axis=0)
    return m + np.log(np.sum(np.exp(h - m[None, :]), axis=0))


def loss_value(spec: LossSpec, cache: ForwardCache, y):
    """Per-sample loss; scalar for a 1-D target, per-column array otherwise."""
    single = np.asarray(y).ndim == 1
    t = _targets(cache, y, spec.kind)
    if spec.kind == SQUARED_ERROR:
        vals = np.sum((cache.output - t) ** 2, axis=0)
    elif spec.kind == BINARY_CROSS_ENTROPY:
        h = cache.h(cache.shape.num_layers)
        vals = np.sum(_softplus(h) - t * h, axis=0)
    else:
        h = cache.h(cache.shape.num_layers)
        vals = _logsumexp_cols(h) - np.sum(t * h, axis=0)
    return float(vals[0]) if single else vals


def loss_grad_h(spec: LossSpec, cache: ForwardCache, y):
    """Gradient of the loss w.r.t. the output pre-activation h_L."""
    single = np.asarray(y).ndim == 1
    t = _targets(cache, y, spec.kind)
    if spec.kind == SQUARED_ERROR:
        g = 2.0 * (cache.output - t)
    else:
        g = cache.output - t
    return g[:, 0] if single else g


def loss_hessian_h(spec: LossSpec, cache: ForwardCache, y=None) -> np.ndarray:
    """Closed-form Hessian(s) w.r.t. h_L.

    Returns (m_L, m_L) for a single-sample cache, else (B, m_L, m_L).
    Targets do not enter any of the three closed forms.
    """
    yhat = cache.output
    m_out, b = yhat.shape
    if spec.kind == SQUARED_ERROR:
        hs = np.broadcast_to(2.0 * np.eye(m_out), (b, m_out, m_out)).copy()
    elif spec.kind == BINARY_CROSS_ENTROPY:
        hs = np.zeros((b, m_out, m_out))
        diag = (yhat * (1.0 - yhat)).T
        idx = np.arange(m_out)
        hs[:, idx, idx] = diag
    else:
        hs = np.einsum("jb,jk->bjk", yhat, np.eye(m_out)) - np.einsum(
            "jb,kb->bjk", yhat, yhat
        )
    return hs[0] if cache.single or b == 1 else hs


def hessian_apply(spec: LossSpec, cache: ForwardCache, u: np.ndarray) -> np.ndarray:
    """Column-wise product H_i @ u_i without materializing any H_i."""
    yhat = cache.output
    if u.shape != yhat.shape:
        raise ShapeError(f"operand shape {u.shape} does not match {yhat.shape}")
    if spec.kind == SQUARED_ERROR:
        return 2.0 * u
    if spec.kind == BINARY_CROSS_ENTROPY:
        return yhat * (1.0 - yhat) * u
    return network.act_jac_apply(network.SOFTMAX, yhat, u)


def hessian_inverse(spec: LossSpec, cache: ForwardCache, floor: float | None = None) -> np.ndarray:
    """Inverse of H (perturbed by c I for the softmax kind).

    For the softmax kind the perturbed matrix diag(yhat + c) - yhat yhat^T
    is inverted by a rank-one update of the diagonal inverse. For the
    logistic kind a saturated output makes H singular; pass `floor` to
    clamp the diagonal instead of raising.

    Returns (m_L, m_L) for a single-sample cache, else (B, m_L, m_L).
    """
    yhat = cache.output
    m_out, b = yhat.shape
    if spec.kind == SQUARED_ERROR:
        out = np.broadcast_to(0.5 * np.eye(m_out), (b, m_out, m_out)).copy()
    elif spec.kind == BINARY_CROSS_ENTROPY:
        diag = yhat * (1.0 - yhat)
        if floor is not None:
            diag = np.maximum(diag, floor)
        elif np.any(diag == 0.0):
            raise ArithmeticError(
                "logistic output saturated to 0 or 1; Hessian is numerically singular"
            )
        out = np.zeros((b, m_out, m_out))
        idx = np.arange(m_out)
        out[:, idx, idx] = (1.0 / diag).T
    else:
        c = spec.softmax_perturbation
        if c <= 0.0:
            raise ArithmeticError(
                "softmax Hessian is singular; a positive perturbation is required"
            )
        out = np.empty((b, m_out, m_out))
        for i in range(b):
            ainv = 1.0 / (yhat[:, i] + c)
            w = ainv * yhat[:, i]
            denom = 1.0 - yhat[:, i] @ w
            out[i] = np.diag(ainv) + np.outer(w, w) / denom
    return out[0] if cache.single or b == 1 else out


def classification_error(yhat, y) -> int:
    """1 iff the predicted class differs from the true class.

    Multi-class predictions take the argmax (ties to the lowest index);
    scalar binary predictions threshold at 0.5.
    """
    yhat = np.atleast_1d(np.asarray(yhat, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if yhat.shape != y.shape:
        raise ShapeError(f"prediction shape {yhat.shape} != target shape {y.shape}")
    if yhat.size == 1:
        pred = 1 if yhat[0] > 0.5 else 0
        return int(pred != int(round(y[0])))
    return int(np.argmax(yhat) != np.argmax(y))


def error_rate(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean classification error over sample columns."""
    if outputs.shape != targets.shape:
        raise ShapeError(
            f"output shape {outputs.shape} != target shape {targets.shape}"
        )
    if outputs.shape[0] == 1:
        pred = (outputs[0] > 0.5).astype(int)
        truth = np.rint(targets[0]).astype(int)
        return float(np.mean(pred != truth))
    return float(np.mean(np.argmax(outputs, axis=0) != np.argmax(targets, axis=0)))
