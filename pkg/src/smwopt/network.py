"""Fully-connected feed-forward networks: shapes, packing, forward pass.

Parameters live in one flat float64 vector theta laid out as
(vec(W1), b1, ..., vec(WL), bL), where vec() stacks the columns of each
weight matrix. Layer l maps v_{l-1} to v_l = act_l(W_l v_{l-1} + b_l).

All kernels accept a single sample (1-D input) or a batch arranged as
columns of a 2-D array; caches always store 2-D arrays internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .counters import OpCounters
from .exceptions import NumericError, ShapeError

LINEAR = "linear"
LOGISTIC = "logistic"
SOFTMAX = "softmax"
ACTIVATION_KINDS = (LINEAR, LOGISTIC, SOFTMAX)


@dataclass(frozen=True)
class NetworkShape:
    """Layer widths (m0, ..., mL) and one activation kind per layer 1..L."""

    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        sizes = tuple(int(m) for m in self.layer_sizes)
        acts = tuple(str(a) for a in self.activations)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activations", acts)
        if len(sizes) < 2:
            raise ShapeError("need at least an input and an output layer")
        if any(m <= 0 for m in sizes):
            raise ShapeError(f"layer sizes must be positive: {sizes}")
        if len(acts) != len(sizes) - 1:
            raise ShapeError(
                f"expected {len(sizes) - 1} activations, got {len(acts)}"
            )
        for kind in acts:
            if kind not in ACTIVATION_KINDS:
                raise ShapeError(f"unknown activation kind: {kind!r}")
        if SOFTMAX in acts[:-1]:
            raise ShapeError("softmax is only allowed on the output layer")

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(
            m_out * m_in + m_out
            for m_in, m_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )

    def param_layout(self) -> list[tuple[slice, slice, int, int]]:
        """Per layer: (weight slice, bias slice, m_out, m_in) into theta."""
        layout = []
        offset = 0
        for m_in, m_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            wsl = slice(offset, offset + m_out * m_in)
            offset += m_out * m_in
            bsl = slice(offset, offset + m_out)
            offset += m_out
            layout.append((wsl, bsl, m_out, m_in))
        return layout


def check_theta(shape: NetworkShape, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size != shape.num_params:
        raise ShapeError(
            f"theta has size {theta.size}, expected {shape.num_params}"
        )
    return theta


def unpack(shape: NetworkShape, theta) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split theta into per-layer (W, b). W slices are column-major views."""
    theta = check_theta(shape, theta)
    params = []
    for wsl, bsl, m_out, m_in in shape.param_layout():
        w = theta[wsl].reshape((m_out, m_in), order="F")
        params.append((w, theta[bsl]))
    return params


def pack(shape: NetworkShape, params) -> np.ndarray:
    """Inverse of unpack: flatten per-layer (W, b) back into theta."""
    parts = []
    for (w, b), (_, _, m_out, m_in) in zip(params, shape.param_layout()):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape != (m_out, m_in) or b.shape != (m_out,):
            raise ShapeError(
                f"layer block shapes {w.shape}/{b.shape} do not match "
                f"({m_out}, {m_in})/({m_out},)"
            )
        parts.append(w.reshape(-1, order="F"))
        parts.append(b)
    return np.concatenate(parts)


def init_theta(shape: NetworkShape, seed_or_rng=0) -> np.ndarray:
    """Weights i.i.d. uniform(-s, s) with s = 1/sqrt(fan_in); biases zero."""
    rng = np.random.default_rng(seed_or_rng) if not isinstance(
        seed_or_rng, np.random.Generator
    ) else seed_or_rng
    parts = []
    for m_in, m_out in zip(shape.layer_sizes[:-1], shape.layer_sizes[1:]):
        s = 1.0 / np.sqrt(m_in)
        parts.append(rng.uniform(-s, s, size=m_out * m_in))
        parts.append(np.zeros(m_out))
    return np.concatenate(parts)


def sigmoid(h: np.ndarray) -> np.ndarray:
    out = np.empty_like(h)
    pos = h >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-h[pos]))
    eh = np.exp(h[~pos])
    out[~pos] = eh / (1.0 + eh)
    return out


def softmax(h: np.ndarray) -> np.ndarray:
    """Column-wise softmax with max-subtraction for overflow safety."""
    shifted = h - np.max(h, axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=0, keepdims=True)


def apply_activation(kind: str, h: np.ndarray) -> np.ndarray:
    if kind == LINEAR:
        return np.array(h, copy=True)
    if kind == LOGISTIC:
        return sigmoid(h)
    if kind == SOFTMAX:
        return softmax(h)
    raise ShapeError(f"unknown activation kind: {kind!r}")


def activation_jacobian(kind: str, h, v) -> np.ndarray:
    """Materialized jacobian dv/dh for one sample; v must equal act(h)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError("activation_jacobian expects a single sample")
    if kind == LINEAR:
        return np.eye(v.size)
    if kind == LOGISTIC:
        return np.diag(v * (1.0 - v))
    if kind == SOFTMAX:
        return np.diag(v) - np.outer(v, v)
    raise ShapeError(f"unknown activation kind: {kind!r}")


def act_jac_apply(kind: str, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Apply dv/dh column-wise to u without materializing it.

    All three jacobians are symmetric, so this serves both the forward
    (J u) and adjoint (J^T u) directions.
    """
    if kind == LINEAR:
        return np.array(u, copy=True)
    if kind == LOGISTIC:
        return v * (1.0 - v) * u
    if kind == SOFTMAX:
        return v * u - v * np.sum(v * u, axis=0, keepdims=True)
    raise ShapeError(f"unknown activation kind: {kind!r}")


@dataclass
class ForwardCache:
    """Pre-activations and activations from one forward pass.

    Arrays are (m_l, B) with samples as columns; `single` records whether
    the original input was 1-D so callers can return per-sample shapes.
    """

    shape: NetworkShape
    x: np.ndarray
    preacts: list[np.ndarray] = field(default_factory=list)
    acts: list[np.ndarray] = field(default_factory=list)
    single: bool = False

    @property
    def ncols(self) -> int:
        return self.x.shape[1]

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]

    def v(self, l: int) -> np.ndarray:
        """Layer output v_l; v_0 is the network input."""
        return self.x if l == 0 else self.acts[l - 1]

    def h(self, l: int) -> np.ndarray:
        return self.preacts[l - 1]

    def cols(self, idx) -> "ForwardCache":
        """View of a subset of sample columns (shares storage)."""
        return ForwardCache(
            shape=self.shape,
            x=self.x[:, idx],
            preacts=[h[:, idx] for h in self.preacts],
            acts=[v[:, idx] for v in self.acts],
            single=False,
        )


def _as_cols(x, m0: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.size != m0:
            raise ShapeError(f"input has length {x.size}, expected {m0}")
        return x.reshape(-1, 1), True
    if x.ndim == 2:
        if x.shape[0] != m0:
            raise ShapeError(f"input has {x.shape[0]} rows, expected {m0}")
        return x, False
    raise ShapeError(f"input must be 1- or 2-dimensional, got ndim={x.ndim}")


def forward(
    shape: NetworkShape,
    theta,
    x,
    counters: OpCounters | None = None,
) -> ForwardCache:
    """Forward pass caching h_l and v_l for every layer."""
    params = unpack(shape, theta)
    cols, single = _as_cols(x, shape.input_size)
    cache = ForwardCache(shape=shape, x=cols, single=single)
    v = cols
    for l, ((w, b), kind) in enumerate(zip(params, shape.activations), start=1):
        h = w @ v + b[:, None]
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite pre-activation at layer {l}")
        v = apply_activation(kind, h)
        cache.preacts.append(h)
        cache.acts.append(v)
    if counters is not None:
        counters.forward_passes += cache.ncols
    return cache
