"""Backpropagation kernels: gradients, Jacobian products, factored dots.

The output Jacobian of sample i is J_i = d yhat_i / d theta. Reverse-mode
products J_i^T x come out Kronecker-factored: the weight block of layer l
is the outer product a_l v_{l-1}^T of a backward adjoint vector with the
layer input, and the bias block is a_l itself. BackpropFactors keeps
those per-layer vectors so Gram matrices and dot products can be formed
without ever materializing length-n vectors:

    <expand(fa), expand(fb)> = sum_l (va_l . vb_l + 1) * (aa_l . ab_l)

where the +1 accounts exactly for the bias blocks.

All kernels accept batched caches (samples as columns) and perform the
per-sample recursions simultaneously; counters advance by the number of
columns processed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import loss as loss_mod
from .counters import OpCounters
from .exceptions import ShapeError
from .network import ForwardCache, NetworkShape, act_jac_apply, unpack


@dataclass
class BackpropFactors:
    """Per-layer adjoint vectors plus the layer inputs they pair with.

    layer_adjoints[l-1] is (m_l, B); layer_inputs[l-1] is (m_{l-1}, B) and
    aliases the forward cache. Column i holds the factors of sample i.
    """

    shape: NetworkShape
    layer_adjoints: list[np.ndarray]
    layer_inputs: list[np.ndarray]

    @property
    def ncols(self) -> int:
        return self.layer_adjoints[0].shape[1]

    def expand_sum(self, weights=None) -> np.ndarray:
        """Packed sum over samples of the factored vectors, optionally weighted."""
        parts = []
        for a, v in zip(self.layer_adjoints, self.layer_inputs):
            aw = a if weights is None else a * np.asarray(weights)[None, :]
            parts.append((aw @ v.T).reshape(-1, order="F"))
            parts.append(np.sum(aw, axis=1))
        return np.concatenate(parts)

    def expand_mean(self) -> np.ndarray:
        return self.expand_sum() / self.ncols

    def expand_sample(self, i: int = 0) -> np.ndarray:
        """Packed vector of a single sample's factors."""
        parts = []
        for a, v in zip(self.layer_adjoints, self.layer_inputs):
            parts.append(np.outer(a[:, i], v[:, i]).reshape(-1, order="F"))
            parts.append(np.array(a[:, i]))
        return np.concatenate(parts)

    def dots_with(self, packed) -> np.ndarray:
        """Per-sample dot products of the factored vectors with a packed vector."""
        packed = np.asarray(packed, dtype=np.float64)
        out = np.zeros(self.ncols)
        for (a, v), (w, b) in zip(
            zip(self.layer_adjoints, self.layer_inputs),
            unpack(self.shape, packed),
        ):
            out += np.sum(a * (w @ v + b[:, None]), axis=0)
        return out

    def cols(self, idx) -> "BackpropFactors":
        return BackpropFactors(
            shape=self.shape,
            layer_adjoints=[a[:, idx] for a in self.layer_adjoints],
            layer_inputs=[v[:, idx] for v in self.layer_inputs],
        )


def factored_dot(fa: BackpropFactors, fb: BackpropFactors) -> float:
    """Dot product of two single-sample factored vectors.

    Equals <expand(fa), expand(fb)> with the bias blocks contributing
    through the +1 term.
    """
    if fa.shape != fb.shape:
        raise ShapeError("factor sets come from different network shapes")
    if fa.ncols != 1 or fb.ncols != 1:
        raise ShapeError("factored_dot expects single-sample factor sets")
    total = 0.0
    for aa, va, ab, vb in zip(
        fa.layer_adjoints, fa.layer_inputs, fb.layer_adjoints, fb.layer_inputs
    ):
        total += (va[:, 0] @ vb[:, 0] + 1.0) * (aa[:, 0] @ ab[:, 0])
    return total


def _layer_inputs(cache: ForwardCache) -> list[np.ndarray]:
    return [cache.v(l - 1) for l in range(1, cache.shape.num_layers + 1)]


def _backward_adjoints(
    shape: NetworkShape, params, cache: ForwardCache, seed: np.ndarray
) -> list[np.ndarray]:
    """Run the adjoint recursion from an h_L-space seed down to layer 1."""
    nl = shape.num_layers
    adjoints: list[np.ndarray] = [None] * nl
    adjoints[nl - 1] = seed
    a = seed
    for l in range(nl - 1, 0, -1):
        w_next = params[l][0]
        a = act_jac_apply(shape.activations[l - 1], cache.v(l), w_next.T @ a)
        adjoints[l - 1] = a
    return adjoints


def gradient(
    shape: NetworkShape,
    theta,
    cache: ForwardCache,
    y,
    spec: loss_mod.LossSpec,
    counters: OpCounters | None = None,
) -> tuple[np.ndarray, BackpropFactors]:
    """Backward pass for the loss gradient.

    Returns the packed gradient (the mean over the cache's sample columns,
    so a single-sample cache yields that sample's gradient) together with
    the per-sample factors for Gram reuse.
    """
    params = unpack(shape, theta)
    if cache.ncols == 0:
        raise ShapeError("empty cache")
    r = loss_mod.loss_grad_h(spec, cache, y)
    if r.ndim == 1:
        r = r.reshape(-1, 1)
    adjoints = _backward_adjoints(shape, params, cache, r)
    factors = BackpropFactors(shape, adjoints, _layer_inputs(cache))
    if counters is not None:
        counters.backward_passes += cache.ncols
    return factors.expand_mean(), factors


def jvp(
    shape: NetworkShape,
    theta,
    cache: ForwardCache,
    theta1,
    counters: OpCounters | None = None,
) -> np.ndarray:
    """Forward-mode product J_i theta1 for every sample column.

    Propagates the directional perturbation through the layer recursion
    h1_l = W1_l v_{l-1} + W_l v1_{l-1} + b1_l.
    """
    params = unpack(shape, theta)
    direction = unpack(shape, theta1)
    v1 = np.zeros_like(cache.x)
    for l in range(1, shape.num_layers + 1):
        w, _ = params[l - 1]
        w1, b1 = direction[l - 1]
        h1 = w1 @ cache.v(l - 1) + w @ v1 + b1[:, None]
        v1 = act_jac_apply(shape.activations[l - 1], cache.v(l), h1)
    if counters is not None:
        counters.jvp_products += cache.ncols
    return v1[:, 0] if cache.single else v1


def vjp(
    shape: NetworkShape,
    theta,
    cache: ForwardCache,
    x_out,
    counters: OpCounters | None = None,
    expand: bool = True,
) -> tuple[np.ndarray | None, BackpropFactors]:
    """Reverse-mode product J_i^T x_i for every sample column.

    The packed result sums over columns (so a single-sample cache yields
    J^T x exactly). With expand=False only the factors are computed and
    the outer-product expansion is skipped.
    """
    params = unpack(shape, theta)
    x = np.asarray(x_out, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape != cache.output.shape:
        raise ShapeError(
            f"output seed shape {x.shape} does not match {cache.output.shape}"
        )
    nl = shape.num_layers
    seed = act_jac_apply(shape.activations[nl - 1], cache.v(nl), x)
    adjoints = _backward_adjoints(shape, params, cache, seed)
    factors = BackpropFactors(shape, adjoints, _layer_inputs(cache))
    if counters is not None:
        counters.vjp_products += cache.ncols
    packed = factors.expand_sum() if expand else None
    return packed, factors
