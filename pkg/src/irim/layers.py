"""Invertible layers with exact inverses and local vector-Jacobian products.

The main layer embeds its input with an orthogonal 1x1 convolution ``U`` built from
Householder reflections, applies an additive coupling with a downsampling residual
block ``G`` on the first channel split, and projects back with ``U^T``::

    x' = U x;  y'_1 = x'_1;  y'_2 = x'_2 + G(x'_1);  y = U^T y'

Every layer exposes ``forward``, ``inverse``, ``vjp`` (recomputes its own internals
from the true input) and ``reverse_vjp`` (reconstructs the input from the output
and differentiates in the same pass, as used by invertible learning).
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .meter import NULL_METER
from .numerics import conv2d, conv2d_kernel_grad, conv2d_transpose, seeded_rng

__all__ = [
    "HOUSEHOLDER_EPS",
    "build_orthogonal",
    "householder_vjp",
    "init_householder",
    "orth_conv",
    "orth_conv_inverse",
    "weight_norm",
    "weight_norm_vjp",
    "glu",
    "glu_vjp",
    "silu",
    "ResidualBlock",
    "CouplingLayer",
    "AffineCouplingLayer",
    "layer_vjp",
]

HOUSEHOLDER_EPS = 1e-12
WEIGHT_NORM_EPS = 1e-30


class DegenerateReflectionError(ValueError):
    pass


# -- orthogonal embedding ---------------------------------------------------


def _check_vectors(vectors, eps):
    norms = np.linalg.norm(vectors, axis=1)
    bad = np.flatnonzero(norms <= eps)
    if bad.size:
        raise DegenerateReflectionError(
            f"Householder vector {int(bad[0])} has norm {norms[bad[0]]:.3g} <= {eps:g}"
        )


def _reflection(v):
    return np.eye(v.size, dtype=v.dtype) - (2.0 / np.dot(v, v)) * np.outer(v, v)


def build_orthogonal(vectors, eps=HOUSEHOLDER_EPS):
    """``U = H_D ... H_1`` from a ``(D, C)`` stack of reflection normals."""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise ValueError(f"expected a (D, C) stack of vectors, got shape {vectors.shape}")
    _check_vectors(vectors, eps)
    U = np.eye(vectors.shape[1], dtype=vectors.dtype)
    for v in vectors:
        U = _reflection(v) @ U
    return U


def householder_vjp(vectors, dU):
    """Gradient of ``<build_orthogonal(vectors), dU>`` with respect to ``vectors``."""
    vectors = np.asarray(vectors)
    prefix = [np.eye(vectors.shape[1], dtype=vectors.dtype)]
    for v in vectors[:-1]:
        prefix.append(_reflection(v) @ prefix[-1])
    grads = np.zeros_like(vectors)
    G = dU
    for k in range(len(vectors) - 1, -1, -1):
        v = vectors[k]
        n = np.dot(v, v)
        M = G @ prefix[k].T  # cotangent of H_k
        Mv, MTv = M @ v, M.T @ v
        grads[k] = -2.0 / n * (Mv + MTv) + 4.0 * np.dot(v, Mv) / n**2 * v
        G = _reflection(v) @ G
    return grads


def init_householder(n_channels, n_reflections, rng, eps=HOUSEHOLDER_EPS):
    """Standard-normal reflection normals, redrawing any degenerate one."""
    vectors = rng.standard_normal((n_reflections, n_channels))
    for k in range(n_reflections):
        while np.linalg.norm(vectors[k]) <= eps:
            vectors[k] = rng.standard_normal(n_channels)
    return vectors


def orth_conv(U, x):
    """Per-pixel channel mixing ``y[:, :, i, j] = U @ x[:, :, i, j]``."""
    return np.ascontiguousarray(np.tensordot(U, x, axes=([1], [1])).transpose(1, 0, 2, 3))


def orth_conv_inverse(U, y):
    return orth_conv(U.T, y)


def _mix_grad(a, b):
    """``sum_{n,h,w} a[n, o, h, w] * b[n, c, h, w]`` as an (o, c) matrix."""
    return np.tensordot(a, b, axes=([0, 2, 3], [0, 2, 3]))


# -- residual block pieces --------------------------------------------------


def weight_norm(direction, scale, axis=0):
    """``scale * direction / ||direction||`` with one norm per slice along ``axis``."""
    direction = np.asarray(direction)
    other = tuple(i for i in range(direction.ndim) if i != axis)
    norm = np.sqrt(np.sum(direction * direction, axis=other, keepdims=True))
    shape = [1] * direction.ndim
    shape[axis] = -1
    return np.reshape(scale, shape) * direction / np.maximum(norm, WEIGHT_NORM_EPS)


def weight_norm_vjp(direction, scale, dkernel, axis=0):
    other = tuple(i for i in range(direction.ndim) if i != axis)
    norm = np.maximum(np.sqrt(np.sum(direction * direction, axis=other, keepdims=True)), WEIGHT_NORM_EPS)
    unit = direction / norm
    shape = [1] * direction.ndim
    shape[axis] = -1
    proj = np.sum(unit * dkernel, axis=other, keepdims=True)
    d_scale = proj.reshape(-1)
    d_direction = np.reshape(scale, shape) / norm * (dkernel - unit * proj)
    return d_direction, d_scale


def glu(x):
    """Gated linear unit over channels: ``a * sigmoid(b)`` for ``x = (a, b)``."""
    m = x.shape[1]
    if m % 2:
        raise ValueError(f"GLU needs an even channel count, got {m}")
    a, b = x[:, : m // 2], x[:, m // 2 :]
    return a * expit(b)


def silu(x):
    return x * expit(x)


def silu_vjp(x, g):
    s = expit(x)
    return g * s * (1.0 + x * (1.0 - s))


def glu_vjp(x, g):
    m = x.shape[1] // 2
    a, b = x[:, :m], x[:, m:]
    s = expit(b)
    return np.concatenate([g * s, g * a * s * (1.0 - s)], axis=1)


class ResidualBlock:
    """Downsampling residual function used inside the coupling.

    ``d x d`` stride-``d`` conv -> SiLU -> ``3 x 3`` conv -> SiLU -> ``d x d``
    stride-``d`` transposed conv -> GLU. All kernels are weight-normalised; the
    transposed conv has no bias and emits twice the output channels for the gate.
    Without the inner activations the first two convolutions would collapse into
    one linear map. They are smooth on purpose: a kink at zero lets rounding-level
    differences between stored and reconstructed inputs flip whole gradient terms.

    ``gate_scale`` initialises the weight-norm scale of the last conv. Values near 1
    make a deep random stack grow geometrically (and its inverse lose all precision
    by a few hundred layers); 0.1 keeps a 400-layer stack well conditioned.
    """

    param_names = ("w1_v", "w1_g", "b1", "w2_v", "w2_g", "b2", "w3_v", "w3_g")

    def __init__(
        self, in_channels, out_channels, hidden_channels, factor, rng=None, dtype=np.float64, gate_scale=0.1
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.hidden_channels = hidden_channels
        self.factor = factor
        if factor < 1:
            raise ValueError(f"downsampling factor must be >= 1, got {factor}")
        rng = rng if rng is not None else seeded_rng(0)
        d, k = factor, hidden_channels

        def direction(shape, fan_in):
            return rng.standard_normal(shape) / np.sqrt(fan_in)

        self.params = {
            "w1_v": direction((k, in_channels, d, d), in_channels * d * d),
            "w1_g": np.ones(k),
            "b1": np.zeros(k),
            "w2_v": direction((k, k, 3, 3), k * 9),
            "w2_g": np.ones(k),
            "b2": np.zeros(k),
            # transposed conv, normalised per output channel (axis 1)
            "w3_v": direction((k, 2 * out_channels, d, d), k),
            "w3_g": np.full(2 * out_channels, float(gate_scale)),
        }
        self.astype(dtype)

    def astype(self, dtype):
        for name, p in self.params.items():
            self.params[name] = p.astype(dtype)
        return self

    def kernels(self):
        p = self.params
        return (
            weight_norm(p["w1_v"], p["w1_g"]),
            weight_norm(p["w2_v"], p["w2_g"]),
            weight_norm(p["w3_v"], p["w3_g"], axis=1),
        )

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"block expects (N, {self.in_channels}, H, W) input, got {x.shape}")
        H, W = x.shape[2:]
        if H % self.factor or W % self.factor:
            raise ValueError(
                f"spatial extent {H}x{W} is not divisible by downsampling factor {self.factor}"
            )

    def forward(self, x, meter=NULL_METER, keep=False):
        self._check_input(x)
        k1, k2, k3 = self.kernels()
        p, d = self.params, self.factor
        a1 = conv2d(x, k1, stride=d) + p["b1"][None, :, None, None]
        a2 = conv2d(silu(a1), k2, stride=1, padding=1) + p["b2"][None, :, None, None]
        h3 = conv2d_transpose(silu(a2), k3, stride=d, output_size=x.shape[2:])
        meter.transient(a1.size + a2.size + h3.size)
        out = glu(h3)
        if keep:
            # pre-activations only; the activations are recomputed in backward
            return out, (x, a1, a2, h3, (k1, k2, k3))
        return out

    __call__ = forward

    def backward(self, cache, g):
        """Input cotangent and parameter gradients from a ``keep=True`` cache."""
        x, a1, a2, h3, (k1, k2, k3) = cache
        p, d = self.params, self.factor
        h1, h2 = silu(a1), silu(a2)
        dh3 = glu_vjp(h3, g)
        dk3 = conv2d_kernel_grad(dh3, h2, k3.shape, stride=d)
        dh2 = silu_vjp(a2, conv2d(dh3, k3, stride=d))
        dk2 = conv2d_kernel_grad(h1, dh2, k2.shape, stride=1, padding=1)
        dh1 = silu_vjp(a1, conv2d_transpose(dh2, k2, stride=1, padding=1, output_size=h1.shape[2:]))
        dk1 = conv2d_kernel_grad(x, dh1, k1.shape, stride=d)
        dx = conv2d_transpose(dh1, k1, stride=d, output_size=x.shape[2:])
        grads = {"b1": dh1.sum(axis=(0, 2, 3)), "b2": dh2.sum(axis=(0, 2, 3))}
        grads["w1_v"], grads["w1_g"] = weight_norm_vjp(p["w1_v"], p["w1_g"], dk1)
        grads["w2_v"], grads["w2_g"] = weight_norm_vjp(p["w2_v"], p["w2_g"], dk2)
        grads["w3_v"], grads["w3_g"] = weight_norm_vjp(p["w3_v"], p["w3_g"], dk3, axis=1)
        return dx, grads

    def vjp(self, x, g, meter=NULL_METER):
        _, cache = self.forward(x, meter, keep=True)
        return self.backward(cache, g)

    def zero_(self):
        """Make the block output identically zero (output gate scale set to 0)."""
        self.params["w3_g"][...] = 0.0
        return self


# -- coupling layers --------------------------------------------------------


class CouplingLayer:
    """Additive coupling inside an orthogonal 1x1-convolution embedding."""

    def __init__(
        self,
        n_channels,
        hidden_channels=16,
        factor=1,
        n_reflections=3,
        split=None,
        rng=None,
        dtype=np.float64,
        gate_scale=0.1,
    ):
        split = n_channels // 2 if split is None else split
        if not 0 < split < n_channels:
            raise ValueError(f"split point must lie in (0, {n_channels}), got {split}")
        rng = rng if rng is not None else seeded_rng(0)
        self.n_channels = n_channels
        self.split = split
        self.householder = init_householder(n_channels, n_reflections, rng).astype(dtype)
        self.block = ResidualBlock(split, n_channels - split, hidden_channels, factor, rng, dtype, gate_scale)
        self.debug_corrupt = False

    @property
    def factor(self):
        return self.block.factor

    def parameters(self):
        out = {"householder": self.householder}
        out.update({f"G.{k}": v for k, v in self.block.params.items()})
        return out

    def set_parameter(self, name, value):
        if name == "householder":
            self.householder = value
        else:
            self.block.params[name.removeprefix("G.")] = value

    def astype(self, dtype):
        self.householder = self.householder.astype(dtype)
        self.block.astype(dtype)
        return self

    def orthogonal(self):
        return build_orthogonal(self.householder)

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.n_channels:
            raise ValueError(f"layer expects (N, {self.n_channels}, H, W), got shape {x.shape}")

    def forward(self, x, meter=NULL_METER):
        self._check(x)
        meter.count_eval()
        U = self.orthogonal()
        c = self.split
        xp = orth_conv(U, x)
        yp = xp.copy()
        yp[:, c:] += self.block.forward(xp[:, :c], meter)
        return orth_conv_inverse(U, yp)

    def inverse(self, y, meter=NULL_METER):
        self._check(y)
        meter.count_eval()
        U = self.orthogonal()
        c = self.split
        yp = orth_conv(U, y)
        xp = yp.copy()
        xp[:, c:] -= self.block.forward(yp[:, :c], meter)
        return orth_conv_inverse(U, xp)

    def _backward(self, U, x, xp, yp, cache, gy):
        c = self.split
        gyp = orth_conv(U, gy)
        dU = _mix_grad(yp, gy)
        gx1, block_grads = self.block.backward(cache, gyp[:, c:])
        gxp = gyp
        gxp[:, :c] += gx1
        dU += _mix_grad(gxp, x)
        gx = orth_conv_inverse(U, gxp)
        grads = {"householder": householder_vjp(self.householder, dU)}
        grads.update({f"G.{k}": v for k, v in block_grads.items()})
        if self.debug_corrupt:
            grads = {k: 1.01 * v for k, v in grads.items()}
        return gx, grads

    def vjp(self, x, gy, meter=NULL_METER):
        """``(dL/dx, dL/dparams)`` given the true input ``x`` and ``gy = dL/dy``."""
        self._check(x)
        meter.count_eval()
        U = self.orthogonal()
        c = self.split
        xp = orth_conv(U, x)
        g_out, cache = self.block.forward(xp[:, :c], meter, keep=True)
        yp = xp.copy()
        yp[:, c:] += g_out
        return self._backward(U, x, xp, yp, cache, gy)

    def reverse_vjp(self, y, gy, meter=NULL_METER):
        """Reconstruct the input from ``y`` and differentiate in one pass.

        Returns ``(x, dL/dx, dL/dparams)``; the block is evaluated once and its
        internals are shared between the inversion and the backward rule.
        """
        self._check(y)
        meter.count_eval()
        U = self.orthogonal()
        c = self.split
        yp = orth_conv(U, y)
        g_out, cache = self.block.forward(yp[:, :c], meter, keep=True)
        xp = yp.copy()
        xp[:, c:] -= g_out
        x = orth_conv_inverse(U, xp)
        gx, grads = self._backward(U, x, xp, yp, cache, gy)
        return x, gx, grads


def layer_vjp(layer, x, upstream, meter=NULL_METER):
    return layer.vjp(x, upstream, meter)


class AffineCouplingLayer:
    """Non-volume-preserving coupling ``y'_2 = x'_2 * exp(F(x'_1)) + G(x'_1)``.

    Shares the orthogonal embedding of :class:`CouplingLayer`; ``F`` outputs are
    clamped to ``[-clamp, clamp]`` before the exponential. Forward and inverse
    only, for round-trip stability measurements.
    """

    def __init__(
        self,
        n_channels,
        hidden_channels=16,
        factor=1,
        n_reflections=3,
        split=None,
        clamp=5.0,
        rng=None,
        dtype=np.float64,
        gate_scale=0.1,
        scale_net=None,
        shift_net=None,
    ):
        split = n_channels // 2 if split is None else split
        if not 0 < split < n_channels:
            raise ValueError(f"split point must lie in (0, {n_channels}), got {split}")
        rng = rng if rng is not None else seeded_rng(0)
        self.n_channels = n_channels
        self.split = split
        self.clamp = clamp
        self.householder = init_householder(n_channels, n_reflections, rng).astype(dtype)
        n_out = n_channels - split
        self.shift_net = shift_net or ResidualBlock(split, n_out, hidden_channels, factor, rng, dtype, gate_scale)
        self.scale_net = scale_net or ResidualBlock(split, n_out, hidden_channels, factor, rng, dtype, gate_scale)

    def _gate(self, x1):
        return np.exp(np.clip(self.scale_net(x1), -self.clamp, self.clamp))

    def forward(self, x):
        U = build_orthogonal(self.householder)
        c = self.split
        xp = orth_conv(U, x)
        yp = xp.copy()
        x1 = xp[:, :c]
        yp[:, c:] = xp[:, c:] * self._gate(x1) + self.shift_net(x1)
        return orth_conv_inverse(U, yp)

    def inverse(self, y):
        U = build_orthogonal(self.householder)
        c = self.split
        yp = orth_conv(U, y)
        xp = yp.copy()
        y1 = yp[:, :c]
        xp[:, c:] = (yp[:, c:] - self.shift_net(y1)) / self._gate(y1)
        return orth_conv_inverse(U, xp)
