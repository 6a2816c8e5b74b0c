"""Single-coil subsampled-Fourier measurement operator.

Images and k-space data are real-pair fields ``(..., 2, H, W)``. Masks are stored
in the unshifted DFT layout used by :func:`irim.numerics.dft2`, so the "central"
low-frequency band wraps around column 0; :meth:`SamplingMask.centered` gives the
display layout.
"""
from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from .numerics import dft2, idft2, seeded_rng

__all__ = [
    "SamplingMask",
    "FourierOperator",
    "make_mask",
    "apply_forward",
    "apply_adjoint",
    "simulate_measurement",
    "data_consistency",
    "data_consistency_grad",
    "dc_grad_vjp",
]


@dataclass(frozen=True)
class SamplingMask:
    bits: np.ndarray = field(repr=False)
    acceleration: float = 1.0
    center_fraction: float = 1.0
    seed: int = 0

    @property
    def shape(self):
        return self.bits.shape

    @property
    def columns(self):
        return np.flatnonzero(self.bits[0])

    def centered(self):
        return np.fft.fftshift(self.bits, axes=-1)

    def to_dict(self):
        packed = np.packbits(self.bits.astype(np.uint8).ravel())
        return {
            "shape": list(self.bits.shape),
            "acceleration": self.acceleration,
            "center_fraction": self.center_fraction,
            "seed": self.seed,
            "bits": base64.b64encode(packed.tobytes()).decode("ascii"),
        }

    @classmethod
    def from_dict(cls, doc):
        shape = tuple(doc["shape"])
        packed = np.frombuffer(base64.b64decode(doc["bits"]), dtype=np.uint8)
        bits = np.unpackbits(packed)[: int(np.prod(shape))].reshape(shape).astype(bool)
        return cls(bits, float(doc["acceleration"]), float(doc["center_fraction"]), int(doc["seed"]))


def make_mask(H, W, acceleration, center_fraction, seed=0):
    """Cartesian column mask: a fully sampled low-frequency band plus random lines.

    The band has ``round(center_fraction * W)`` columns; the remaining budget of
    ``round(W / acceleration)`` columns is drawn uniformly without replacement.
    """
    if acceleration < 1:
        raise ValueError(f"acceleration must be >= 1, got {acceleration}")
    if not 0 < center_fraction <= 1:
        raise ValueError(f"center_fraction must lie in (0, 1], got {center_fraction}")
    if center_fraction * W < 1:
        raise ValueError(f"center band of {center_fraction} * {W} columns is empty")
    n_center = int(round(center_fraction * W))
    budget = int(round(W / acceleration))
    if n_center > budget:
        raise ValueError(
            f"center band ({n_center} columns) exceeds the sampling budget "
            f"({budget} columns at acceleration {acceleration})"
        )
    centered = np.zeros(W, dtype=bool)
    start = (W - n_center + 1) // 2
    centered[start : start + n_center] = True
    rest = np.flatnonzero(~centered)
    rng = seeded_rng(seed)
    centered[rng.choice(rest, size=budget - n_center, replace=False)] = True
    cols = np.fft.ifftshift(centered)
    bits = np.broadcast_to(cols, (H, W)).copy()
    return SamplingMask(bits, float(acceleration), float(center_fraction), int(seed))


class FourierOperator:
    """``A = P F``: unitary 2D DFT followed by a binary sampling mask.

    ``mask`` may be a :class:`SamplingMask`, an ``(H, W)`` array, or a batch of
    masks ``(N, H, W)`` applied item-wise.
    """

    def __init__(self, mask):
        bits = mask.bits if isinstance(mask, SamplingMask) else np.asarray(mask)
        if bits.ndim not in (2, 3):
            raise ValueError(f"mask must be (H, W) or (N, H, W), got shape {bits.shape}")
        self.mask = mask
        self.weights = bits.astype(np.float64)[..., None, :, :]  # broadcast over re/im

    @property
    def shape(self):
        return self.weights.shape[-2:]

    def _check(self, x):
        if x.shape[-3:] != (2, *self.shape):
            raise ValueError(f"field of shape {x.shape} does not match mask {self.shape}")
        if self.weights.ndim == 4 and (x.ndim != 4 or x.shape[0] != self.weights.shape[0]):
            raise ValueError(f"batched mask of {self.weights.shape[0]} items, field shape {x.shape}")

    def _masked(self, x):
        w = self.weights if x.dtype == np.float64 else self.weights.astype(x.dtype)
        return x * w

    def forward(self, eta):
        eta = np.asarray(eta)
        self._check(eta)
        return self._masked(dft2(eta))

    def adjoint(self, d):
        d = np.asarray(d)
        self._check(d)
        return idft2(self._masked(d))

    def normal(self, v):
        """``A^H A v``: the projection onto sampled k-space, back in image space."""
        return self.adjoint(self.forward(v))

    __call__ = forward


def apply_forward(A, eta):
    return A.forward(eta)


def apply_adjoint(A, d):
    return A.adjoint(d)


def simulate_measurement(eta, mask, noise_std=0.0, seed=0):
    """``d = P F eta + P n`` with i.i.d. Gaussian noise of ``noise_std`` per component."""
    A = mask if isinstance(mask, FourierOperator) else FourierOperator(mask)
    d = A.forward(eta)
    if noise_std:
        noise = seeded_rng(seed).standard_normal(d.shape) * noise_std
        d = d + A._masked(noise.astype(d.dtype, copy=False))
    return d


def data_consistency(A, d, eta):
    """``0.5 * ||d - A eta||^2`` summed over the whole field (and batch)."""
    r = A.forward(eta) - d
    return 0.5 * float(np.sum(r * r))


def data_consistency_grad(A, d, eta):
    """Gradient of :func:`data_consistency` in ``eta``: ``A^H (A eta - d)``."""
    d = np.asarray(d)
    return A.adjoint(A.forward(eta) - d)


def dc_grad_vjp(A, v):
    """Jacobian of :func:`data_consistency_grad` (``A^H A``, self-adjoint) applied to ``v``."""
    return A.normal(v)
