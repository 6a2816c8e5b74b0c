"""Training losses: NMSE, pixel-masked NMSE and the weighted multi-step sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import seeded_rng

__all__ = [
    "LossConfig",
    "nmse",
    "pixel_mask",
    "masked_nmse_loss",
    "batch_nmse",
    "weighted_multistep_loss",
]

MAX_MASK_RESAMPLES = 100


@dataclass
class LossConfig:
    """``keep_fraction``: Bernoulli pixel keep probability of the loss mask.

    ``weights``: per-step importance weights; ``None`` puts all weight on the
    last step. ``seed``: base seed of the per-iteration loss masks.
    """

    keep_fraction: float = 0.01
    weights: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must lie in (0, 1], got {self.keep_fraction}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or not np.any(w > 0):
                raise ValueError("step weights must be non-negative and not all zero")

    def step_weights(self, n_steps):
        if self.weights is None:
            w = np.zeros(n_steps)
            w[-1] = 1.0
            return w
        w = np.asarray(self.weights, dtype=float)
        if w.size != n_steps:
            raise ValueError(f"{w.size} step weights given for {n_steps} steps")
        return w

    @classmethod
    def uniform(cls, n_steps, **kw):
        return cls(weights=tuple(np.full(n_steps, 1.0 / n_steps)), **kw)


def nmse(x_hat, x):
    """``||x_hat - x||^2 / ||x||^2`` over all entries."""
    x_hat = np.asarray(x_hat)
    x = np.asarray(x)
    denom = float(np.sum(np.abs(x) ** 2))
    if denom == 0:
        raise ValueError("NMSE is undefined for an all-zero reference")
    return float(np.sum(np.abs(x_hat - x) ** 2)) / denom


def pixel_mask(target, keep_fraction, seed, iteration=0):
    """Bernoulli pixel mask ``(N, 1, H, W)`` shared by both real channels.

    Redrawn (up to a limit) until every item keeps at least one pixel with a
    nonzero target.
    """
    target = np.asarray(target)
    n, _, H, W = target.shape
    if keep_fraction == 1:
        return np.ones((n, 1, H, W), dtype=target.dtype)
    rng = seeded_rng(seed, iteration)
    for _ in range(MAX_MASK_RESAMPLES):
        m = (rng.random((n, 1, H, W)) < keep_fraction).astype(target.dtype)
        if np.all(np.sum((m * target) ** 2, axis=(1, 2, 3)) > 0):
            return m
    raise ValueError(
        f"masked target stayed all-zero after {MAX_MASK_RESAMPLES} draws "
        f"(keep_fraction={keep_fraction})"
    )


def batch_nmse(x_hat, x, mask=None):
    """Mean over the batch of per-item NMSE, and its gradient in ``x_hat``."""
    r = x_hat - x
    if mask is not None:
        r = r * mask
        x = x * mask
    denom = np.sum(x * x, axis=(1, 2, 3), keepdims=True)
    if np.any(denom == 0):
        raise ValueError("NMSE is undefined for an all-zero reference")
    n = x_hat.shape[0]
    value = float(np.mean(np.sum(r * r, axis=(1, 2, 3), keepdims=True) / denom))
    grad = 2.0 * r / denom / n
    if mask is not None:
        grad = grad * mask
    return value, grad


def masked_nmse_loss(x_hat, x, keep_fraction, seed, iteration=0):
    """``NMSE(m * x_hat, m * x)`` for one random pixel mask ``m``.

    Accepts one real-pair image ``(2, H, W)`` or a batch, in which case the
    per-item values are averaged.
    """
    x_hat = np.asarray(x_hat)
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x_hat, x = x_hat[None], x[None]
    m = pixel_mask(x, keep_fraction, seed, iteration)
    values = [nmse(mi * xh, mi * xi) for mi, xh, xi in zip(m, x_hat, x)]
    return values[0] if single else float(np.mean(values))


def weighted_multistep_loss(trajectory, x, weights, base_loss=nmse):
    """``sum_t w_t * base_loss(eta_t, x)`` over estimates ``eta_1 .. eta_T``."""
    weights = np.asarray(weights, dtype=float)
    if len(trajectory) != weights.size:
        raise ValueError(f"{len(trajectory)} estimates for {weights.size} weights")
    return float(sum(w * base_loss(eta, x) for w, eta in zip(weights, trajectory) if w != 0))
