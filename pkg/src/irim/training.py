"""Evaluation metrics, the Adam optimiser, the training loop and evaluation."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import BackpropMode, backprop
from .forward_model import FourierOperator, make_mask, simulate_measurement
from .losses import LossConfig, masked_nmse_loss, nmse, weighted_multistep_loss
from .model import irim_rollout
from .numerics import NumericalError, seeded_rng, to_complex

__all__ = [
    "nmse",
    "psnr",
    "ssim",
    "masked_nmse_loss",
    "weighted_multistep_loss",
    "AdamConfig",
    "AdamState",
    "adam_step",
    "train",
    "center_crop",
    "zero_filled",
    "model_reconstructor",
    "evaluate",
    "summarize",
    "write_csv",
    "LOG_COLUMNS",
    "METRIC_COLUMNS",
]

LOG_COLUMNS = ("iteration", "wall_ms", "loss", "grad_norm", "peak_retained_elements")
METRIC_COLUMNS = ("item_id", "method", "acceleration", "nmse", "psnr", "ssim")


# -- metrics ----------------------------------------------------------------


def psnr(x_hat, x):
    """``10 log10(max(x)^2 / MSE)``; ``inf`` when the images are identical."""
    x_hat = np.asarray(x_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    mse = float(np.mean((x_hat - x) ** 2))
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(np.max(x) ** 2 / mse))


def ssim(x_hat, x, window=7, k1=0.01, k2=0.03):
    """Mean SSIM over all full ``window x window`` patches.

    Uniform window, sample (N-1) covariances, dynamic range ``max(x) - min(x)``
    of the reference.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape != x_hat.shape or x.ndim != 2:
        raise ValueError(f"ssim expects two equal 2D images, got {x_hat.shape} and {x.shape}")
    data_range = float(x.max() - x.min())
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    npix = window * window
    cov_norm = npix / (npix - 1)

    def local_mean(img):
        return sliding_window_view(img, (window, window)).mean(axis=(-2, -1))

    ux, uy = local_mean(x_hat), local_mean(x)
    vx = cov_norm * (local_mean(x_hat * x_hat) - ux * ux)
    vy = cov_norm * (local_mean(x * x) - uy * uy)
    vxy = cov_norm * (local_mean(x_hat * x) - ux * uy)
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    return float(s.mean())


# -- optimiser --------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    config: AdamConfig = field(default_factory=AdamConfig)
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """In-place Adam update of ``params`` (a name -> array dict) with bias correction."""
    c = state.config
    state.step += 1
    b1c = 1 - c.beta1**state.step
    b2c = 1 - c.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= c.beta1
        m += (1 - c.beta1) * g
        v *= c.beta2
        v += (1 - c.beta2) * g * g
        p -= c.lr * (m / b1c) / (np.sqrt(v / b2c) + c.eps)
    return state


# -- training ---------------------------------------------------------------


def _sample_batch(images, batch_size, seed, iteration, accelerations, center_fractions, noise_std):
    rng = seeded_rng(seed, iteration)
    n, _, H, W = images.shape
    idx = rng.choice(n, size=batch_size, replace=n < batch_size)
    x = images[idx]
    masks = []
    for _ in range(batch_size):
        k = int(rng.integers(len(accelerations)))
        masks.append(make_mask(H, W, accelerations[k], center_fractions[k], int(rng.integers(2**31))).bits)
    A = FourierOperator(np.stack(masks))
    d = simulate_measurement(x, A, noise_std, seed=int(rng.integers(2**31)))
    return x, d, A


def train(
    model,
    images,
    loss_cfg=None,
    optimizer=None,
    mode=BackpropMode.INVERTIBLE,
    iterations=2000,
    seed=0,
    batch_size=4,
    acceleration=4,
    center_fraction=0.08,
    noise_std=0.0,
    log_path=None,
    callback=None,
):
    """Fit ``model`` to ground-truth images by simulating measurements each step.

    Every iteration draws a batch, fresh column masks and a fresh loss pixel
    mask from ``seed``, so two runs with the same arguments produce bit-identical
    parameters. Returns ``(model, log)`` with one dict per iteration.
    """
    loss_cfg = loss_cfg or LossConfig()
    state = optimizer if isinstance(optimizer, AdamState) else AdamState(optimizer or AdamConfig())
    images = np.asarray(images, dtype=model.dtype)
    accelerations = tuple(np.atleast_1d(acceleration).tolist())
    center_fractions = tuple(np.broadcast_to(center_fraction, (len(accelerations),)).tolist())
    params = model.parameters()
    log = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    try:
        for it in range(iterations):
            t0 = time.perf_counter()
            x, d, A = _sample_batch(images, batch_size, seed, it, accelerations, center_fractions, noise_std)
            report = backprop(model, d, A, x, loss_cfg, mode=mode, iteration=it)
            grad_norm = float(np.sqrt(sum(np.sum(g * g) for g in report.grads.values())))
            if not np.isfinite(grad_norm):
                raise NumericalError(f"non-finite gradient norm at iteration {it}")
            adam_step(params, report.grads, state)
            row = {
                "iteration": it,
                "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
                "loss": report.loss,
                "grad_norm": grad_norm,
                "peak_retained_elements": report.memory["peak"],
            }
            log.append(row)
            if writer:
                writer.writerow(row)
            if callback:
                callback(row)
    finally:
        if fh:
            fh.close()
    return model, log


# -- evaluation -------------------------------------------------------------


def center_crop(img, fraction=0.5):
    H, W = img.shape[-2:]
    h, w = max(1, int(round(H * fraction))), max(1, int(round(W * fraction)))
    top, left = (H - h) // 2, (W - w) // 2
    return img[..., top : top + h, left : left + w]


def zero_filled(d, A):
    return A.adjoint(d)


def model_reconstructor(model):
    def reconstruct(d, A):
        return irim_rollout(model, d, A)[0]

    return reconstruct


def evaluate(reconstruct, images, masks, crop=0.5, method="model", acceleration=None, item_ids=None):
    """Metrics on central crops of magnitude images, one row per item.

    ``reconstruct(d, A)`` maps batched k-space data to real-pair estimates;
    ``masks`` is ``(n, H, W)``.
    """
    images = np.asarray(images)
    A = FourierOperator(np.asarray(masks))
    d = A.forward(images)
    est = np.asarray(reconstruct(d, A))
    rows = []
    ids = range(len(images)) if item_ids is None else item_ids
    for i, item in enumerate(ids):
        pred = center_crop(np.abs(to_complex(est[i])), crop)
        ref = center_crop(np.abs(to_complex(images[i])), crop)
        rows.append(
            {
                "item_id": int(item),
                "method": method,
                "acceleration": acceleration,
                "nmse": nmse(pred, ref),
                "psnr": psnr(pred, ref),
                "ssim": ssim(pred, ref),
            }
        )
    return rows


def summarize(rows):
    """``{metric: (mean, std)}`` over evaluation rows."""
    out = {}
    for key in ("nmse", "psnr", "ssim"):
        vals = np.array([r[key] for r in rows], dtype=float)
        with np.errstate(invalid="ignore"):  # all-inf PSNR columns (exact reconstructions)
            std = float(np.std(vals)) if np.all(np.isfinite(vals)) else float("nan")
        out[key] = (float(np.mean(vals)), std)
    return out


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
