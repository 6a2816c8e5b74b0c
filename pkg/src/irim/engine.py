"""Reverse-mode gradients of the i-RIM training loss in two modes.

``stored``      keeps every layer input of the rollout and sweeps back with
                per-layer vector-Jacobian products; retained memory grows with
                the number of layers.
``invertible``  keeps only the final machine state and reconstructs each layer
                input from its output on the way back, so retained memory does
                not depend on depth.

Both modes differentiate the gradient injection exactly: since
``grad D(eta) = A^H A eta - A^H d`` the injection's Jacobian is ``A^H A`` (in
``stop_gradient`` mode that term is dropped).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .forward_model import dc_grad_vjp
from .losses import LossConfig, batch_nmse, pixel_mask
from .meter import MemoryMeter
from .model import IRIMModel, inject, irim_rollout, uninject
from .numerics import NumericalError, check_finite

__all__ = [
    "BackpropMode",
    "GradReport",
    "ReconstructionError",
    "loss_value",
    "backprop",
    "backprop_stored",
    "backprop_invertible",
    "finite_difference_grad",
    "memory_report",
    "max_relative_difference",
]


class BackpropMode(str, enum.Enum):
    STORED = "stored"
    INVERTIBLE = "invertible"


class ReconstructionError(NumericalError):
    """Backward reconstruction drifted from the forward trajectory."""


@dataclass
class GradReport:
    grads: dict
    loss: float
    memory: dict = field(default_factory=dict)

    def flat(self):
        return np.concatenate([g.ravel() for g in self.grads.values()])


def _prepare(model, d, target):
    d = np.asarray(d, dtype=model.dtype)
    target = np.asarray(target, dtype=model.dtype)
    if d.shape != target.shape or d.ndim != 4 or d.shape[1] != 2:
        raise ValueError(f"data {d.shape} and target {target.shape} must both be (N, 2, H, W)")
    model.check_shape(d.shape[2:])
    return d, target


def _step_loss(eta, target, mask, weight):
    value, grad = batch_nmse(eta, target, mask)
    return weight * value, weight * grad


def loss_value(model, d, A, target, loss_cfg=None, iteration=0):
    """Forward-only training loss (the quantity both backprop modes differentiate)."""
    loss_cfg = loss_cfg or LossConfig()
    d, target = _prepare(model, d, target)
    weights = loss_cfg.step_weights(model.n_steps)
    mask = pixel_mask(target, loss_cfg.keep_fraction, loss_cfg.seed, iteration)
    x = model.zero_state(d.shape[0], d.shape[2:]).x
    total = 0.0
    for t, step in enumerate(model.steps):
        x = step.forward(inject(x, d, A))
        if weights[t]:
            total += weights[t] * batch_nmse(x[:, :2], target, mask)[0]
    return total


def _add_loss_grad(cot, x, target, mask, weight):
    value, grad = _step_loss(x[:, :2], target, mask, weight)
    cot[:, :2] += grad
    return value


def _injection_backward(model, A, cot):
    if model.grad_mode == "exact":
        cot[:, :2] += dc_grad_vjp(A, cot[:, 2:4])


def _accumulate(grads, t, l, layer_grads):
    for name, g in layer_grads.items():
        grads[f"step{t}.layer{l}.{name}"] = g


def _finish(model, grads, loss):
    ordered = {k: grads[k] for k in model.parameters()}
    for k, g in ordered.items():
        check_finite(g, f"gradient of {k}")
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    return ordered


def backprop_stored(model, d, A, target, loss_cfg=None, iteration=0, meter=None):
    loss_cfg = loss_cfg or LossConfig()
    meter = meter or MemoryMeter()
    d, target = _prepare(model, d, target)
    weights = loss_cfg.step_weights(model.n_steps)
    mask = pixel_mask(target, loss_cfg.keep_fraction, loss_cfg.seed, iteration)
    x = model.zero_state(d.shape[0], d.shape[2:]).x
    inputs = []  # per step: list of layer inputs
    loss_grads = {}
    loss = 0.0
    with meter.phase("rollout"):
        for t, step in enumerate(model.steps):
            x = inject(x, d, A)
            kept = []
            for layer in step.layers:
                kept.append(x)
                meter.retain(x.size)
                x = layer.forward(x, meter)
            inputs.append(kept)
            check_finite(x, f"machine state after step {t}")
            if weights[t]:
                value, grad = _step_loss(x[:, :2], target, mask, weights[t])
                loss += value
                if t < model.n_steps - 1:
                    loss_grads[t] = grad
                    meter.retain(grad.size)
                else:
                    final_grad = grad
    grads = {}
    cot = np.zeros_like(x)
    if weights[-1]:
        cot[:, :2] += final_grad
    with meter.phase("backward"):
        for t in range(model.n_steps - 1, -1, -1):
            step = model.steps[t]
            for l in range(len(step) - 1, -1, -1):
                xin = inputs[t].pop()
                cot, layer_grads = step.layers[l].vjp(xin, cot, meter)
                meter.release(xin.size)
                _accumulate(grads, t, l, layer_grads)
            _injection_backward(model, A, cot)
            if t > 0 and (t - 1) in loss_grads:
                g = loss_grads.pop(t - 1)
                cot[:, :2] += g
                meter.release(g.size)
    return GradReport(_finish(model, grads, loss), loss, meter.snapshot())


def backprop_invertible(
    model, d, A, target, loss_cfg=None, iteration=0, meter=None, drift_bound=1e-4, check_every=1
):
    """Gradients with constant retained memory via layer-wise reconstruction.

    A scalar checksum of the machine state is recorded every ``check_every``
    steps during the rollout; if the reconstructed state disagrees by more than
    ``drift_bound`` (relative) a :class:`ReconstructionError` names the step.
    """
    loss_cfg = loss_cfg or LossConfig()
    meter = meter or MemoryMeter()
    d, target = _prepare(model, d, target)
    weights = loss_cfg.step_weights(model.n_steps)
    mask = pixel_mask(target, loss_cfg.keep_fraction, loss_cfg.seed, iteration)
    T = model.n_steps
    x = model.zero_state(d.shape[0], d.shape[2:]).x
    checksums = {}
    loss = 0.0
    with meter.phase("rollout"):
        for t, step in enumerate(model.steps):
            x = step.forward(inject(x, d, A), meter)
            check_finite(x, f"machine state after step {t}")
            if (t + 1) % check_every == 0 and t + 1 < T:
                checksums[t + 1] = float(np.sum(x * x))
            if weights[t]:
                loss += _step_loss(x[:, :2], target, mask, weights[t])[0]
    meter.retain(x.size)  # the final state is all the backward sweep gets
    grads = {}
    cot = np.zeros_like(x)
    if weights[-1]:
        _add_loss_grad(cot, x, target, mask, weights[-1])
    with meter.phase("backward"):
        for t in range(T - 1, -1, -1):
            step = model.steps[t]
            for l in range(len(step) - 1, -1, -1):
                if t == 0 and l == 0:
                    # the very first input is inject(0, d): recompute it exactly instead of
                    # differentiating at a reconstruction, and keep the inverse for the drift guard
                    x0 = inject(model.zero_state(d.shape[0], d.shape[2:]).x, d, A)
                    cot, layer_grads = step.layers[l].vjp(x0, cot, meter)
                    x = step.layers[l].inverse(x, meter)
                else:
                    x, cot, layer_grads = step.layers[l].reverse_vjp(x, cot, meter)
                _accumulate(grads, t, l, layer_grads)
            _injection_backward(model, A, cot)
            x = uninject(x, d, A)
            if t in checksums:
                ref = checksums[t]
                got = float(np.sum(x * x))
                if abs(got - ref) > drift_bound * max(ref, 1e-30):
                    raise ReconstructionError(
                        f"reconstructed state entering step {t} drifted: "
                        f"checksum {got:.6g} vs {ref:.6g} (bound {drift_bound:g})"
                    )
            if t > 0 and weights[t - 1]:
                _add_loss_grad(cot, x, target, mask, weights[t - 1])
    drift = float(np.max(np.abs(x)))
    if drift > drift_bound:
        raise ReconstructionError(
            f"reconstructed initial state deviates from zero by {drift:.3g} (bound {drift_bound:g})"
        )
    meter.release(x.size)
    return GradReport(_finish(model, grads, loss), loss, meter.snapshot())


def backprop(model, d, A, target, loss_cfg=None, mode=BackpropMode.INVERTIBLE, iteration=0, meter=None):
    mode = BackpropMode(mode)
    fn = backprop_stored if mode is BackpropMode.STORED else backprop_invertible
    return fn(model, d, A, target, loss_cfg, iteration=iteration, meter=meter)


def finite_difference_grad(model, d, A, target, loss_cfg, coordinates, h=1e-6, iteration=0):
    """Central differences of :func:`loss_value` at ``(param_name, flat_index)`` pairs."""
    params = model.parameters()
    out = np.empty(len(coordinates))
    for i, (name, idx) in enumerate(coordinates):
        flat = params[name].reshape(-1)
        old = flat[idx]
        flat[idx] = old + h
        fp = loss_value(model, d, A, target, loss_cfg, iteration)
        flat[idx] = old - h
        fm = loss_value(model, d, A, target, loss_cfg, iteration)
        flat[idx] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def max_relative_difference(a, b, eps=1e-12):
    """``||a - b||_inf / (||b||_inf + eps)``."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / (np.max(np.abs(b)) + eps))


def memory_report(grid, modes=("stored", "invertible"), shape=(16, 16), batch=1, seed=0, model_kw=None):
    """Peak retained activation elements for each ``(T, L, mode)``.

    One ``testing`` row (rollout only) and one ``training`` row per cell, with
    columns ``T, L, mode, phase, peak_elements, layer_evals``.
    """
    from .forward_model import FourierOperator, make_mask

    model_kw = dict(model_kw or {})
    rows = []
    H, W = shape
    rng = np.random.default_rng(seed)
    A = FourierOperator(make_mask(H, W, 4, 0.08 if W >= 13 else 1 / W, seed))
    target = rng.standard_normal((batch, 2, H, W))
    d = A.forward(target)
    loss_cfg = LossConfig(keep_fraction=1.0)
    for T, L in grid:
        model = IRIMModel(n_steps=T, n_layers=L, seed=seed, **model_kw)
        for mode in modes:
            test_meter = MemoryMeter()
            with test_meter.phase("rollout"):
                irim_rollout(model, d, A, meter=test_meter)
            rows.append(dict(T=T, L=L, mode=mode, phase="testing",
                             peak_elements=test_meter.peak, layer_evals=test_meter.layer_evals))
            train_meter = MemoryMeter()
            backprop(model, d, A, target, loss_cfg, mode=mode, meter=train_meter)
            rows.append(dict(T=T, L=L, mode=mode, phase="training",
                             peak_elements=train_meter.peak, layer_evals=train_meter.layer_evals))
    return rows
