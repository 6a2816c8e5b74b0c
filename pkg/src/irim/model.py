"""Invertible recurrent inference machine.

The machine state is one tensor ``(N, C, H, W)``: channels 0-1 hold the current
estimate (real and imaginary part), channels ``2..C-1`` the memory. One step::

    z' = eta
    s' = s + g(grad D(d, A z'))       # g pads the 2-channel gradient with zeros
    (eta, s) <- h_t(z', s')           # h_t: a stack of coupling layers

and its exact reverse::

    (z', s') = h_t^{-1}(eta, s);  s = s' - g(grad D(d, A z'));  eta = z'

The link function is the identity, so the estimate is read directly off ``eta``.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .forward_model import data_consistency_grad
from .layers import CouplingLayer
from .meter import NULL_METER
from .numerics import check_finite, read_tensor, seeded_rng, write_tensor

__all__ = [
    "GRAD_MODES",
    "MachineState",
    "StepNetwork",
    "IRIMModel",
    "fanned_schedule",
    "gradient_injection",
    "inject",
    "uninject",
    "irim_forward_step",
    "irim_reverse_step",
    "h_forward",
    "h_inverse",
    "irim_rollout",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_hash",
]

GRAD_MODES = ("exact", "stop_gradient")
DESK_PRESET = dict(n_channels=16, n_steps=4, n_layers=6, schedule=(1, 2, 4, 4, 2, 1), hidden_channels=16)
PAPER_PRESET = dict(
    n_channels=64, n_steps=8, n_layers=10, schedule=(1, 2, 4, 8, 16, 16, 8, 4, 2, 1), hidden_channels=64
)


def fanned_schedule(n_layers, max_factor=4):
    """Downsampling factors doubling up to ``max_factor`` then mirroring back down."""
    half = [min(2**i, max_factor) for i in range((n_layers + 1) // 2)]
    return tuple(half + half[: n_layers // 2][::-1])


@dataclass
class MachineState:
    x: np.ndarray
    t: int = 0

    @property
    def eta(self):
        return self.x[:, :2]

    @property
    def s(self):
        return self.x[:, 2:]

    @classmethod
    def zeros(cls, batch, n_channels, shape, dtype=np.float64):
        return cls(np.zeros((batch, n_channels, *shape), dtype=dtype), 0)


def gradient_injection(grad, n_channels):
    """Embed a 2-channel gradient into the ``C - 2`` memory channels, zero-padded."""
    grad = np.asarray(grad)
    if n_channels < 4:
        raise ValueError(f"the machine state needs at least 4 channels, got {n_channels}")
    if grad.ndim != 4 or grad.shape[1] != 2:
        raise ValueError(f"gradient must be (N, 2, H, W), got shape {grad.shape}")
    out = np.zeros((grad.shape[0], n_channels - 2, *grad.shape[2:]), dtype=grad.dtype)
    out[:, :2] = grad
    return out


def inject(x, d, A):
    """``(eta, s) -> (eta, s + g(grad D))`` on a full state tensor; returns a new array."""
    out = x.copy()
    out[:, 2:4] += data_consistency_grad(A, d, x[:, :2])
    return out


def uninject(xp, d, A):
    out = xp.copy()
    out[:, 2:4] -= data_consistency_grad(A, d, xp[:, :2])
    return out


class StepNetwork:
    """``h_t``: an ordered stack of coupling layers, inverted layer by layer."""

    def __init__(self, layers):
        self.layers = list(layers)

    def __len__(self):
        return len(self.layers)

    def forward(self, x, meter=NULL_METER):
        for layer in self.layers:
            x = layer.forward(x, meter)
        return x

    def inverse(self, y, meter=NULL_METER):
        for layer in reversed(self.layers):
            y = layer.inverse(y, meter)
        return y


def h_forward(step, x, meter=NULL_METER):
    return step.forward(x, meter)


def h_inverse(step, y, meter=NULL_METER):
    return step.inverse(y, meter)


class IRIMModel:
    """``n_steps`` step networks (no weight sharing) over a ``n_channels`` state."""

    def __init__(
        self,
        n_channels=16,
        n_steps=4,
        n_layers=6,
        schedule=None,
        hidden_channels=16,
        n_reflections=3,
        split=None,
        grad_mode="exact",
        gate_scale=0.1,
        seed=0,
        dtype="f64",
    ):
        if n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {n_steps}")
        if n_channels < 4:
            raise ValueError(f"n_channels must be >= 4, got {n_channels}")
        if grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}, got {grad_mode!r}")
        schedule = tuple(fanned_schedule(n_layers) if schedule is None else schedule)
        if len(schedule) != n_layers:
            raise ValueError(f"schedule has {len(schedule)} entries for {n_layers} layers")
        self.n_channels = n_channels
        self.n_steps = n_steps
        self.n_layers = n_layers
        self.schedule = schedule
        self.hidden_channels = hidden_channels
        self.n_reflections = n_reflections
        self.split = n_channels // 2 if split is None else split
        self.grad_mode = grad_mode
        self.gate_scale = gate_scale
        self.seed = seed
        self.precision = dtype
        np_dtype = _np_dtype(dtype)
        self.steps = [
            StepNetwork(
                CouplingLayer(
                    n_channels,
                    hidden_channels,
                    factor,
                    n_reflections,
                    self.split,
                    rng=seeded_rng(seed, t, l),
                    dtype=np_dtype,
                    gate_scale=gate_scale,
                )
                for l, factor in enumerate(schedule)
            )
            for t in range(n_steps)
        ]

    @property
    def dtype(self):
        return _np_dtype(self.precision)

    @property
    def max_factor(self):
        return max(self.schedule, default=1)

    def layers(self):
        for t, step in enumerate(self.steps):
            for l, layer in enumerate(step.layers):
                yield t, l, layer

    def parameters(self):
        """Flat ``{"step{t}.layer{l}.{name}": array}`` view of every parameter."""
        return {
            f"step{t}.layer{l}.{name}": p
            for t, l, layer in self.layers()
            for name, p in layer.parameters().items()
        }

    def set_parameters(self, params):
        for key, value in params.items():
            t, l, name = _split_key(key)
            self.steps[t].layers[l].set_parameter(name, value)

    def n_parameters(self):
        return sum(p.size for p in self.parameters().values())

    def astype(self, precision):
        self.precision = precision
        for _, _, layer in self.layers():
            layer.astype(_np_dtype(precision))
        return self

    def manifest(self):
        return {
            "C": self.n_channels,
            "T": self.n_steps,
            "L": self.n_layers,
            "downsample_schedule": list(self.schedule),
            "hidden_channels": self.hidden_channels,
            "split": self.split,
            "D_reflections": self.n_reflections,
            "precision": self.precision,
            "grad_mode": self.grad_mode,
            "gate_scale": self.gate_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_manifest(cls, m):
        return cls(
            n_channels=m["C"],
            n_steps=m["T"],
            n_layers=m["L"],
            schedule=m["downsample_schedule"],
            hidden_channels=m["hidden_channels"],
            n_reflections=m["D_reflections"],
            split=m["split"],
            grad_mode=m["grad_mode"],
            gate_scale=m.get("gate_scale", 0.1),
            seed=m["seed"],
            dtype=m["precision"],
        )

    def zero_state(self, batch, shape):
        return MachineState.zeros(batch, self.n_channels, shape, self.dtype)

    def check_shape(self, shape):
        H, W = shape
        f = self.max_factor
        if H % f or W % f:
            raise ValueError(f"image size {H}x{W} is not divisible by the largest downsampling factor {f}")


def _np_dtype(precision):
    try:
        return {"f64": np.float64, "f32": np.float32}[precision]
    except KeyError:
        raise ValueError(f"precision must be 'f32' or 'f64', got {precision!r}") from None


def _split_key(key):
    step, layer, name = key.split(".", 2)
    return int(step.removeprefix("step")), int(layer.removeprefix("layer")), name


def irim_forward_step(state, d, A, step, meter=NULL_METER):
    x = state.x
    if x.ndim != 4 or x.shape[1] < 4:
        raise ValueError(f"state must be (N, C>=4, H, W), got shape {x.shape}")
    if d.shape != (x.shape[0], 2, *x.shape[2:]):
        raise ValueError(f"data of shape {d.shape} does not match state {x.shape}")
    return MachineState(step.forward(inject(x, d, A), meter), state.t + 1)


def irim_reverse_step(state, d, A, step, meter=NULL_METER):
    x = state.x
    if d.shape != (x.shape[0], 2, *x.shape[2:]):
        raise ValueError(f"data of shape {d.shape} does not match state {x.shape}")
    return MachineState(uninject(step.inverse(x, meter), d, A), state.t - 1)


def irim_rollout(model, d, A, n_steps=None, keep_trajectory=False, meter=NULL_METER):
    """Run ``n_steps`` forward steps from the zero state.

    Returns ``(eta_T, trajectory)`` where ``trajectory`` is the list of every
    machine state (including the initial one) when ``keep_trajectory`` is set,
    else ``None``.
    """
    d = np.asarray(d, dtype=model.dtype)
    n_steps = model.n_steps if n_steps is None else n_steps
    if n_steps > model.n_steps:
        raise ValueError(f"model has {model.n_steps} steps, {n_steps} requested")
    model.check_shape(d.shape[2:])
    state = model.zero_state(d.shape[0], d.shape[2:])
    trajectory = [state] if keep_trajectory else None
    for t in range(n_steps):
        state = irim_forward_step(state, d, A, model.steps[t], meter)
        check_finite(state.x, f"machine state after step {t}")
        if keep_trajectory:
            trajectory.append(state)
    return state.eta.copy(), trajectory


# -- checkpoints ------------------------------------------------------------


def _params_blob(model):
    buf = io.BytesIO()
    for name, p in model.parameters().items():
        write_tensor(buf, p)
    return buf.getvalue()


def checkpoint_hash(model):
    return hashlib.sha256(_params_blob(model)).hexdigest()


def _canonical(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_checkpoint(model, path):
    """Write ``manifest.json`` + ``params.bin`` (a sequence of tensor containers)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = _params_blob(model)
    arch = model.manifest()
    doc = {
        "format": "irim-checkpoint/1",
        "model": arch,
        "model_manifest_sha256": hashlib.sha256(_canonical(arch).encode()).hexdigest(),
        "parameters": list(model.parameters()),
        "params_sha256": hashlib.sha256(blob).hexdigest(),
    }
    tmp = path / "params.bin.tmp"
    tmp.write_bytes(blob)
    tmp.replace(path / "params.bin")
    (path / "manifest.json").write_text(json.dumps(doc, indent=2))
    return doc["params_sha256"]


def load_checkpoint(path):
    path = Path(path)
    doc = json.loads((path / "manifest.json").read_text())
    blob = (path / "params.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != doc["params_sha256"]:
        raise ValueError(f"checksum mismatch for {path / 'params.bin'}")
    if hashlib.sha256(_canonical(doc["model"]).encode()).hexdigest() != doc["model_manifest_sha256"]:
        raise ValueError(f"model manifest hash mismatch in {path / 'manifest.json'}")
    model = IRIMModel.from_manifest(doc["model"])
    fh = io.BytesIO(blob)
    model.set_parameters({name: read_tensor(fh) for name in doc["parameters"]})
    return model
