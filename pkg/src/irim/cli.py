"""Command-line entry point: ``irim <command> [options]``.

Every command resolves its parameters from built-in defaults, then the JSON file
given with ``--config`` (top-level keys, then a section named after the
command), then explicit flags. The resolved configuration and the tool version
are written to ``<out-dir>/config.json``. Quantitative results go to CSV files
in the same directory; stdout only carries a short summary.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 tolerance failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetError, PhantomConfig, build_dataset, load_dataset
from .engine import (
    BackpropMode,
    backprop_invertible,
    backprop_stored,
    finite_difference_grad,
    loss_value,
    max_relative_difference,
    memory_report,
)
from .forward_model import FourierOperator, make_mask
from .layers import AffineCouplingLayer, CouplingLayer
from .losses import LossConfig
from .model import IRIMModel, fanned_schedule, load_checkpoint, save_checkpoint
from .numerics import NumericalError, seeded_rng
from .training import (
    METRIC_COLUMNS,
    AdamConfig,
    evaluate,
    model_reconstructor,
    summarize,
    train,
    write_csv,
    zero_filled,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_TOLERANCE = 4


class ConfigError(ValueError):
    pass


class ToleranceFailure(RuntimeError):
    pass


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


MODEL_PARAMS = {
    "channels": (int, 16, "machine state channels C"),
    "steps": (int, 4, "inference steps T"),
    "layers": (int, 6, "coupling layers per step L"),
    "schedule": (_ints, [1, 2, 4, 4, 2, 1], "per-layer downsampling factors"),
    "hidden": (int, 16, "hidden channels of each residual block"),
    "grad_mode": (str, "exact", "gradient flow through the injection: exact | stop_gradient"),
}

COMMANDS = {
    "synth": {
        "n_train": (int, 256, "training items"),
        "n_val": (int, 32, "validation items"),
        "size": (int, 32, "image height and width"),
        "ellipses": (_ints, [4, 9], "min,max ellipse count"),
        "phase_amplitude": (float, 1.0, "maximum phase in radians"),
        "accelerations": (_ints, [4, 8], "accelerations with stored validation masks"),
    },
    "train": {
        "data": (str, None, "dataset directory"),
        **MODEL_PARAMS,
        "iterations": (int, 2000, "optimiser steps"),
        "batch_size": (int, 4, "images per step"),
        "lr": (float, 1e-3, "Adam learning rate"),
        "keep_fraction": (float, 1.0, "pixel keep fraction of the masked loss"),
        "backprop": (str, "invertible", "stored | invertible"),
        "accelerations": (_ints, [4], "training accelerations, one drawn per item"),
        "center_fractions": (_floats, [0.08], "centre fractions matching --accelerations"),
        "noise_std": (float, 0.0, "k-space noise standard deviation"),
    },
    "eval": {
        "data": (str, None, "dataset directory"),
        "checkpoint": (str, None, "checkpoint directory (omit for baseline only)"),
        "accelerations": (_ints, [4, 8], "evaluation accelerations"),
        "crop": (float, 0.5, "central crop fraction per dimension"),
        "ground_truth_sentinel": (bool, False, "also score the ground truth as a method"),
    },
    "gradcheck": {
        **MODEL_PARAMS,
        "size": (int, 16, "image height and width"),
        "batch": (int, 2, "batch size"),
        "coords": (int, 20, "sampled parameter coordinates"),
        "h": (float, 1e-6, "finite-difference step"),
        "fd_tol": (float, 1e-5, "finite-difference tolerance"),
        "mode_tol": (float, 1e-7, "stored vs invertible tolerance"),
        "zero_g": (bool, False, "zero every residual block (G = 0)"),
        "corrupt_vjp": (_ints, [], "t,l of a layer whose parameter gradients get corrupted"),
    },
    "invcheck": {
        "depths": (_ints, [0, 10, 50, 100, 400], "stack depths"),
        "seeds": (int, 20, "independent stacks per (kind, precision)"),
        "channels": (int, 16, "channels"),
        "size": (int, 16, "image height and width"),
        "hidden": (int, 16, "hidden channels"),
        "clamp": (float, 5.0, "affine gate clamp"),
        "gate_scale": (float, 1.0, "initial weight-norm scale of each block's last conv"),
        "kinds": (str, "additive,affine", "coupling kinds"),
    },
    "bench-memory": {
        "steps_grid": (_ints, [1, 4, 8], "values of T"),
        "layers_grid": (_ints, [5, 20, 40, 400], "values of L"),
        "size": (int, 16, "image height and width"),
        "channels": (int, 16, "channels"),
        "hidden": (int, 16, "hidden channels"),
        "parity_row": (bool, True, "add the T=1, L=1 row"),
    },
}


# -- configuration ----------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="irim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"irim {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--precision", choices=("f32", "f64"), default=None)
    common.add_argument("--out-dir", default=None, help="output directory (default: current directory)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, params in COMMANDS.items():
        p = sub.add_parser(name, parents=[common])
        for key, (kind, _default, help_text) in params.items():
            flag = "--" + key.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=help_text)
            else:
                p.add_argument(flag, dest=key, default=None, help=help_text)
    return parser


def _coerce(kind, value, key):
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            raise ValueError(value)
        if kind in (_ints, _floats):
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            return kind(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def resolve_config(args):
    """Defaults < config file < flags. Returns a plain JSON-able dict."""
    params = COMMANDS[args.command]
    file_doc = {}
    if args.config:
        try:
            file_doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_doc, dict):
            raise ConfigError("config file must hold a JSON object")
    # top-level keys may be shared between commands; a command's own section may not carry strays
    glob = {"seed", "precision", "out_dir"}
    anywhere = set().union(*COMMANDS.values()) | glob
    top = {k: v for k, v in file_doc.items() if k not in COMMANDS}
    section = file_doc.get(args.command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {args.command!r} must be a JSON object")
    unknown = (set(top) - anywhere) | (set(section) - set(params) - glob)
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    layered = {k: v for k, v in top.items() if k in params or k in glob}
    layered.update(section)
    cfg = {}
    for key, (kind, default, _) in params.items():
        value = getattr(args, key)
        if value is None:
            value = layered.get(key, default)
        cfg[key] = None if value is None else _coerce(kind, value, key)
    for key, default in (("seed", 0), ("precision", None), ("out_dir", ".")):
        value = getattr(args, key)
        cfg[key] = value if value is not None else layered.get(key, default)
    cfg["seed"] = _coerce(int, cfg["seed"], "seed")
    if cfg["precision"] not in (None, "f32", "f64"):
        raise ConfigError(f"precision must be f32 or f64, got {cfg['precision']!r}")
    return cfg


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) in (None, ""):
            raise ConfigError(f"--{key.replace('_', '-')} is required")


def _echo_config(out_dir, command, cfg):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"tool": "irim", "version": __version__, "command": command, "config": cfg}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _model_from(cfg, precision):
    try:
        return IRIMModel(
            n_channels=cfg["channels"],
            n_steps=cfg["steps"],
            n_layers=cfg["layers"],
            schedule=cfg["schedule"] if len(cfg["schedule"]) == cfg["layers"] else fanned_schedule(cfg["layers"]),
            hidden_channels=cfg["hidden"],
            grad_mode=cfg["grad_mode"],
            seed=cfg["seed"],
            dtype=precision,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- commands ---------------------------------------------------------------


def cmd_synth(cfg, out_dir):
    lo, hi = (cfg["ellipses"] * 2)[:2]
    phantom = PhantomConfig(
        size=(cfg["size"], cfg["size"]),
        n_ellipses=(lo, hi),
        phase_amplitude=cfg["phase_amplitude"],
        seed=cfg["seed"],
    )
    try:
        manifest = build_dataset(phantom, cfg["n_train"], cfg["n_val"], out_dir, tuple(cfg["accelerations"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(
        f"dataset {out_dir}: {manifest.n_items} items "
        f"({len(manifest.splits['train'])} train / {len(manifest.splits['val'])} val), "
        f"config {manifest.config_hash()[:12]}"
    )


def cmd_train(cfg, out_dir):
    _require(cfg, "data")
    precision = cfg["precision"] or "f64"
    if len(cfg["center_fractions"]) not in (1, len(cfg["accelerations"])):
        raise ConfigError("--center-fractions must have one entry or one per acceleration")
    if cfg["backprop"] not in ("stored", "invertible"):
        raise ConfigError(f"--backprop must be stored or invertible, got {cfg['backprop']!r}")
    try:
        dataset = load_dataset(cfg["data"])
        loss_cfg = LossConfig(keep_fraction=cfg["keep_fraction"], seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    model = _model_from(cfg, precision)
    try:
        model.check_shape(dataset.images.shape[2:])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    t0 = time.perf_counter()
    train(
        model,
        dataset.train,
        loss_cfg,
        AdamConfig(lr=cfg["lr"]),
        mode=BackpropMode(cfg["backprop"]),
        iterations=cfg["iterations"],
        seed=cfg["seed"],
        batch_size=cfg["batch_size"],
        acceleration=cfg["accelerations"],
        center_fraction=cfg["center_fractions"],
        noise_std=cfg["noise_std"],
        log_path=out_dir / "train_log.csv",
    )
    digest = save_checkpoint(model, out_dir / "checkpoint")
    with open(out_dir / "train_log.csv") as fh:
        losses = [float(r["loss"]) for r in csv.DictReader(fh)]
    first = f"{losses[0]:.4g}" if losses else "-"
    last = f"{losses[-1]:.4g}" if losses else "-"
    print(f"trained {cfg['iterations']} iterations in {time.perf_counter() - t0:.1f}s; loss {first} -> {last}")
    print(f"checkpoint {out_dir / 'checkpoint'} sha256 {digest}")


def cmd_eval(cfg, out_dir):
    _require(cfg, "data")
    try:
        dataset = load_dataset(cfg["data"])
        model = load_checkpoint(cfg["checkpoint"]) if cfg["checkpoint"] else None
    except (ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    if model is not None and cfg["precision"]:
        model.astype(cfg["precision"])
    images = dataset.val
    ids = dataset.manifest.splits["val"]
    methods = [("zero_filled", zero_filled)]
    if model is not None:
        methods.append(("irim", model_reconstructor(model)))
    if cfg["ground_truth_sentinel"]:
        methods.append(("ground_truth", lambda d, A: images))
    rows = []
    for acc in cfg["accelerations"]:
        try:
            masks = dataset.val_masks(acc)
        except DatasetError as exc:
            raise ConfigError(str(exc)) from None
        for name, fn in methods:
            rows += evaluate(fn, images, masks, cfg["crop"], name, acc, ids)
    write_csv(out_dir / "metrics.csv", rows, METRIC_COLUMNS)
    for acc in cfg["accelerations"]:
        for name, _ in methods:
            s = summarize([r for r in rows if r["acceleration"] == acc and r["method"] == name])
            print(
                f"{acc}x {name:>12}: NMSE {s['nmse'][0]:.4f}±{s['nmse'][1]:.4f}  "
                f"PSNR {s['psnr'][0]:.2f}  SSIM {s['ssim'][0]:.4f}"
            )


def _layer_directional_checks(model, d, A, target, loss_cfg, grads, h):
    """Central difference along each layer's own analytic gradient direction.

    Along ``g / |g|`` the true slope equals ``|g|`` only when ``g`` is the true
    gradient, so any error in a layer's parameter gradients shows up here.
    """
    params = model.parameters()
    rows = []
    for t, l, layer in model.layers():
        names = [f"step{t}.layer{l}.{k}" for k in layer.parameters()]
        norm = np.sqrt(sum(np.sum(grads[n] ** 2) for n in names))
        if norm == 0:
            rows.append((t, l, 0.0))
            continue
        saved = {n: params[n].copy() for n in names}
        vals = []
        for sign in (1, -1):
            for n in names:
                params[n][...] = saved[n] + sign * h * grads[n] / norm
            vals.append(loss_value(model, d, A, target, loss_cfg))
        for n in names:
            params[n][...] = saved[n]
        fd = (vals[0] - vals[1]) / (2 * h)
        rows.append((t, l, abs(fd - norm) / norm))
    return rows


def cmd_gradcheck(cfg, out_dir):
    precision = cfg["precision"] or "f64"
    model = _model_from(cfg, precision)
    if cfg["zero_g"]:
        for _, _, layer in model.layers():
            layer.block.zero_()
    if cfg["corrupt_vjp"]:
        if len(cfg["corrupt_vjp"]) != 2:
            raise ConfigError("--corrupt-vjp takes t,l")
        t, l = cfg["corrupt_vjp"]
        try:
            model.steps[t].layers[l].debug_corrupt = True
        except IndexError:
            raise ConfigError(f"no layer {t},{l} in a {model.n_steps}x{model.n_layers} model") from None
    n = cfg["size"]
    try:
        model.check_shape((n, n))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rng = seeded_rng(cfg["seed"], 1)
    mask = make_mask(n, n, 4, max(0.08, 1.0 / n), int(rng.integers(2**31)))
    A = FourierOperator(mask)
    target = rng.standard_normal((cfg["batch"], 2, n, n)).astype(model.dtype)
    d = A.forward(target)
    loss_cfg = LossConfig(keep_fraction=1.0, seed=cfg["seed"])
    stored = backprop_stored(model, d, A, target, loss_cfg)
    inv = backprop_invertible(model, d, A, target, loss_cfg)
    names = list(model.parameters())
    sizes = [model.parameters()[k].size for k in names]
    flat_idx = rng.choice(sum(sizes), size=min(cfg["coords"], sum(sizes)), replace=False)
    offsets = np.cumsum([0] + sizes)
    coords = []
    for j in sorted(int(v) for v in flat_idx):
        k = int(np.searchsorted(offsets, j, side="right") - 1)
        coords.append((names[k], j - offsets[k]))
    fd = finite_difference_grad(model, d, A, target, loss_cfg, coords, h=cfg["h"])
    sampled_s = np.array([stored.grads[nm].reshape(-1)[i] for nm, i in coords])
    sampled_i = np.array([inv.grads[nm].reshape(-1)[i] for nm, i in coords])
    mode_err = max_relative_difference(inv.flat(), stored.flat())
    rows = [
        dict(check="invertible_vs_stored", layer="", error=mode_err, tolerance=cfg["mode_tol"]),
        dict(check="stored_vs_fd", layer="", error=max_relative_difference(sampled_s, fd), tolerance=cfg["fd_tol"]),
        dict(check="invertible_vs_fd", layer="", error=max_relative_difference(sampled_i, fd), tolerance=cfg["fd_tol"]),
    ]
    for t, l, err in _layer_directional_checks(model, d, A, target, loss_cfg, stored.grads, cfg["h"]):
        rows.append(dict(check="layer_directional_fd", layer=f"{t}.{l}", error=err, tolerance=cfg["fd_tol"]))
    for r in rows:
        r["passed"] = bool(r["error"] <= r["tolerance"])
    write_csv(out_dir / "gradcheck.csv", rows, ("check", "layer", "error", "tolerance", "passed"))
    for r in rows[:3]:
        print(f"{r['check']:>22}: {r['error']:.3e} (tol {r['tolerance']:g}) {'ok' if r['passed'] else 'FAIL'}")
    bad = [r for r in rows[3:] if not r["passed"]]
    worst = max(rows[3:], key=lambda r: r["error"]) if rows[3:] else None
    if worst is not None:
        print(f"{'per-layer worst':>22}: {worst['error']:.3e} at layer {worst['layer']}")
    for r in bad:
        print(f"gradient check failed at layer {r['layer']} (step.layer): rel. error {r['error']:.3e}")
    if any(not r["passed"] for r in rows):
        raise ToleranceFailure("gradient check exceeded tolerance")


def _stack(kind, seed, depth, channels, hidden, clamp, dtype, gate_scale):
    factors = fanned_schedule(6)
    layers = []
    for l in range(depth):
        rng = seeded_rng(seed, l)
        f = factors[l % len(factors)]
        if kind == "additive":
            layers.append(CouplingLayer(channels, hidden, f, rng=rng, dtype=dtype, gate_scale=gate_scale))
        else:
            layer = AffineCouplingLayer(channels, hidden, f, clamp=clamp, rng=rng, dtype=dtype, gate_scale=gate_scale)
            layers.append(layer)
    return layers


def round_trip_errors(
    kind, seed, depths, channels=16, size=16, hidden=16, clamp=5.0, precision="f64", gate_scale=1.0
):
    """``{depth: max |inverse(forward(x)) - x|}`` over nested prefixes of one stack."""
    dtype = np.float32 if precision == "f32" else np.float64
    depths = sorted(set(depths))
    layers = _stack(kind, seed, max(depths, default=0), channels, hidden, clamp, dtype, gate_scale)
    x0 = seeded_rng(seed, 10**6).standard_normal((1, channels, size, size)).astype(dtype)
    outputs = {0: x0}
    x = x0
    with np.errstate(all="ignore"):
        for l, layer in enumerate(layers, 1):
            x = layer.forward(x)
            if l in depths:
                outputs[l] = x
        errors = {}
        for depth in depths:
            y = outputs[depth]
            for layer in reversed(layers[:depth]):
                y = layer.inverse(y)
            err = float(np.max(np.abs(y.astype(np.float64) - x0)))
            errors[depth] = err if np.isfinite(err) else float("inf")
    return errors


def cmd_invcheck(cfg, out_dir):
    kinds = [k.strip() for k in cfg["kinds"].split(",") if k.strip()]
    if not set(kinds) <= {"additive", "affine"}:
        raise ConfigError(f"--kinds must list additive and/or affine, got {cfg['kinds']!r}")
    precisions = [cfg["precision"]] if cfg["precision"] else ["f64", "f32"]
    rows = []
    for precision in precisions:
        for kind in kinds:
            for s in range(cfg["seeds"]):
                errs = round_trip_errors(
                    kind, cfg["seed"] + s, cfg["depths"], cfg["channels"], cfg["size"],
                    cfg["hidden"], cfg["clamp"], precision, cfg["gate_scale"],
                )
                rows += [dict(kind=kind, precision=precision, seed=cfg["seed"] + s, depth=L, max_abs_error=e)
                         for L, e in errs.items()]
    write_csv(out_dir / "invcheck.csv", rows, ("kind", "precision", "seed", "depth", "max_abs_error"))
    for precision in precisions:
        for kind in kinds:
            for L in sorted(set(cfg["depths"])):
                errs = [r["max_abs_error"] for r in rows if (r["kind"], r["precision"], r["depth"]) == (kind, precision, L)]
                print(f"{precision} {kind:>8} L={L:<4} median {np.median(errs):.3e}  max {np.max(errs):.3e}")
    if len(kinds) == 2:
        L = max(cfg["depths"])
        for precision in precisions:
            pairs = {}
            for r in rows:
                if r["precision"] == precision and r["depth"] == L:
                    pairs.setdefault(r["seed"], {})[r["kind"]] = r["max_abs_error"]
            wins = sum(p["additive"] <= p["affine"] for p in pairs.values())
            print(f"{precision} L={L}: additive <= affine on {wins}/{len(pairs)} seeds")


def cmd_bench_memory(cfg, out_dir):
    grid = [(T, L) for T in cfg["steps_grid"] for L in cfg["layers_grid"]]
    if cfg["parity_row"] and (1, 1) not in grid:
        grid.insert(0, (1, 1))
    n = cfg["size"]
    try:
        rows = memory_report(
            grid, shape=(n, n), seed=cfg["seed"],
            model_kw=dict(n_channels=cfg["channels"], hidden_channels=cfg["hidden"],
                          dtype=cfg["precision"] or "f64"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_csv(out_dir / "memory.csv", rows, ("T", "L", "mode", "phase", "peak_elements", "layer_evals"))
    for r in rows:
        if r["phase"] == "training":
            print(f"T={r['T']:<2} L={r['L']:<4} {r['mode']:>10}: peak {r['peak_elements']:>10} elements")


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "invcheck": cmd_invcheck,
    "bench-memory": cmd_bench_memory,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
        out_dir = Path(cfg["out_dir"])
        _echo_config(out_dir, args.command, cfg)
        HANDLERS[args.command](cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ToleranceFailure as exc:
        print(f"tolerance failure: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
