"""Synthetic complex ellipse phantoms and the on-disk dataset format.

Dataset directory::

    manifest.json        schema version, phantom config, splits, checksums, val masks
    item_000000.bin      one (2, H, W) float64 tensor container per item
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .forward_model import SamplingMask, make_mask
from .numerics import load_tensor, save_tensor, seeded_rng, sha256_file

__all__ = [
    "PhantomConfig",
    "DatasetManifest",
    "Dataset",
    "DatasetError",
    "generate_phantom",
    "build_dataset",
    "load_dataset",
    "DEFAULT_CENTER_FRACTIONS",
]

FORMAT_VERSION = 1
DEFAULT_CENTER_FRACTIONS = {4: 0.08, 8: 0.04}


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    size: tuple = (32, 32)
    n_ellipses: tuple = (4, 9)
    intensity: tuple = (0.2, 1.0)
    phase_amplitude: float = 1.0
    seed: int = 0

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for key in ("size", "n_ellipses", "intensity"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _ellipse(X, Y, cx, cy, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (X - cx) * c + (Y - cy) * s
    v = -(X - cx) * s + (Y - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_phantom(cfg, index):
    """Complex ellipse phantom as a ``(2, H, W)`` real pair.

    The first ellipse is a large body outline; the rest sit inside it. Intensities
    add up, the magnitude is normalised to a peak of 1 and multiplied by a smooth
    random phase of at most ``phase_amplitude`` radians.
    """
    H, W = cfg.size
    rng = seeded_rng(cfg.seed, index)
    lo, hi = cfg.n_ellipses
    count = int(rng.integers(lo, hi + 1)) if hi > lo else int(lo)
    Y, X = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    mag = np.zeros((H, W))
    for k in range(count):
        if k == 0:
            a, b = rng.uniform(0.6, 0.9, size=2)
            cx, cy = rng.uniform(-0.05, 0.05, size=2)
        else:
            a, b = rng.uniform(0.08, 0.4, size=2)
            cx, cy = rng.uniform(-0.45, 0.45, size=2)
        theta = rng.uniform(0, np.pi)
        mag[_ellipse(X, Y, cx, cy, a, b, theta)] += rng.uniform(*cfg.intensity)
    peak = mag.max()
    if peak > 0:
        mag /= peak
    # smooth phase from a handful of low-frequency cosines
    phase = np.zeros((H, W))
    for _ in range(3):
        fx, fy = rng.uniform(0.2, 1.5, size=2)
        off = rng.uniform(0, 2 * np.pi)
        phase += np.cos(np.pi * (fx * X + fy * Y) + off)
    phase *= cfg.phase_amplitude / 3.0
    out = np.stack([mag * np.cos(phase), mag * np.sin(phase)])
    if cfg.phase_amplitude == 0:
        out[1] = 0.0
    return out


@dataclass
class DatasetManifest:
    n_items: int
    splits: dict
    phantom: PhantomConfig
    files: dict
    val_masks: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def config_hash(self):
        doc = {"phantom": self.phantom.to_dict(), "splits": self.splits,
               "val_masks": [(m["item"], m["acceleration"], m["center_fraction"], m["seed"]) for m in self.val_masks],
               "format_version": self.format_version}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "n_items": self.n_items,
            "splits": self.splits,
            "phantom": self.phantom.to_dict(),
            "files": self.files,
            "val_masks": self.val_masks,
            "config_sha256": self.config_hash(),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            n_items=doc["n_items"],
            splits={k: list(v) for k, v in doc["splits"].items()},
            phantom=PhantomConfig.from_dict(doc["phantom"]),
            files=dict(doc["files"]),
            val_masks=list(doc.get("val_masks", [])),
            format_version=doc["format_version"],
        )


def _item_name(i):
    return f"item_{i:06d}.bin"


def _planned_manifest(cfg, n_train, n_val, accelerations):
    n = n_train + n_val
    splits = {"train": list(range(n_train)), "val": list(range(n_train, n))}
    H, W = cfg.size
    masks = []
    for i in splits["val"]:
        for acc in accelerations:
            # at least one fully sampled column on small images
            cf = max(DEFAULT_CENTER_FRACTIONS.get(acc, 0.08), 1.0 / W)
            seed = int(seeded_rng(cfg.seed, i, acc).integers(2**31))
            m = make_mask(H, W, acc, cf, seed)
            masks.append({"item": i, **m.to_dict()})
    return DatasetManifest(n, splits, cfg, {}, masks)


def build_dataset(cfg, n_train, n_val, path, accelerations=(4, 8)):
    """Write phantoms and a manifest to ``path``; a matching existing dataset is left alone."""
    path = Path(path)
    plan = _planned_manifest(cfg, n_train, n_val, accelerations)
    manifest_path = path / "manifest.json"
    if manifest_path.exists():
        existing = DatasetManifest.from_dict(json.loads(manifest_path.read_text()))
        if existing.config_hash() != plan.config_hash():
            raise DatasetError(f"{path} holds a dataset built from a different configuration")
        _verify(path, existing)
        return existing
    if path.exists() and any(path.glob("item_*.bin")):
        raise DatasetError(f"{path} contains item files but no manifest")
    path.mkdir(parents=True, exist_ok=True)
    for i in range(plan.n_items):
        name = _item_name(i)
        save_tensor(path / name, generate_phantom(cfg, i))
        plan.files[name] = sha256_file(path / name)
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(plan.to_dict(), indent=2))
    tmp.replace(manifest_path)
    return plan


def _verify(path, manifest):
    for name, digest in manifest.files.items():
        f = path / name
        if not f.exists():
            raise DatasetError(f"missing dataset file {f}")
        if sha256_file(f) != digest:
            raise DatasetError(f"checksum failure for {f}")
    on_disk = {p.name for p in path.glob("item_*.bin")}
    if on_disk != set(manifest.files):
        raise DatasetError(f"{path}: files on disk do not match the manifest")


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray  # (n, 2, H, W)

    def split(self, name):
        return self.images[self.manifest.splits[name]]

    @property
    def train(self):
        return self.split("train")

    @property
    def val(self):
        return self.split("val")

    def val_masks(self, acceleration):
        """Validation masks ``(n_val, H, W)`` for one acceleration, in item order."""
        by_item = {
            m["item"]: SamplingMask.from_dict(m).bits
            for m in self.manifest.val_masks
            if float(m["acceleration"]) == float(acceleration)
        }
        if not by_item:
            raise DatasetError(f"no validation masks stored for acceleration {acceleration}")
        return np.stack([by_item[i] for i in self.manifest.splits["val"]])


def load_dataset(path):
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json in {path}")
    manifest = DatasetManifest.from_dict(json.loads(manifest_path.read_text()))
    if manifest.format_version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {manifest.format_version}")
    _verify(path, manifest)
    images = np.stack([load_tensor(path / _item_name(i)) for i in range(manifest.n_items)])
    return Dataset(manifest, images)
