"""Deterministic procedural image dataset and SMOTE class rebalancing.

Three grayscale shape classes (disc, square, cross) rendered with random
position, scale and rotation plus pixel noise, at a resolution small enough
that a full evolutionary experiment runs in minutes.  Class counts default to
an imbalanced 2:1:1 so the minority-oversampling path is exercised.  The
whole dataset, including its stratified train/validation/test1/test2 split,
is a pure function of the dataset seed.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .genome import TensorShape

SPLIT_NAMES = ("train", "validation", "test1", "test2")
TRAIN_FRACTION = 0.635

_DATASET_MAGIC = b"NLGPDS"
_DATASET_VERSION = 1


class ConfigError(ValueError):
    pass


class InsufficientSamples(ValueError):
    """A class is too small to provide the requested number of neighbours."""


@dataclass(frozen=True)
class DataConfig:
    n_images: int = 800
    n_classes: int = 3
    class_weights: tuple[int, ...] = (2, 1, 1)
    image_size: int = 16
    channels: int = 1
    noise: float = 0.1
    jitter: float = 0.15  # centre offset as a fraction of the image size
    min_scale: float = 0.24
    max_scale: float = 0.40
    smote_k: int = 5
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.n_classes > 3:
            raise ConfigError("only 3 shape classes are implemented")
        if len(self.class_weights) < self.n_classes:
            raise ConfigError("class_weights shorter than n_classes")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    @property
    def input_shape(self) -> TensorShape:
        return TensorShape(self.image_size, self.image_size, self.channels)


@dataclass
class Dataset:
    images: np.ndarray  # (n, size, size, channels) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    splits: dict[str, np.ndarray]
    cfg: DataConfig
    _balanced: tuple | None = field(default=None, repr=False)

    def split_arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.images[idx], self.labels[idx]

    def train_balanced(self) -> tuple[np.ndarray, np.ndarray]:
        """SMOTE-balanced training split (computed once, seeded by the dataset
        seed). Validation and test splits are never modified."""
        if self._balanced is None:
            x, y = self.split_arrays("train")
            flat = x.reshape(len(x), -1)
            rng = np.random.default_rng([self.cfg.seed, 271828])
            bx, by = smote(flat, y, self.cfg.smote_k, rng)
            shape = (len(bx), self.cfg.image_size, self.cfg.image_size, self.cfg.channels)
            self._balanced = (bx.reshape(shape), by)
        return self._balanced


def _class_counts(cfg: DataConfig) -> list[int]:
    w = np.asarray(cfg.class_weights[: cfg.n_classes], dtype=float)
    ideal = cfg.n_images * w / w.sum()
    counts = np.floor(ideal).astype(int)
    # largest remainder, ties to the lower class index
    order = sorted(range(cfg.n_classes), key=lambda c: (-(ideal[c] - counts[c]), c))
    for c in order[: cfg.n_images - counts.sum()]:
        counts[c] += 1
    return counts.tolist()


def _render(kind: int, cfg: DataConfig, rng: np.random.Generator) -> np.ndarray:
    size = cfg.image_size
    cx = size / 2 + rng.uniform(-cfg.jitter, cfg.jitter) * size
    cy = size / 2 + rng.uniform(-cfg.jitter, cfg.jitter) * size
    radius = rng.uniform(cfg.min_scale, cfg.max_scale) * size
    angle = rng.uniform(0, np.pi)
    fg = rng.uniform(0.6, 1.0)
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy
    if kind == 0:  # disc
        mask = dx * dx + dy * dy <= radius * radius
    elif kind == 1:  # square
        mask = np.maximum(np.abs(u), np.abs(v)) <= radius * 0.82
    else:  # cross
        bar = 0.34 * radius
        inside = np.maximum(np.abs(u), np.abs(v)) <= radius
        mask = inside & ((np.abs(u) <= bar) | (np.abs(v) <= bar))
    return fg * mask.astype(float)


def _stratified_splits(labels: np.ndarray, n_classes: int, rng: np.random.Generator):
    """~63.5% train, remainder split near-evenly over validation/test1/test2.
    Per-class remainders rotate over the three evaluation splits so the global
    sizes stay balanced."""
    parts: dict[str, list[np.ndarray]] = {name: [] for name in SPLIT_NAMES}
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = round(len(idx) * TRAIN_FRACTION)
        rest = len(idx) - n_train
        base, extra = divmod(rest, 3)
        sizes = [n_train, base, base, base]
        for j in range(extra):
            sizes[1 + (c + j) % 3] += 1
        lo = 0
        for name, k in zip(SPLIT_NAMES, sizes):
            parts[name].append(idx[lo : lo + k])
            lo += k
    return {name: np.sort(np.concatenate(chunks)) for name, chunks in parts.items()}


def generate(cfg: DataConfig = DataConfig()) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 314159])
    counts = _class_counts(cfg)
    labels = np.repeat(np.arange(cfg.n_classes), counts)
    images = np.empty((cfg.n_images, cfg.image_size, cfg.image_size, cfg.channels))
    for i, label in enumerate(labels):
        img = _render(int(label), cfg, rng)
        img = img + cfg.noise * rng.standard_normal(img.shape)
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
    splits = _stratified_splits(labels, cfg.n_classes, rng)
    return Dataset(images, labels.astype(np.int64), splits, cfg)


def smote(
    features: np.ndarray, labels: np.ndarray, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Up-sample every minority class to the majority count.

    Each synthetic sample is x + u * (x_nn - x) with u ~ U(0,1) and x_nn one
    of the k nearest same-class neighbours (Euclidean distance on the raw
    feature vectors).  Originals are preserved and come first.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    if np.all(counts == target):
        return features, labels
    synth_x: list[np.ndarray] = []
    synth_y: list[np.ndarray] = []
    for c, count in zip(classes, counts):
        if count == target:
            continue
        if count <= k:
            raise InsufficientSamples(
                f"class {c} has {count} samples, needs more than k={k}"
            )
        xc = features[labels == c]
        d2 = ((xc[:, None, :] - xc[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        knn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        for _ in range(target - count):
            i = int(rng.integers(count))
            j = int(knn[i, int(rng.integers(k))])
            u = rng.random()
            synth_x.append(xc[i] + u * (xc[j] - xc[i]))
            synth_y.append(c)
    out_x = np.concatenate([features, np.asarray(synth_x)])
    out_y = np.concatenate([labels, np.asarray(synth_y, dtype=labels.dtype)])
    return out_x, out_y


def save_dataset(ds: Dataset, path) -> None:
    """Flat binary container: header (config json incl. seed, counts), body
    (row-major pixels, labels, one membership mask per split)."""
    config = dataclasses.asdict(ds.cfg)
    config["class_weights"] = list(config["class_weights"])
    header = {
        "config": config,
        "n": len(ds.labels),
        "class_counts": np.bincount(ds.labels, minlength=ds.cfg.n_classes).tolist(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_DATASET_MAGIC)
        f.write(struct.pack("<II", _DATASET_VERSION, len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(ds.images, dtype=np.float64).tobytes())
        f.write(np.ascontiguousarray(ds.labels, dtype=np.int64).tobytes())
        for name in SPLIT_NAMES:
            mask = np.zeros(len(ds.labels), dtype=np.uint8)
            mask[ds.splits[name]] = 1
            f.write(mask.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        if f.read(len(_DATASET_MAGIC)) != _DATASET_MAGIC:
            raise ValueError("not a dataset container")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != _DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        header = json.loads(f.read(blob_len))
        cfg = DataConfig(**{**header["config"], "class_weights": tuple(header["config"]["class_weights"])})
        n, s, c = header["n"], cfg.image_size, cfg.channels
        images = np.frombuffer(f.read(8 * n * s * s * c), dtype=np.float64).reshape(n, s, s, c).copy()
        labels = np.frombuffer(f.read(8 * n), dtype=np.int64).copy()
        splits = {}
        for name in SPLIT_NAMES:
            mask = np.frombuffer(f.read(n), dtype=np.uint8)
            splits[name] = np.flatnonzero(mask)
    return Dataset(images, labels, splits, cfg)
