"""Datasets, IDX ingestion and the uncertainty-inducing manipulations.

Images are kept as (N, side, side) float arrays in [0, 1]; :meth:`Dataset.inputs`
reshapes them to whatever instance shape a network expects.
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, RangeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    num_classes: int | None = None

    def __post_init__(self):
        if self.labels is not None:
            if len(self.labels) != len(self.features):
                raise FormatError(
                    f"{len(self.labels)} labels for {len(self.features)} instances", field="labels"
                )
            if self.num_classes is None:
                object.__setattr__(self, "num_classes", int(self.labels.max()) + 1 if len(self.labels) else 0)
            elif len(self.labels) and self.labels.max() >= self.num_classes:
                raise RangeError(f"label {self.labels.max()} >= num_classes {self.num_classes}")

    def __len__(self):
        return len(self.features)

    def inputs(self, shape):
        """Features reshaped to (N, *shape)."""
        return self.features.reshape((len(self),) + tuple(shape))

    def unlabeled(self):
        return replace(self, labels=None, num_classes=self.num_classes)

    def take(self, indices, name=None):
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.features[indices], labels, name or self.name, self.num_classes)


# ---------------------------------------------------------------- IDX


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, expected_magic, what):
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header", field="magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} for {what} file", field="magic")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header", field="dims")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = math.prod(dims)
    payload = raw[header:]
    if len(payload) < need:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header promises {need}", field="payload")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(dims)


def read_idx_images(path):
    """Raw uint8 image array (N, rows, cols)."""
    return _read_idx(path, IDX_IMAGES_MAGIC, "image")


def load_idx(images_path, labels_path=None, name="idx", num_classes=10):
    """Load an IDX image file (and optional label file) scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "label").astype(np.int64)
        if len(labels) != len(images):
            raise FormatError(
                f"count mismatch: {len(labels)} labels for {len(images)} images", field="count"
            )
    return Dataset(images.astype(np.float64) / 255.0, labels, name, num_classes if labels is not None else None)


def write_idx(path, array):
    """Write a uint8 array as IDX (magic 0x0801 for 1-D labels, 0x0803 for 3-D images)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise FormatError(f"IDX writer supports 1-D or 3-D arrays, got {array.ndim}-D", field="dims")
    blob = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    opener = gzip.GzipFile(path, "wb", mtime=0) if str(path).endswith(".gz") else open(path, "wb")
    with opener as f:
        f.write(blob)


# ---------------------------------------------------------------- manipulations


def subsample(d, n, seed):
    """``n`` instances drawn without replacement, reproducible for a given seed."""
    if not 1 <= n <= len(d):
        raise RangeError(f"cannot subsample {n} of {len(d)} instances")
    idx = np.random.default_rng(seed).choice(len(d), size=n, replace=False)
    return d.take(idx, name=f"{d.name}[n={n}]")


@dataclass(frozen=True)
class MaskSpec:
    m: int
    image_side: int = 28
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.m <= self.image_side:
            raise RangeError(f"mask side {self.m} outside [0, {self.image_side}]")

    @property
    def rate(self):
        return masking_rate(self.m, self.image_side)


def masking_rate(m, image_side=28):
    return m * m / (image_side * image_side)


def apply_mask(d, spec):
    """Zero one uniformly placed m x m square per image (fully inside the image)."""
    side = spec.image_side
    n = len(d)
    images = d.features.reshape(n, -1)
    if images.shape[1] != side * side:
        raise RangeError(f"images have {images.shape[1]} pixels, expected {side}x{side}")
    if spec.m == 0:
        return d
    rng = np.random.default_rng(spec.rng_seed)
    top = rng.integers(0, side - spec.m + 1, size=n)
    left = rng.integers(0, side - spec.m + 1, size=n)
    ax = np.arange(side)
    rows = (ax >= top[:, None]) & (ax < top[:, None] + spec.m)
    cols = (ax >= left[:, None]) & (ax < left[:, None] + spec.m)
    block = rows[:, :, None] & cols[:, None, :]
    masked = np.where(block, 0.0, d.features.reshape(n, side, side)).reshape(d.features.shape)
    return Dataset(masked, d.labels, f"{d.name}[m={spec.m}]", d.num_classes)


def add_noise(features, std, rng):
    """Gaussian-perturbed copy, used for the original dark-knowledge distillation set."""
    return features + rng.normal(0.0, std, size=features.shape)


def synth_gaussian_mixture(k_classes, n_per_class, spread, seed, radius=1.0):
    """2-D mixture with component means evenly spaced on a circle."""
    if k_classes < 2:
        raise RangeError("need at least two classes")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(k_classes) / k_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.repeat(np.arange(k_classes), n_per_class)
    features = centers[labels] + spread * rng.normal(size=(len(labels), 2))
    return Dataset(features, labels, f"gmm{k_classes}-s{spread}", k_classes)


def minibatch(d, size, rng):
    """(indices, features, labels) for ``size`` distinct instances."""
    if not 1 <= size <= len(d):
        raise RangeError(f"minibatch size {size} outside [1, {len(d)}]")
    idx = rng.choice(len(d), size=size, replace=False)
    labels = None if d.labels is None else d.labels[idx]
    return idx, d.features[idx], labels


def write_csv(d, path):
    """Synthetic-data export: header ``feature_0,...,label``."""
    flat = d.features.reshape(len(d), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"feature_{j}" for j in range(flat.shape[1])] + ["label"])
        for i, row in enumerate(flat):
            label = "" if d.labels is None else int(d.labels[i])
            w.writerow([repr(float(v)) for v in row] + [label])


def read_csv(path, name=None):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "label":
        raise FormatError(f"{path}: last column must be 'label'", field="header")
    feats = np.array([[float(v) for v in r[:-1]] for r in body])
    labels = None if any(r[-1] == "" for r in body) else np.array([int(r[-1]) for r in body])
    return Dataset(feats, labels, name or str(path))
