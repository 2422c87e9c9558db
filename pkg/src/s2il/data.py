"""Labeled image sets, their binary file format and a procedural generator.

File layout (all little-endian)::

    magic  "S2IL"
    u16    version (1)
    u32    sample count
    u16    class count
    u16    channels, u16 height, u16 width
    then per sample: u16 label | u8 split (0 train, 1 test) | f32 pixels[C*H*W]

Pixels are stored channel-major (C, H, W) like the in-memory arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError

MAGIC = b"S2IL"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHHH")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    is_test: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.is_test = np.asarray(self.is_test, dtype=bool)
        n = len(self.images)
        if self.images.ndim != 4 or len(self.labels) != n or len(self.is_test) != n:
            raise ContractError("dataset arrays must be (N, C, H, W) images with N labels and N split flags")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self.labels))

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices(self, classes: Sequence[int], test: bool) -> np.ndarray:
        mask = np.isin(self.labels, np.asarray(list(classes), dtype=np.int64)) & (self.is_test == test)
        return np.flatnonzero(mask)


def write_dataset(ds: Dataset, path) -> None:
    c, h, w = ds.image_shape
    rec = np.dtype([("label", "<u2"), ("split", "u1"), ("pixels", "<f4", (c * h * w,))])
    body = np.zeros(len(ds), dtype=rec)
    body["label"] = ds.labels
    body["split"] = ds.is_test.astype(np.uint8)
    body["pixels"] = ds.images.reshape(len(ds), -1)
    header = _HEADER.pack(MAGIC, VERSION, len(ds), ds.num_classes, c, h, w)
    Path(path).write_bytes(header + body.tobytes())


def read_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ContractError(f"{path}: truncated dataset header")
    magic, version, n, _ncls, c, h, w = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ContractError(f"{path}: not a dataset file (bad magic)")
    if version != VERSION:
        raise ContractError(f"{path}: unsupported dataset version {version}")
    rec = np.dtype([("label", "<u2"), ("split", "u1"), ("pixels", "<f4", (c * h * w,))])
    if len(blob) != _HEADER.size + n * rec.itemsize:
        raise ContractError(f"{path}: size does not match {n} records of {c}x{h}x{w}")
    body = np.frombuffer(blob, dtype=rec, count=n, offset=_HEADER.size)
    return Dataset(body["pixels"].reshape(n, c, h, w).copy(), body["label"].astype(np.int64),
                   body["split"].astype(bool))


def _render(cls: int, n_classes: int, size: int, channels: int, rng: np.random.Generator,
            noise: float, blob_gain: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # oriented grating: orientation and frequency depend on the class
    theta = np.pi * cls / n_classes + rng.normal(0.0, 0.12)
    freq = (2.0 + cls % 3) / size
    phase = rng.uniform(0.0, 2.0 * np.pi)
    grating = np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    # blob placed on a ring at a class-dependent angle
    ang = 2.0 * np.pi * ((cls * 3) % n_classes) / n_classes
    cx = size / 2 + 0.25 * size * np.cos(ang) + rng.normal(0.0, 2.0)
    cy = size / 2 + 0.25 * size * np.sin(ang) + rng.normal(0.0, 2.0)
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * (size / 8) ** 2))
    base = 0.6 * grating + blob_gain * blob
    out = np.empty((channels, size, size))
    for ch in range(channels):
        gain = 1.0 if channels == 1 else 0.6 + 0.8 * ((cls + ch) % channels) / max(channels - 1, 1)
        out[ch] = gain * base + rng.normal(0.0, noise, size=(size, size))
    return out


def generate_synthetic(classes: int, per_class: int, image_size: int = 32, seed: int = 0,
                       channels: int = 1, path=None, test_fraction: float = 0.2,
                       noise: float = 1.5, blob_gain: float = 0.5) -> Dataset:
    """Procedural oriented-grating/blob images with Gaussian noise.

    Each class keeps its first ``1 - test_fraction`` share of samples for
    training and the rest for testing. Writes the dataset to ``path`` when
    given.
    """
    if classes < 2:
        raise ContractError("need at least two classes")
    if per_class < 2:
        raise ContractError("need at least two samples per class for a train/test split")
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(per_class * test_fraction)))
    n_train = per_class - n_test
    if n_train < 1:
        raise ContractError("test fraction leaves no training samples")
    images, labels, split = [], [], []
    for c in range(classes):
        for k in range(per_class):
            images.append(_render(c, classes, image_size, channels, rng, noise, blob_gain))
            labels.append(c)
            split.append(k >= n_train)
    ds = Dataset(np.stack(images).astype(np.float32), np.array(labels), np.array(split))
    if path is not None:
        write_dataset(ds, path)
    return ds
