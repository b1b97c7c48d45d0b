"""Datasets: IDX (MNIST) files, CIFAR binary batches and synthetic blobs."""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, TruncatedFileError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class DatasetHandle:
    """Examples are channel-last images (N, H, W, C) or flat features (N, F)."""

    images: np.ndarray
    labels: np.ndarray
    m: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} examples but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.m:
            raise DataError(f"labels must lie in 0..{self.m - 1}")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "DatasetHandle":
        return DatasetHandle(self.images[:n], self.labels[:n], self.m, self.split)


def _read_idx(path, expected_magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise TruncatedFileError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", m: int = 10) -> DatasetHandle:
    """Parse a big-endian IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float64) / 255.0)[..., None]
    return DatasetHandle(x, labels.astype(np.int64), m, split)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist_dir(data_dir: str = "") -> str | None:
    for cand in (data_dir, os.environ.get("NOPROP_MNIST_DIR", ""), "data/mnist", "/root/data/mnist"):
        if cand and os.path.exists(os.path.join(cand, MNIST_FILES["train"][0])):
            return cand
    return None


def load_mnist(data_dir: str = "") -> tuple[DatasetHandle, DatasetHandle]:
    root = find_mnist_dir(data_dir)
    if root is None:
        raise FileNotFoundError("MNIST IDX files not found; pass --data-dir or set NOPROP_MNIST_DIR")
    out = []
    for split, (img, lab) in MNIST_FILES.items():
        out.append(load_idx(os.path.join(root, img), os.path.join(root, lab), split))
    return out[0], out[1]


def load_cifar10_bin(paths, split: str = "train") -> DatasetHandle:
    """CIFAR-10 binary batches: per record one label byte then 3x32x32 planar pixels."""
    xs, ys = [], []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size % 3073:
            raise TruncatedFileError(f"{p}: size {raw.size} is not a multiple of 3073")
        rec = raw.reshape(-1, 3073)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    return DatasetHandle(np.concatenate(xs).astype(np.float64) / 255.0, np.concatenate(ys), 10, split)


def synth_blobs(n_per_class: int = 100, m: int = 2, d: int = 2, separation: float = 10.0,
                seed: int = 0, std: float = 1.0, split: str = "train") -> DatasetHandle:
    """Gaussian blobs whose centres sit on a circle, ``separation`` apart for m=2.

    The circle radius is chosen so neighbouring centres are ``separation`` apart.
    The split tag is part of the seed, so train and test draws differ.
    """
    rng = np.random.default_rng([seed, m, n_per_class, zlib.crc32(split.encode())])
    radius = separation / (2 * np.sin(np.pi / m)) if m > 1 else 0.0
    ang = 2 * np.pi * np.arange(m) / m
    centres = np.zeros((m, d))
    centres[:, 0] = radius * np.cos(ang)
    if d > 1:
        centres[:, 1] = radius * np.sin(ang)
    labels = np.repeat(np.arange(m), n_per_class)
    x = centres[labels] + std * rng.standard_normal((len(labels), d))
    order = rng.permutation(len(labels))
    return DatasetHandle(x[order], labels[order].astype(np.int64), m, split)
