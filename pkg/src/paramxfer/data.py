"""Seeded synthetic classification tasks and the CIFAR binary format.

All randomness goes through ``numpy.random.Generator`` with the PCG64 bit
generator, so a (seed, config) pair fixes every sample and batch order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .autodiff import DTYPE


class FormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int
    coarse: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class SyntheticTask:
    """Mixture of isotropic Gaussians, ``components`` clusters per class.

    ``task_seed`` fixes the mixture (cluster centres); ``sample_seed`` fixes
    which points are drawn. With ``informative_dims = k`` the centres live in a
    random k-dimensional subspace and the other directions carry only noise. ``means`` overrides the centres with one explicit
    centre per class.
    """

    classes: int = 10
    dim: int = 32
    train_size: int = 1000
    test_size: int = 1000
    separation: float = 3.0
    components: int = 1
    noise: float = 1.0
    informative_dims: int | None = None
    task_seed: int = 0
    sample_seed: int = 0
    means: np.ndarray | None = None

    def centres(self) -> np.ndarray:
        if self.means is not None:
            return np.asarray(self.means, dtype=DTYPE).reshape(self.classes, 1, self.dim)
        rng = np.random.default_rng(self.task_seed)
        # per-coordinate scale so two random centres sit ~separation apart
        k = self.dim if self.informative_dims is None else self.informative_dims
        std = self.separation / np.sqrt(2.0 * k)
        centres = rng.normal(0.0, std, size=(self.classes, self.components, k))
        if k == self.dim:
            return centres
        basis, _ = np.linalg.qr(rng.standard_normal((self.dim, k)))
        return centres @ basis.T

    def _draw(self, n: int, rng: np.random.Generator) -> Dataset:
        centres = self.centres()
        # exactly balanced labels in a shuffled order
        y = np.arange(n) % self.classes
        rng.shuffle(y)
        comp = rng.integers(0, centres.shape[1], size=n)
        x = centres[y, comp] + self.noise * rng.standard_normal((n, self.dim))
        return Dataset(x.astype(DTYPE), y.astype(np.int64), self.classes)


def gen_synthetic(task: SyntheticTask) -> tuple[Dataset, Dataset]:
    """Train and test splits drawn from independent child streams."""
    train_ss, test_ss = np.random.SeedSequence([task.sample_seed, task.task_seed]).spawn(2)
    train = task._draw(task.train_size, np.random.default_rng(train_ss))
    test = task._draw(task.test_size, np.random.default_rng(test_ss))
    return train, test


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


class DataStream:
    """Endless minibatches; reshuffles with its own generator at each epoch."""

    def __init__(self, data: Dataset, batch_size: int, seed: int):
        self.data = data
        self.batch_size = min(batch_size, len(data))
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._order = self.rng.permutation(len(data))
        self._pos = 0

    def next(self) -> Batch:
        if self._pos + self.batch_size > len(self._order):
            self.epoch += 1
            self._order = self.rng.permutation(len(self.data))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return Batch(self.data.x[idx], self.data.y[idx])

    __next__ = next

    def __iter__(self):
        return self


# ---------------------------------------------------------------------------
# CIFAR binary: cifar10 records are <label u8><3072 pixels>, cifar100 records
# are <coarse u8><fine u8><3072 pixels>; pixels are R, G, B planes of 32x32.

PIXELS = 3 * 32 * 32
RECORD = {"cifar10": 1 + PIXELS, "cifar100": 2 + PIXELS}
N_CLASSES = {"cifar10": 10, "cifar100": 100}


def parse_cifar_binary(blob: bytes, variant: str = "cifar10", limit: int | None = None) -> Dataset:
    if variant not in RECORD:
        raise FormatError(f"unknown CIFAR variant {variant!r}")
    size = RECORD[variant]
    if len(blob) % size:
        whole = len(blob) // size * size
        raise FormatError(f"truncated record at byte offset {whole}: {len(blob)} bytes is not a multiple of {size}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, size)
    if limit is not None:
        raw = raw[:limit]
    header = size - PIXELS
    labels = raw[:, header - 1].astype(np.int64)
    for i in range(header):
        bad = np.nonzero(raw[:, i] >= (20 if (variant == "cifar100" and i == 0) else N_CLASSES[variant]))[0]
        if bad.size:
            j = int(bad[0])
            raise FormatError(f"label {raw[j, i]} out of range at byte offset {j * size + i}")
    x = raw[:, header:].astype(DTYPE).reshape(-1, 3, 32, 32) / 255.0
    coarse = raw[:, 0].astype(np.int64) if variant == "cifar100" else None
    return Dataset(x, labels, N_CLASSES[variant], coarse)


def load_cifar_binary(path: str | os.PathLike, variant: str = "cifar10", limit: int | None = None) -> Dataset:
    with open(path, "rb") as fh:
        return parse_cifar_binary(fh.read(), variant, limit)


def encode_cifar_records(ds: Dataset, variant: str = "cifar10") -> bytes:
    """Inverse of :func:`parse_cifar_binary` for pixel data on the 1/255 grid."""
    pixels = np.rint(ds.x.reshape(len(ds), PIXELS) * 255.0).astype(np.uint8)
    cols = [ds.y.astype(np.uint8)[:, None]]
    if variant == "cifar100":
        c = np.zeros(len(ds), np.uint8) if ds.coarse is None else ds.coarse.astype(np.uint8)
        cols.insert(0, c[:, None])
    return np.concatenate([*cols, pixels], axis=1).tobytes()
