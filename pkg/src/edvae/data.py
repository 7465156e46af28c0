"""Image datasets (CIFAR-10 binary files and synthetic generators).

Datasets are index-addressable handles: ``len(ds)`` and ``ds.batch(ids)``.
Nothing is held in memory beyond the requested batch; CIFAR files are
memory-mapped and synthetic images are regenerated from ``(seed, index)``.
Pixels are float64 in [0, 1] with layout ``B x 3 x w x w``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import Rng
from .tensor import Tensor

__all__ = [
    "ImageBatch",
    "SynthSpec",
    "SynthDataset",
    "Cifar10Dataset",
    "CifarFormatError",
    "load_cifar10_binary",
    "generate_synth",
    "write_cifar10_binary",
    "iter_batches",
    "random_batch",
]

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class CifarFormatError(ValueError):
    pass


@dataclass
class ImageBatch:
    pixels: Tensor
    ids: np.ndarray

    def __len__(self) -> int:
        return self.pixels.shape[0]


class Dataset:
    extent: int

    def __len__(self) -> int:
        raise NotImplementedError

    def images(self, ids: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def batch(self, ids) -> ImageBatch:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise IndexError(f"sample index out of range for dataset of size {len(self)}")
        return ImageBatch(Tensor(self.images(ids)), ids)


# CIFAR-10 ----------------------------------------------------------------------------

class Cifar10Dataset(Dataset):
    """CIFAR-10 binary records: 1 label byte followed by 1024 R, 1024 G, 1024 B bytes."""

    extent = 32

    def __init__(self, files):
        self.files = [Path(f) for f in files]
        self._maps = []
        self._offsets = [0]
        for f in self.files:
            size = os.path.getsize(f)
            if size == 0 or size % CIFAR_RECORD:
                raise CifarFormatError(f"{f}: length {size} is not a positive multiple of {CIFAR_RECORD}")
            self._maps.append(np.memmap(f, dtype=np.uint8, mode="r").reshape(-1, CIFAR_RECORD))
            self._offsets.append(self._offsets[-1] + size // CIFAR_RECORD)

    def __len__(self) -> int:
        return self._offsets[-1]

    def images(self, ids: np.ndarray) -> np.ndarray:
        out = np.empty((ids.size, 3, 32, 32))
        which = np.searchsorted(self._offsets, ids, side="right") - 1
        for j, (f, i) in enumerate(zip(which, ids)):
            rec = self._maps[f][i - self._offsets[f]]
            out[j] = rec[1:].reshape(3, 32, 32) / 255.0
        return out


def load_cifar10_binary(path, split: str = "train") -> Cifar10Dataset:
    """Open a CIFAR-10 binary file, or the standard split files inside a directory."""
    path = Path(path)
    if path.is_dir():
        names = {"train": CIFAR_TRAIN_FILES, "test": CIFAR_TEST_FILES}.get(split)
        if names is None:
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        files = [path / n for n in names if (path / n).exists()]
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 {split} files found in {path}")
        return Cifar10Dataset(files)
    return Cifar10Dataset([path])


def write_cifar10_binary(path, images: np.ndarray, labels=None) -> None:
    """Write ``uint8`` images ``[n, 3, 32, 32]`` in the CIFAR-10 record layout."""
    images = np.asarray(images, dtype=np.uint8)
    n = images.shape[0]
    labels = np.zeros(n, dtype=np.uint8) if labels is None else np.asarray(labels, dtype=np.uint8)
    recs = np.concatenate([labels[:, None], images.reshape(n, -1)], axis=1)
    Path(path).write_bytes(recs.tobytes())


# synthetic ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Synthetic image family.

    Each of ``clusters`` prototypes is a fixed pattern (Gaussian colour blobs,
    stripes or a checkerboard); sample ``i`` is a prototype plus pixel noise.
    """

    kind: str = "blobs"
    extent: int = 32
    clusters: int = 4
    noise: float = 0.05
    seed: int = 0
    size: int = 1024
    blobs_per_image: int = 3

    def __post_init__(self):
        if self.kind not in ("blobs", "stripes", "checker"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.extent % 4:
            raise ValueError(f"extent must be divisible by 4, got {self.extent}")
        if self.clusters < 1:
            raise ValueError("cluster count must be at least 1")
        if self.size < 1:
            raise ValueError("dataset size must be positive")


def _blob_prototype(gen, w, count):
    bg = gen.uniform(0.3, 0.7, size=3)
    img = np.broadcast_to(bg[:, None, None], (3, w, w)).copy()
    yy, xx = np.mgrid[0:w, 0:w]
    for _ in range(count):
        cy, cx = gen.uniform(0, w, size=2)
        sigma = gen.uniform(w / 10, w / 5)
        color = gen.uniform(0.0, 1.0, size=3)
        m = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img = img * (1 - m) + color[:, None, None] * m
    return img


def _stripe_prototype(gen, w):
    theta = gen.uniform(0, np.pi)
    freq = gen.uniform(2, 6) * 2 * np.pi / w
    c0, c1 = gen.uniform(0.1, 0.9, size=(2, 3))
    yy, xx = np.mgrid[0:w, 0:w]
    s = 0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    return c0[:, None, None] * (1 - s) + c1[:, None, None] * s


def _checker_prototype(gen, w):
    cell = int(gen.choice([2, 4, 8]))
    c0, c1 = gen.uniform(0.1, 0.9, size=(2, 3))
    yy, xx = np.mgrid[0:w, 0:w]
    s = ((yy // cell + xx // cell) % 2).astype(np.float64)
    return c0[:, None, None] * (1 - s) + c1[:, None, None] * s


class SynthDataset(Dataset):
    """Samples ``offset .. offset + spec.size - 1`` of the family described by ``spec``.

    Datasets that share a spec but use disjoint offset ranges share
    prototypes and never share samples (used for held-out splits).
    """

    def __init__(self, spec: SynthSpec, offset: int = 0):
        if offset < 0:
            raise ValueError("offset must be non-negative")
        self.spec = spec
        self.offset = int(offset)
        self.extent = spec.extent
        self._rng = Rng(spec.seed)
        gen = self._rng.stream("prototypes")
        if spec.kind == "blobs":
            protos = [_blob_prototype(gen, spec.extent, spec.blobs_per_image) for _ in range(spec.clusters)]
        elif spec.kind == "stripes":
            protos = [_stripe_prototype(gen, spec.extent) for _ in range(spec.clusters)]
        else:
            protos = [_checker_prototype(gen, spec.extent) for _ in range(spec.clusters)]
        self.prototypes = np.stack(protos)

    def __len__(self) -> int:
        return self.spec.size

    def cluster_of(self, i: int) -> int:
        """Cluster of absolute sample ``i`` (offset already applied)."""
        return int(self._rng.stream("cluster", int(i)).integers(self.spec.clusters))

    def images(self, ids: np.ndarray) -> np.ndarray:
        out = np.empty((ids.size, 3, self.extent, self.extent))
        for j, i in enumerate(ids + self.offset):
            gen = self._rng.stream("sample", int(i))
            img = self.prototypes[self.cluster_of(i)]
            if self.spec.noise > 0:
                img = img + self.spec.noise * gen.standard_normal(img.shape)
            out[j] = np.clip(img, 0.0, 1.0)
        return out


def generate_synth(spec: SynthSpec, split: str = "train", eval_size: int | None = None) -> SynthDataset:
    """Training split, or a held-out ``test`` split drawn after it."""
    if split == "train":
        return SynthDataset(spec)
    if split == "test":
        test_spec = spec if eval_size is None else SynthSpec(**{**spec.__dict__, "size": eval_size})
        return SynthDataset(test_spec, offset=spec.size)
    raise ValueError(f"split must be 'train' or 'test', got {split!r}")


# iteration -------------------------------------------------------------------------------

def iter_batches(ds: Dataset, batch_size: int, limit: int | None = None) -> Iterator[ImageBatch]:
    """Sequential pass over the first ``limit`` samples (all by default)."""
    n = len(ds) if limit is None else min(limit, len(ds))
    for start in range(0, n, batch_size):
        yield ds.batch(np.arange(start, min(start + batch_size, n)))


def random_batch(ds: Dataset, gen: np.random.Generator, batch_size: int) -> ImageBatch:
    """Random minibatch drawn without replacement."""
    ids = gen.choice(len(ds), size=min(batch_size, len(ds)), replace=False)
    return ds.batch(ids)
