"""Datasets: IDX parsing, synthetic Gaussian classes, Dirichlet label-skew shards."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParseError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConfigurationError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.name, self.num_classes)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX buffer into an integer array of its stated shape."""
    if len(raw) < 4:
        raise ParseError("file too short for an IDX magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ParseError("truncated IDX dimension table", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise ParseError(f"truncated IDX payload: need {count} bytes, have {len(raw) - head}", len(raw))
    if len(raw) - head > count:
        raise ParseError(f"{len(raw) - head - count} trailing bytes after IDX payload", head + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path, name: str | None = None, num_classes: int = 10) -> Dataset:
    """Read an image/label IDX pair; pixels become float64 in [0, 1].

    Paths ending in ``.gz`` are decompressed first.
    """
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64), name or os.path.basename(str(images_path)), num_classes)


def encode_idx(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def write_idx(path, array: np.ndarray) -> None:
    raw = encode_idx(array)
    if str(path).endswith(".gz"):
        raw = gzip.compress(raw)
    with open(path, "wb") as fh:
        fh.write(raw)


def load_idx_dir(directory, split: str = "train") -> Dataset:
    """Load ``{split}-images-idx3-ubyte[.gz]`` and the matching labels file."""
    prefix = "t10k" if split == "test" else split
    for suffix in ("", ".gz"):
        img = os.path.join(directory, f"{prefix}-images-idx3-ubyte{suffix}")
        lab = os.path.join(directory, f"{prefix}-labels-idx1-ubyte{suffix}")
        if os.path.exists(img) and os.path.exists(lab):
            return load_idx(img, lab, name=f"{os.path.basename(os.path.normpath(directory))}-{split}")
    raise FileNotFoundError(f"no IDX files for split {split!r} in {directory}")


def synth_gaussians(num_classes: int, n_per_class: int, dim: int, spread: float, seed: int,
                    scale: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs around the vertices of a scaled simplex.

    Class ``c`` is centred on ``scale * e_c`` (``dim >= num_classes``) so the
    centres do not depend on ``seed``; only the noise does.
    """
    if num_classes < 2:
        raise ConfigurationError("need at least two classes")
    if dim < num_classes:
        raise ConfigurationError("dim must be >= num_classes so the centres are affinely independent")
    rng = np.random.default_rng(seed)
    centres = class_centres(num_classes, dim, scale)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = centres[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(images[order], labels[order], f"gauss{num_classes}x{dim}", num_classes)


def class_centres(num_classes: int, dim: int, scale: float = 1.0) -> np.ndarray:
    centres = np.zeros((num_classes, dim))
    centres[np.arange(num_classes), np.arange(num_classes)] = scale
    return centres


@dataclass(frozen=True)
class Partition:
    client_indices: tuple[np.ndarray, ...]
    alpha: float
    seed: int
    label_distributions: np.ndarray | None = None

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> np.ndarray:
        return np.array([ix.size for ix in self.client_indices])


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    share = total * weights / weights.sum()
    counts = np.floor(share).astype(np.int64)
    left = total - int(counts.sum())
    order = np.lexsort((np.arange(share.size), -(share - counts)))
    counts[order[:left]] += 1
    return counts


def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float, seed: int) -> Partition:
    """Label-skewed shards from per-client class mixtures ``q_i ~ Dir(alpha 1)``.

    Each class pool is split across clients in proportion to ``q_i[c]``
    (largest-remainder rounding, so every sample is assigned).  A client
    left empty takes one sample from the currently largest client.
    """
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    if num_clients < 1:
        raise ConfigurationError("need at least one client")
    n = len(ds)
    if num_clients > n:
        raise ConfigurationError(f"{num_clients} clients but only {n} samples")
    rng = np.random.default_rng(seed)
    c = ds.num_classes
    q = rng.dirichlet(np.full(c, float(alpha)), size=num_clients)
    shards: list[list[int]] = [[] for _ in range(num_clients)]
    for cls in range(c):
        pool = np.flatnonzero(ds.labels == cls)
        rng.shuffle(pool)
        counts = _largest_remainder(pool.size, q[:, cls])
        start = 0
        for i, cnt in enumerate(counts):
            shards[i].extend(pool[start:start + cnt].tolist())
            start += cnt
    for i in range(num_clients):
        if not shards[i]:
            donor = max(range(num_clients), key=lambda j: (len(shards[j]), -j))
            shards[i].append(shards[donor].pop())
    return Partition(tuple(np.sort(np.array(s, dtype=np.int64)) for s in shards), float(alpha), seed, q)


def label_histogram(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
