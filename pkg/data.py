"""
data.py: Dataset ingestion, synthetic data and client partitions

- IDX (MNIST) reader / writer, plain or gzip
- class-conditional Gaussian blobs for quick runs
- stratified subsets (desk-scale MNIST 6000 / 1000)
- IID, non-IID (N_c classes per client) and unbalanced 40/40/20 partitions
- partition manifests (text) for reruns

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from errors import ConfigError, DomainError, IdxParseError, InvalidValueError
from mlpu import virtual_M as _virtual_M

logger = logging.getLogger(__name__)

IDX_UBYTE = 0x08
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MANIFEST_HEADER = "# partition v1"


# ============================================================
# Types
# ============================================================

@dataclass
class Dataset:
    """images (count x H x W) in [0, 1], integer labels in [0, num_classes)."""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_means: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InvalidValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidValueError(f"labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.images)):
            raise InvalidValueError("images contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_dims(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.class_means)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class Partition:
    """Disjoint index shards, one per client."""
    shards: List[np.ndarray]
    scheme: str
    classes_per_client: Optional[int] = None
    dropped: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    @property
    def sizes(self) -> List[int]:
        return [len(s) for s in self.shards]

    @property
    def total_size(self) -> int:
        return int(sum(self.sizes))

    @property
    def equal_sizes(self) -> bool:
        return len(set(self.sizes)) == 1

    def virtual_M(self, client_id: int) -> float:
        """|D| / |D_i| over the partitioned data."""
        return _virtual_M(self.total_size, self.sizes[client_id])

    def check_disjoint(self, dataset_size: int) -> None:
        seen = np.zeros(dataset_size, dtype=bool)
        for i, shard in enumerate(self.shards):
            if np.any(seen[shard]):
                raise InvalidValueError(f"shard {i} overlaps an earlier shard")
            seen[shard] = True
        if dataset_size - self.total_size != self.dropped:
            raise InvalidValueError("coverage mismatch: shards + dropped != dataset size")


# ============================================================
# IDX files
# ============================================================

def _read_bytes(path: Path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IdxParseError(f"cannot read file: {exc.strerror}", 0, str(path)) from exc
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse a big-endian unsigned-byte IDX file into a uint8 array."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxParseError("file shorter than the magic number", len(raw), str(path))
    (magic,) = struct.unpack(">I", raw[:4])
    dtype_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if magic >> 16 != 0 or dtype_code != IDX_UBYTE or ndim == 0:
        raise IdxParseError(f"bad magic number 0x{magic:08x}", 0, str(path))
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxParseError(f"truncated header, need {header_len} bytes", len(raw), str(path))
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    available = len(raw) - header_len
    if available < expected:
        raise IdxParseError(f"truncated data, expected {expected} bytes after the header",
                            len(raw), str(path))
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_len).reshape(dims)


def write_idx(path, array: np.ndarray, compress: Optional[bool] = None) -> None:
    """Write a uint8 array as IDX; gzip when the name ends in .gz."""
    path = Path(path)
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise InvalidValueError(f"IDX writer takes uint8 arrays, got {arr.dtype}")
    header = struct.pack(">I", (IDX_UBYTE << 8) | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload = header + arr.tobytes()
    if compress if compress is not None else path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """MNIST-style image + label IDX pair; pixels scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxParseError(f"image file must be 3-D, got {images.ndim}-D", 3, str(images_path))
    if labels.ndim != 1:
        raise IdxParseError(f"label file must be 1-D, got {labels.ndim}-D", 3, str(labels_path))
    if len(labels) != len(images):
        raise IdxParseError(f"{len(labels)} labels for {len(images)} images", 4, str(labels_path))
    logger.info(f"loaded {len(images)} images {images.shape[1:]} from {images_path}")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), num_classes)


# ============================================================
# Synthetic data / subsets
# ============================================================

def _blob_means(classes: int, dims: int, margin: float, rng: np.random.Generator) -> np.ndarray:
    if classes <= dims:
        return margin * np.eye(classes, dims)
    directions = rng.normal(size=(classes, dims))
    return margin * directions / np.linalg.norm(directions, axis=1, keepdims=True)


def _draw_blobs(means: np.ndarray, per_class: int, rng: np.random.Generator):
    labels = np.repeat(np.arange(len(means)), per_class)
    points = means[labels] + rng.normal(size=(len(labels), means.shape[1]))
    order = rng.permutation(len(labels))
    return points[order], labels[order]


def synth_gaussian(classes: int, per_class: int, dims: int, seed: int,
                   margin: float = 4.0) -> Dataset:
    """Class-conditional unit-variance Gaussian blobs mapped affinely into [0, 1].

    Means are margin·e_c (random unit directions when classes > dims), so the
    nearest-mean rule is the Bayes classifier. Images have shape (1, dims).
    """
    train, _ = synth_gaussian_split(classes, per_class, 0, dims, seed, margin)
    return train


def synth_gaussian_split(classes: int, per_class: int, test_per_class: int, dims: int,
                         seed: int, margin: float = 4.0) -> Tuple[Dataset, Dataset]:
    """Train and held-out test draws from the same blobs, scaled by the training range."""
    if classes < 2 or per_class < 1 or dims < 1 or test_per_class < 0:
        raise DomainError("need classes >= 2, per_class >= 1, dims >= 1")
    rng = np.random.default_rng(seed)
    means = _blob_means(classes, dims, margin, rng)
    points, labels = _draw_blobs(means, per_class, rng)
    test_points, test_labels = _draw_blobs(means, test_per_class, rng)

    lo, hi = points.min(), points.max()
    scale = hi - lo
    scaled_means = (means - lo) / scale
    train = Dataset(((points - lo) / scale)[:, None, :], labels, classes, class_means=scaled_means)
    test = Dataset(((test_points - lo) / scale)[:, None, :], test_labels, classes,
                   class_means=scaled_means)
    return train, test


def stratified_subset(dataset: Dataset, size: int, seed: int) -> Dataset:
    """size // num_classes samples of each class, in ascending index order."""
    per_class = size // dataset.num_classes
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < per_class:
            raise ConfigError(f"class {c} has {len(idx)} samples, {per_class} requested",
                              field="dataset.subset")
        picked.append(rng.permutation(idx)[:per_class])
    return dataset.subset(np.sort(np.concatenate(picked)))


# ============================================================
# Partitions
# ============================================================

def _class_pools(dataset: Dataset, rng: np.random.Generator) -> List[np.ndarray]:
    return [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(dataset.num_classes)]


def _finish(dataset: Dataset, shards: List[np.ndarray], scheme: str, seed: int,
            classes_per_client: Optional[int] = None) -> Partition:
    shards = [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]
    dropped = len(dataset) - int(sum(len(s) for s in shards))
    if dropped:
        logger.warning(f"{scheme} partition drops {dropped} remainder samples")
    return Partition(shards, scheme, classes_per_client, dropped, seed)


def partition_iid(dataset: Dataset, M: int, seed: int = 0) -> Partition:
    """Each client receives ⌊count_c / M⌋ samples of every class c."""
    if M < 1:
        raise ConfigError("need at least one client", field="M")
    rng = np.random.default_rng(seed)
    shards: List[List[np.ndarray]] = [[] for _ in range(M)]
    for pool in _class_pools(dataset, rng):
        per = len(pool) // M
        for i in range(M):
            shards[i].append(pool[i * per:(i + 1) * per])
    return _finish(dataset, [np.concatenate(s) for s in shards], "iid", seed)


def partition_noniid(dataset: Dataset, M: int, N_c: int, seed: int) -> Partition:
    """Each class is split into M·N_c/C equal subdatasets; every client gets N_c of them.

    Subdatasets are laid out class-major and client i takes positions
    i, i + M, i + 2M, ...; since a class owns at most M consecutive positions,
    the N_c picks come from N_c distinct classes. Classes, samples and client
    ids are shuffled by the seed.
    """
    C = dataset.num_classes
    if not 1 <= N_c <= C:
        raise ConfigError(f"must be in [1, {C}]", field="partition.classes_per_client")
    if (M * N_c) % C:
        raise ConfigError(f"M·N_c = {M * N_c} must be divisible by the class count {C}",
                          field="partition.classes_per_client")
    rng = np.random.default_rng(seed)
    k = M * N_c // C
    pools = _class_pools(dataset, rng)
    size = min(len(p) for p in pools) // k
    if size == 0:
        raise ConfigError(f"too few samples for {k} subdatasets per class", field="M")
    subdatasets = []
    for c in rng.permutation(C):
        subdatasets.extend(pools[c][j * size:(j + 1) * size] for j in range(k))
    client_ids = rng.permutation(M)
    shards: List[np.ndarray] = [np.empty(0, dtype=np.int64)] * M
    for i in range(M):
        picks = [subdatasets[i + r * M] for r in range(N_c)]
        shards[client_ids[i]] = np.concatenate(picks)
    return _finish(dataset, shards, "noniid", seed, N_c)


def partition_unbalanced(dataset: Dataset, M: int = 100, seed: int = 0) -> Partition:
    """M/5 clients share 40%, 2M/5 share 40%, 2M/5 share 20% (shard sizes 4:2:1)."""
    if M < 5 or M % 5:
        raise ConfigError("unbalanced partition needs M divisible by 5", field="M")
    rng = np.random.default_rng(seed)
    unit = len(dataset) // (2 * M)
    if unit == 0:
        raise ConfigError(f"{len(dataset)} samples cannot feed {M} unbalanced shards", field="M")
    sizes = [4 * unit] * (M // 5) + [2 * unit] * (2 * M // 5) + [unit] * (2 * M // 5)

    # class-interleaved order keeps every contiguous chunk class-balanced
    pools = _class_pools(dataset, rng)
    rank = np.empty(len(dataset), dtype=np.int64)
    for pool in pools:
        rank[pool] = np.arange(len(pool))
    order = np.lexsort((dataset.labels, rank))

    shards = []
    start = 0
    for s in sizes:
        shards.append(order[start:start + s])
        start += s
    return _finish(dataset, shards, "unbalanced", seed)


def make_partition(dataset: Dataset, scheme: str, M: int, seed: int,
                   classes_per_client: Optional[int] = None) -> Partition:
    if scheme == "iid":
        return partition_iid(dataset, M, seed)
    if scheme == "noniid":
        if classes_per_client is None:
            raise ConfigError("required for non-IID", field="partition.classes_per_client")
        return partition_noniid(dataset, M, classes_per_client, seed)
    if scheme == "unbalanced":
        return partition_unbalanced(dataset, M, seed)
    raise ConfigError(f"unknown scheme '{scheme}'", field="partition.scheme")


# ============================================================
# Manifest
# ============================================================

def save_partition(path, partition: Partition) -> None:
    head = (f"{MANIFEST_HEADER} scheme={partition.scheme} clients={partition.num_clients} "
            f"classes_per_client={partition.classes_per_client or 0} "
            f"dropped={partition.dropped} seed={partition.seed}")
    lines = [head] + [f"{i}: " + " ".join(str(int(j)) for j in shard)
                      for i, shard in enumerate(partition.shards)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_partition(path) -> Partition:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(MANIFEST_HEADER):
        raise InvalidValueError(f"{path}: missing '{MANIFEST_HEADER}' header")
    fields = dict(item.split("=", 1) for item in lines[0][len(MANIFEST_HEADER):].split())
    shards = []
    for line in lines[1:]:
        if not line.strip():
            continue
        _, _, body = line.partition(":")
        shards.append(np.array([int(t) for t in body.split()], dtype=np.int64))
    cpc = int(fields.get("classes_per_client", 0)) or None
    return Partition(shards, fields["scheme"], cpc, int(fields.get("dropped", 0)),
                     int(fields.get("seed", 0)))
