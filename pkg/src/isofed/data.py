"""Dataset container, MDS1 binary format, non-IID partitioning and batching.

Shards carry a role (labeled / unlabeled); the batch iterator only exposes
labels for labeled shards, which is what keeps unlabeled trainers blind to
annotations that are physically present on disk.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

MDS1_MAGIC = b"MDS1"


class Role(Enum):
    LABELED = "labeled"
    UNLABELED = "unlabeled"


class DataError(Exception):
    pass


class DataIOError(DataError):
    """File unreadable or missing (as opposed to malformed content)."""


@dataclass
class Dataset:
    images: np.ndarray  # u8 [n, H, W, C]
    labels: np.ndarray  # u16 [n]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [n,H,W,C], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} samples"
            )
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise DataError(f"label {int(self.labels.max())} >= num_classes {self.num_classes}")

    def __len__(self):
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[3]


@dataclass(frozen=True)
class PartitionSpec:
    total_clients: int
    labeled_count: int
    dirichlet_gamma: float
    seed: int

    def __post_init__(self):
        if self.total_clients < 1 or not (0 <= self.labeled_count <= self.total_clients):
            raise DataError(
                f"invalid client split: {self.labeled_count} labeled of {self.total_clients}"
            )
        if self.dirichlet_gamma <= 0:
            raise DataError(f"dirichlet gamma must be > 0, got {self.dirichlet_gamma}")

    @property
    def unlabeled_count(self) -> int:
        return self.total_clients - self.labeled_count


@dataclass
class ClientShard:
    client_id: int
    role: Role
    indices: np.ndarray

    @property
    def n_k(self) -> int:
        return int(self.indices.size)


# -- MDS1 I/O -------------------------------------------------------------------
# magic "MDS1" | u32 LE: num_samples, H, W, C, num_classes
# | labels u16 LE * n | pixels u8 row-major [n,H,W,C]


def save_mds1(dataset: Dataset, path):
    n, h, w, c = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(MDS1_MAGIC)
        fh.write(struct.pack("<5I", n, h, w, c, dataset.num_classes))
        fh.write(dataset.labels.astype("<u2").tobytes())
        fh.write(np.ascontiguousarray(dataset.images, dtype=np.uint8).tobytes())


def load_mds1(path, split: str = "train") -> Dataset:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read dataset file {path}: {exc}") from exc
    if raw[:4] != MDS1_MAGIC:
        raise DataError(f"bad dataset magic in {path}: {raw[:4]!r}")
    if len(raw) < 24:
        raise DataError(f"truncated dataset header in {path}")
    n, h, w, c, num_classes = struct.unpack_from("<5I", raw, 4)
    expected = 24 + 2 * n + n * h * w * c
    if len(raw) != expected:
        raise DataError(f"dataset {path} has {len(raw)} bytes, expected {expected}")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=24).astype(np.uint16)
    images = np.frombuffer(raw, dtype=np.uint8, count=n * h * w * c, offset=24 + 2 * n)
    return Dataset(images.reshape(n, h, w, c).copy(), labels, num_classes, split)


# -- Dirichlet partition ---------------------------------------------------------


def split_by_proportions(indices: np.ndarray, proportions: np.ndarray) -> list[np.ndarray]:
    """Split ``indices`` into len(proportions) runs by cumulative proportion."""
    n = indices.size
    bounds = np.floor(np.cumsum(proportions) * n).astype(int)
    bounds[-1] = n
    return np.split(indices, bounds[:-1])


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec, max_redraws: int = 100) -> list[ClientShard]:
    """Class-conditional Dirichlet(gamma) label-skew partition.

    Per class, a K-proportion vector is drawn and the (shuffled) class
    samples are split by cumulative proportions. If any client ends up with
    zero samples overall, the whole set of class draws is redrawn from the
    same seeded stream, up to ``max_redraws`` times.
    """
    k = spec.total_clients
    labels = dataset.labels
    counts = np.bincount(labels, minlength=dataset.num_classes)
    if counts.min() < k:
        raise DataError(
            f"class {int(counts.argmin())} has {int(counts.min())} samples, fewer than {k} clients"
        )
    rng = np.random.default_rng(spec.seed)
    per_class = [np.flatnonzero(labels == c) for c in range(dataset.num_classes)]

    for _ in range(max_redraws):
        assigned = [[] for _ in range(k)]
        for cls_indices in per_class:
            proportions = rng.dirichlet(np.full(k, spec.dirichlet_gamma))
            shuffled = rng.permutation(cls_indices)
            for cid, chunk in enumerate(split_by_proportions(shuffled, proportions)):
                assigned[cid].append(chunk)
        totals = [sum(len(c) for c in chunks) for chunks in assigned]
        if min(totals) >= 1:
            shards = []
            for cid in range(k):
                role = Role.LABELED if cid < spec.labeled_count else Role.UNLABELED
                idx = np.sort(np.concatenate(assigned[cid]))
                shards.append(ClientShard(cid, role, idx))
            return shards
    raise DataError(f"could not produce non-empty shards in {max_redraws} redraws")


def partition_table(dataset: Dataset, shards: list[ClientShard]) -> np.ndarray:
    """Per-client, per-class sample counts [K, num_classes]."""
    table = np.zeros((len(shards), dataset.num_classes), dtype=int)
    for shard in shards:
        table[shard.client_id] = np.bincount(
            dataset.labels[shard.indices], minlength=dataset.num_classes
        )
    return table


# -- augmentation -----------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # per-channel, raw u8 scale
    std: np.ndarray


def normalization_stats(dataset: Dataset) -> NormStats:
    pixels = dataset.images.reshape(-1, dataset.channels).astype(np.float64)
    mean = pixels.mean(axis=0)
    std = pixels.std(axis=0)
    std[std == 0] = 1.0
    return NormStats(mean, std)


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True  # disable for anatomically chiral datasets
    max_shift: int = 2
    jitter: float = 0.2
    erase_size: int = 8


@dataclass(frozen=True)
class _Draws:
    flip: bool
    dx: int
    dy: int
    brightness: float = 1.0
    contrast: float = 1.0
    erase_row: int = 0
    erase_col: int = 0


def _draw_params(rng, mode: str, hw: int, cfg: AugmentConfig) -> _Draws:
    flip = cfg.hflip and rng.random() < 0.5
    dx = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
    dy = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
    if mode != "strong":
        return _Draws(flip, dx, dy)
    brightness = 1.0 + cfg.jitter * (2.0 * rng.random() - 1.0)
    contrast = 1.0 + cfg.jitter * (2.0 * rng.random() - 1.0)
    erase_row = int(rng.integers(0, hw - cfg.erase_size + 1))
    erase_col = int(rng.integers(0, hw - cfg.erase_size + 1))
    return _Draws(flip, dx, dy, brightness, contrast, erase_row, erase_col)


def _apply(img: np.ndarray, d: _Draws, mode: str, stats: NormStats, cfg: AugmentConfig) -> np.ndarray:
    """Augment one HWC u8 image; returns normalized CHW float64."""
    x = img.astype(np.float64)
    if d.flip:
        x = x[:, ::-1, :]
    if d.dx or d.dy:
        h, w, _ = x.shape
        shifted = np.zeros_like(x)
        src_r = slice(max(0, -d.dy), min(h, h - d.dy))
        dst_r = slice(max(0, d.dy), min(h, h + d.dy))
        src_c = slice(max(0, -d.dx), min(w, w - d.dx))
        dst_c = slice(max(0, d.dx), min(w, w + d.dx))
        shifted[dst_r, dst_c] = x[src_r, src_c]
        x = shifted
    if mode == "strong":
        if d.brightness != 1.0 or d.contrast != 1.0:
            x = x * d.brightness
            center = x.mean()
            x = (x - center) * d.contrast + center
            np.clip(x, 0.0, 255.0, out=x)
        e = cfg.erase_size
        if e > 0:
            x[d.erase_row : d.erase_row + e, d.erase_col : d.erase_col + e, :] = stats.mean
    x = (x - stats.mean) / stats.std
    return x.transpose(2, 0, 1)


def augment(img: np.ndarray, mode: str, rng, stats: NormStats, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """mode: "weak" (flip+shift), "strong" (adds jitter and erase), "none"."""
    if mode == "none":
        return ((img.astype(np.float64) - stats.mean) / stats.std).transpose(2, 0, 1)
    if mode not in ("weak", "strong"):
        raise DataError(f"unknown augmentation mode {mode!r}")
    return _apply(img, _draw_params(rng, mode, img.shape[0], cfg), mode, stats, cfg)


def _augment_batch(images: np.ndarray, mode: str, rng, stats: NormStats, cfg: AugmentConfig) -> np.ndarray:
    if mode == "none":
        x = images.astype(np.float64)
        return ((x - stats.mean) / stats.std).transpose(0, 3, 1, 2)
    out = np.empty(
        (images.shape[0], images.shape[3], images.shape[1], images.shape[2]), dtype=np.float64
    )
    for i in range(images.shape[0]):
        out[i] = _apply(images[i], _draw_params(rng, mode, images.shape[1], cfg), mode, stats, cfg)
    return out


# -- batching ---------------------------------------------------------------------


@dataclass
class Batch:
    indices: np.ndarray
    x: np.ndarray  # weak (or clean) view, [B,C,H,W]
    x_strong: np.ndarray | None = None
    y: np.ndarray | None = None  # only for labeled shards


def batches(
    shard: ClientShard,
    dataset: Dataset,
    batch_size: int,
    rng,
    stats: NormStats,
    paired: bool = False,
    mode: str = "weak",
    aug: AugmentConfig = AugmentConfig(),
):
    """One epoch of shuffled batches; the short tail batch is kept.

    ``paired`` yields a (weak, strong) view pair of the same samples.
    Labels are attached only when the shard role is labeled.
    """
    if shard.n_k == 0:
        raise DataError(f"client {shard.client_id} has an empty shard")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(shard.indices)
    for start in range(0, order.size, batch_size):
        idx = order[start : start + batch_size]
        imgs = dataset.images[idx]
        x = _augment_batch(imgs, mode, rng, stats, aug)
        x_strong = _augment_batch(imgs, "strong", rng, stats, aug) if paired else None
        y = dataset.labels[idx].astype(np.int64) if shard.role is Role.LABELED else None
        yield Batch(idx, x, x_strong, y)


def derive_seed(*parts) -> int:
    """Stable seed derivation; strings hashed with crc32 for reproducibility."""
    entropy = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
