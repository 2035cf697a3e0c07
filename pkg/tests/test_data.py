import numpy as np
import pytest

from isofed.data import (
    AugmentConfig,
    ClientShard,
    DataError,
    DataIOError,
    Dataset,
    PartitionSpec,
    Role,
    augment,
    batches,
    dirichlet_partition,
    load_mds1,
    normalization_stats,
    partition_table,
    save_mds1,
    split_by_proportions,
)
from isofed.synth import make_blob_dataset


def small_dataset(n=400, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, 28, 28, 1), dtype=np.uint8)
    labels = (np.arange(n) % classes).astype(np.uint16)
    return Dataset(images, labels, classes)


class ScriptedRng:
    """Replays fixed draws so augmentation branches can be pinned."""

    def __init__(self, randoms, integers):
        self._randoms = list(randoms)
        self._integers = list(integers)

    def random(self):
        return self._randoms.pop(0)

    def integers(self, low, high):
        value = self._integers.pop(0)
        assert low <= value < high
        return value


# -- MDS1 ------------------------------------------------------------------------


def test_mds1_round_trip(tmp_path):
    ds = small_dataset(50)
    path = tmp_path / "d.mds1"
    save_mds1(ds, path)
    back = load_mds1(path)
    assert back.num_classes == ds.num_classes
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_mds1_bad_magic(tmp_path):
    path = tmp_path / "bad.mds1"
    path.write_bytes(b"XXXX" + b"\x00" * 40)
    with pytest.raises(DataError, match="magic"):
        load_mds1(path)


def test_mds1_truncated(tmp_path):
    ds = small_dataset(10)
    path = tmp_path / "t.mds1"
    save_mds1(ds, path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataError, match="expected"):
        load_mds1(path)


def test_mds1_missing_file_is_io_error(tmp_path):
    with pytest.raises(DataIOError, match="nope.mds1"):
        load_mds1(tmp_path / "nope.mds1")


def test_dataset_label_range_checked():
    with pytest.raises(DataError, match="num_classes"):
        Dataset(np.zeros((2, 28, 28, 1), dtype=np.uint8), np.array([0, 7], dtype=np.uint16), 4)


# -- partitioning -----------------------------------------------------------------


def test_uniform_proportions_split_evenly():
    idx = np.arange(103)
    parts = split_by_proportions(idx, np.full(4, 0.25))
    sizes = [p.size for p in parts]
    assert sum(sizes) == 103
    assert all(abs(s - 103 // 4) <= 1 for s in sizes)


def test_partition_disjoint_and_covering():
    ds = small_dataset(500)
    for seed in (0, 1, 2):
        shards = dirichlet_partition(ds, PartitionSpec(4, 1, 0.5, seed))
        all_idx = np.concatenate([s.indices for s in shards])
        assert all_idx.size == len(ds)
        assert np.unique(all_idx).size == len(ds)
        assert all(s.n_k >= 1 for s in shards)
        assert [s.role for s in shards] == [Role.LABELED] + [Role.UNLABELED] * 3


def test_partition_deterministic_under_seed():
    ds = small_dataset(300)
    a = dirichlet_partition(ds, PartitionSpec(4, 2, 0.8, 7))
    b = dirichlet_partition(ds, PartitionSpec(4, 2, 0.8, 7))
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.indices, sb.indices)


def test_partition_rejects_too_few_samples():
    ds = small_dataset(8, classes=4)  # 2 samples per class < 4 clients
    with pytest.raises(DataError, match="fewer than"):
        dirichlet_partition(ds, PartitionSpec(4, 1, 0.5, 0))


def test_heterogeneity_monotone_in_gamma():
    # Monte-Carlo over 50 seeds: client-share variance shrinks as gamma grows.
    ds = small_dataset(800, classes=4)

    def mean_variance(gamma):
        total = 0.0
        for seed in range(50):
            shards = dirichlet_partition(ds, PartitionSpec(4, 1, gamma, seed))
            table = partition_table(ds, shards).astype(float)
            shares = table / table.sum(axis=0, keepdims=True)
            total += float(shares.var(axis=0).mean())
        return total / 50

    assert mean_variance(0.5) > mean_variance(0.8)


# -- augmentation -----------------------------------------------------------------


def test_augment_identity_draw_equals_normalized_input():
    ds = small_dataset(20)
    stats = normalization_stats(ds)
    img = ds.images[0]
    rng = ScriptedRng(randoms=[0.9], integers=[0, 0])  # no flip, zero shift
    out = augment(img, "weak", rng, stats)
    expected = ((img.astype(np.float64) - stats.mean) / stats.std).transpose(2, 0, 1)
    np.testing.assert_array_equal(out, expected)


def test_augment_deterministic_under_seed():
    ds = small_dataset(20)
    stats = normalization_stats(ds)
    a = augment(ds.images[3], "strong", np.random.default_rng(5), stats)
    b = augment(ds.images[3], "strong", np.random.default_rng(5), stats)
    np.testing.assert_array_equal(a, b)


def test_augment_hflip_flag_disables_flip():
    ds = small_dataset(20)
    stats = normalization_stats(ds)
    cfg = AugmentConfig(hflip=False)
    rng = ScriptedRng(randoms=[], integers=[0, 0])  # flip draw must not be consumed
    out = augment(ds.images[1], "weak", rng, stats, cfg)
    expected = ((ds.images[1].astype(np.float64) - stats.mean) / stats.std).transpose(2, 0, 1)
    np.testing.assert_array_equal(out, expected)


def test_augment_unknown_mode_rejected():
    ds = small_dataset(5)
    with pytest.raises(DataError, match="mode"):
        augment(ds.images[0], "extreme", np.random.default_rng(0), normalization_stats(ds))


def test_normalized_train_stats_near_standard():
    ds = make_blob_dataset(8, 4000, seed=3)
    stats = normalization_stats(ds)
    normalized = (ds.images.astype(np.float64) - stats.mean) / stats.std
    assert abs(normalized.mean()) <= 0.01
    assert abs(normalized.std() - 1.0) <= 0.02


def test_strong_erase_fills_with_dataset_mean():
    ds = small_dataset(20)
    stats = normalization_stats(ds)
    # no flip, no shift, exact-1.0 jitter draws, erase at (4, 6)
    rng = ScriptedRng(randoms=[0.9, 0.5, 0.5], integers=[0, 0, 4, 6])
    out = augment(ds.images[0], "strong", rng, stats)
    erased = out[:, 4:12, 6:14]
    np.testing.assert_allclose(erased, 0.0, atol=1e-12)  # dataset mean normalizes to 0


# -- batching ---------------------------------------------------------------------


def test_batches_sizes_keep_short_tail():
    ds = small_dataset(40)
    shard = ClientShard(0, Role.LABELED, np.arange(10))
    stats = normalization_stats(ds)
    sizes = [b.x.shape[0] for b in batches(shard, ds, 4, np.random.default_rng(0), stats)]
    assert sizes == [4, 4, 2]


def test_paired_views_share_indices_and_labels_gated():
    ds = small_dataset(40)
    stats = normalization_stats(ds)
    lab = ClientShard(0, Role.LABELED, np.arange(12))
    unl = ClientShard(1, Role.UNLABELED, np.arange(12, 24))
    for b in batches(lab, ds, 5, np.random.default_rng(1), stats, paired=True):
        assert b.x_strong is not None and b.x_strong.shape == b.x.shape
        assert b.y is not None
        np.testing.assert_array_equal(b.y, ds.labels[b.indices].astype(np.int64))
    for b in batches(unl, ds, 5, np.random.default_rng(1), stats, paired=True):
        assert b.y is None


def test_epoch_permutation_reproducible():
    ds = small_dataset(40)
    stats = normalization_stats(ds)
    shard = ClientShard(0, Role.LABELED, np.arange(20))
    a = [b.indices for b in batches(shard, ds, 8, np.random.default_rng(9), stats)]
    b = [b.indices for b in batches(shard, ds, 8, np.random.default_rng(9), stats)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_empty_shard_rejected():
    ds = small_dataset(10)
    shard = ClientShard(0, Role.LABELED, np.array([], dtype=int))
    with pytest.raises(DataError, match="empty"):
        next(batches(shard, ds, 4, np.random.default_rng(0), normalization_stats(ds)))


# -- synthetic blobs ----------------------------------------------------------------


def test_blob_dataset_shape_and_balance():
    ds = make_blob_dataset(8, 1001, seed=0)
    assert ds.images.shape == (1001, 28, 28, 1)
    counts = np.bincount(ds.labels, minlength=8)
    assert counts.max() - counts.min() <= 1
