import gzip

import numpy as np
import pytest

from data import (
    Dataset,
    Partition,
    load_idx,
    load_partition,
    make_partition,
    partition_iid,
    partition_noniid,
    partition_unbalanced,
    read_idx,
    save_partition,
    stratified_subset,
    synth_gaussian,
    synth_gaussian_split,
    write_idx,
)
from errors import ConfigError, DomainError, IdxParseError, InvalidValueError


# ============================================================
# IDX
# ============================================================

def test_load_idx_scales_pixels(idx_pair):
    images_path, labels_path, pixels, labels = idx_pair()
    ds = load_idx(images_path, labels_path)
    assert ds.images.shape == (2, 3, 3)
    np.testing.assert_allclose(ds.images, pixels / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.image_dims == (3, 3)


def test_gzip_idx_is_read_transparently(idx_pair):
    images_path, _, pixels, _ = idx_pair(".gz")
    assert images_path.read_bytes()[:2] == b"\x1f\x8b"
    np.testing.assert_array_equal(read_idx(images_path), pixels)


def test_truncated_idx_reports_offset(idx_pair, tmp_path):
    images_path, _, _, _ = idx_pair()
    raw = images_path.read_bytes()
    cut = tmp_path / "cut.idx"
    cut.write_bytes(raw[:-5])
    with pytest.raises(IdxParseError) as info:
        read_idx(cut)
    assert info.value.offset == len(raw) - 5


def test_truncated_header(tmp_path):
    path = tmp_path / "short.idx"
    path.write_bytes(bytes([0, 0, 8, 3, 0, 0]))
    with pytest.raises(IdxParseError) as info:
        read_idx(path)
    assert info.value.offset == 6


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(bytes([0, 0, 0x0D, 1, 0, 0, 0, 1, 5]))
    with pytest.raises(IdxParseError) as info:
        read_idx(path)
    assert info.value.offset == 0


def test_missing_idx_file(tmp_path):
    with pytest.raises(IdxParseError):
        read_idx(tmp_path / "nope.idx")


def test_label_count_mismatch(idx_pair, tmp_path):
    images_path, _, _, _ = idx_pair()
    labels = tmp_path / "three.idx"
    write_idx(labels, np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(IdxParseError):
        load_idx(images_path, labels)


def test_gzip_payload_is_plain_idx(idx_pair):
    images_path, _, _, _ = idx_pair(".gz")
    assert gzip.decompress(images_path.read_bytes())[:4] == bytes([0, 0, 8, 3])


# ============================================================
# Dataset / synthetic
# ============================================================

def test_dataset_rejects_bad_labels():
    with pytest.raises(InvalidValueError):
        Dataset(np.zeros((2, 2, 2)), np.array([0, 3]), 3)
    with pytest.raises(InvalidValueError):
        Dataset(np.zeros((2, 2, 2)), np.array([0]), 3)


def test_synth_gaussian_is_seeded_and_bounded():
    a = synth_gaussian(3, 20, 5, seed=1)
    b = synth_gaussian(3, 20, 5, seed=1)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (60, 1, 5)
    assert a.images.min() == pytest.approx(0.0)
    assert a.images.max() == pytest.approx(1.0)
    np.testing.assert_array_equal(a.class_counts(), [20, 20, 20])


def test_nearest_mean_separates_well_separated_blobs(blobs):
    train, test = blobs
    assert len(test) == 30
    points = test.images[:, 0, :]
    dist = np.linalg.norm(points[:, None, :] - test.class_means[None], axis=2)
    assert np.mean(np.argmin(dist, axis=1) == test.labels) > 0.9


def test_synth_domain_checks():
    with pytest.raises(DomainError):
        synth_gaussian_split(1, 10, 0, 4, seed=0)


def test_stratified_subset(ten_class_dataset):
    sub = stratified_subset(ten_class_dataset, 100, seed=0)
    np.testing.assert_array_equal(sub.class_counts(), [10] * 10)
    with pytest.raises(ConfigError):
        stratified_subset(ten_class_dataset, 1000, seed=0)


# ============================================================
# Partitions
# ============================================================

def test_iid_partition_is_disjoint_and_balanced(ten_class_dataset):
    p = partition_iid(ten_class_dataset, 7, seed=3)
    p.check_disjoint(len(ten_class_dataset))
    assert p.sizes == [80] * 7
    assert p.dropped == 40
    for shard in p.shards:
        counts = np.bincount(ten_class_dataset.labels[shard], minlength=10)
        np.testing.assert_array_equal(counts, [8] * 10)


def test_noniid_partition_gives_distinct_classes(ten_class_dataset):
    p = partition_noniid(ten_class_dataset, 10, 3, seed=1)
    p.check_disjoint(len(ten_class_dataset))
    assert p.sizes == [60] * 10
    for shard in p.shards:
        counts = np.bincount(ten_class_dataset.labels[shard], minlength=10)
        assert sorted(c for c in counts if c) == [20, 20, 20]


def test_noniid_requires_divisibility(ten_class_dataset):
    with pytest.raises(ConfigError) as info:
        partition_noniid(ten_class_dataset, 7, 3, seed=0)
    assert info.value.field == "partition.classes_per_client"


def test_unbalanced_partition_sizes():
    labels = np.repeat(np.arange(10), 600)
    ds = Dataset(np.zeros((6000, 1, 1)), labels, 10)
    p = partition_unbalanced(ds, M=100, seed=0)
    p.check_disjoint(6000)
    assert p.sizes[:20] == [120] * 20
    assert p.sizes[20:60] == [60] * 40
    assert p.sizes[60:] == [30] * 40
    assert p.virtual_M(0) == pytest.approx(50.0)
    assert p.virtual_M(99) == pytest.approx(200.0)
    # each 4-unit shard is class balanced
    np.testing.assert_array_equal(np.bincount(labels[p.shards[0]], minlength=10), [12] * 10)


def test_unbalanced_needs_multiple_of_five(ten_class_dataset):
    with pytest.raises(ConfigError):
        partition_unbalanced(ten_class_dataset, M=12)


def test_partition_is_deterministic(ten_class_dataset):
    a = make_partition(ten_class_dataset, "noniid", 10, seed=4, classes_per_client=2)
    b = make_partition(ten_class_dataset, "noniid", 10, seed=4, classes_per_client=2)
    for x, y in zip(a.shards, b.shards):
        np.testing.assert_array_equal(x, y)


def test_make_partition_rejects_unknown_scheme(ten_class_dataset):
    with pytest.raises(ConfigError):
        make_partition(ten_class_dataset, "dirichlet", 10, seed=0)
    with pytest.raises(ConfigError):
        make_partition(ten_class_dataset, "noniid", 10, seed=0)


def test_overlapping_shards_detected():
    p = Partition([np.array([0, 1]), np.array([1, 2])], "iid")
    with pytest.raises(InvalidValueError):
        p.check_disjoint(3)


def test_partition_manifest_round_trip(ten_class_dataset, tmp_path):
    p = partition_noniid(ten_class_dataset, 10, 3, seed=2)
    path = tmp_path / "partition.txt"
    save_partition(path, p)
    q = load_partition(path)
    assert q.scheme == "noniid"
    assert q.classes_per_client == 3
    assert q.seed == 2
    for x, y in zip(p.shards, q.shards):
        np.testing.assert_array_equal(x, y)
