import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedftg.datasets import (
    IdxFormatError,
    LabeledDataset,
    PartitionSpec,
    dirichlet_partition,
    label_entropy,
    largest_remainder,
    load_idx,
    make_synthetic,
    make_synthetic_split,
    perturb_label_stats,
    write_idx,
)


def test_zero_spread_points_sit_on_means():
    ds = make_synthetic(2, 1, 4, 0.0, seed=3)
    pts = {int(y): x for x, y in zip(ds.features, ds.labels)}
    np.testing.assert_allclose(pts[0], [1.0, 0.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(pts[1], [-1.0, 0.0, 0.0, 0.0], atol=1e-15)


def test_synthetic_is_deterministic():
    a = make_synthetic(5, 20, 8, 0.3, seed=11)
    b = make_synthetic(5, 20, 8, 0.3, seed=11)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_synthetic_range_and_balance():
    ds = make_synthetic(5, 40, 8, 0.8, seed=0)
    assert ds.features.min() >= -1 and ds.features.max() <= 1
    np.testing.assert_array_equal(ds.class_counts(), [40] * 5)


def test_linear_probe_separates_tight_clusters():
    # least-squares one-hot regression as an independent probe
    train, test = make_synthetic_split(5, 200, 200, 8, 0.15, seed=0)

    def design(ds):
        return np.c_[ds.features, np.ones(len(ds))]

    w = np.linalg.lstsq(design(train), np.eye(5)[train.labels], rcond=None)[0]
    acc = np.mean((design(test) @ w).argmax(1) == test.labels)
    assert acc >= 0.95


@pytest.mark.parametrize("bad", [dict(classes=1, per_class=5), dict(classes=3, per_class=0)])
def test_synthetic_preconditions(bad):
    with pytest.raises(ValueError):
        make_synthetic(dims=4, spread=0.1, seed=0, **bad)


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 3)), np.array([0, 3]), 3)


def test_csv_round_trip(tmp_path):
    ds = make_synthetic(3, 4, 5, 0.2, seed=1)
    ds.to_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "label,f0,f1,f2,f3,f4"
    back = LabeledDataset.from_csv(tmp_path / "d.csv", 3)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)


# --- IDX -------------------------------------------------------------------


def test_idx_pixel_mapping(tmp_path):
    images = np.array([[[0, 255], [128, 1]]], dtype=np.uint8)
    write_idx(images, np.array([3]), tmp_path / "i", tmp_path / "l")
    ds = load_idx(tmp_path / "i", tmp_path / "l", num_classes=10)
    assert ds.features[0, 0] == -1.0
    assert ds.features[0, 1] == 1.0
    assert ds.features.shape == (1, 4)
    assert ds.labels[0] == 3


def test_idx_truncated_records(tmp_path):
    n = 10000
    body = np.zeros((n - 1) * 4, dtype=np.uint8).tobytes()
    (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x803, n, 2, 2) + body)
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, n) + bytes(n))
    with pytest.raises(IdxFormatError) as err:
        load_idx(tmp_path / "i", tmp_path / "l")
    assert "9999" in str(err.value)
    assert err.value.offset == 16 + (n - 1) * 4


def test_idx_bad_magic(tmp_path):
    (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x801, 1, 1, 1) + b"\x00")
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 1) + b"\x00")
    with pytest.raises(IdxFormatError) as err:
        load_idx(tmp_path / "i", tmp_path / "l")
    assert err.value.offset == 0


# --- partitioning ------------------------------------------------------------


def test_largest_remainder_preserves_total():
    np.testing.assert_array_equal(largest_remainder(np.array([0.5, 0.25, 0.25]), 3), [1, 1, 1])
    np.testing.assert_array_equal(largest_remainder(np.array([0.7, 0.2, 0.1]), 4), [3, 1, 0])
    assert largest_remainder(np.array([1 / 3] * 3), 100).sum() == 100


def test_iid_split_is_even():
    ds = make_synthetic(10, 10, 2, 0.1, seed=0)
    shards = dirichlet_partition(ds, PartitionSpec(10, None, seed=4))
    assert [len(s) for s in shards] == [10] * 10


def _assert_valid_partition(ds, shards):
    seen = np.concatenate([s.indices for s in shards])
    assert seen.size == np.unique(seen).size == len(ds)
    np.testing.assert_array_equal(sum(s.counts for s in shards), ds.class_counts())
    for s in shards:
        np.testing.assert_array_equal(s.counts, ds.class_counts(s.indices))
        assert s.counts.sum() == len(s)


@settings(max_examples=40, deadline=None)
@given(
    k=st.integers(1, 12),
    beta=st.one_of(st.none(), st.floats(0.05, 50)),
    seed=st.integers(0, 2**32 - 1),
)
def test_partition_conservation_and_disjointness(k, beta, seed):
    ds = make_synthetic(4, 15, 2, 0.2, seed=seed % 97)
    shards = dirichlet_partition(ds, PartitionSpec(k, beta, seed))
    assert len(shards) == k
    assert all(len(s) > 0 for s in shards)
    _assert_valid_partition(ds, shards)


def test_partition_is_deterministic():
    ds = make_synthetic(5, 50, 3, 0.2, seed=0)
    a = dirichlet_partition(ds, PartitionSpec(7, 0.3, 42))
    b = dirichlet_partition(ds, PartitionSpec(7, 0.3, 42))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.indices, y.indices)


def test_partition_rejects_too_many_clients():
    ds = make_synthetic(2, 2, 2, 0.1, seed=0)
    with pytest.raises(ValueError):
        dirichlet_partition(ds, PartitionSpec(5, 0.5, 0))


def test_large_beta_is_near_uniform():
    # Beta(100, 900) marginal puts [50, 150] at ~5 standard deviations
    ds = make_synthetic(10, 1000, 2, 0.1, seed=0)
    inside = total = 0
    for seed in range(100):
        for s in dirichlet_partition(ds, PartitionSpec(10, 100.0, seed)):
            inside += int(np.sum((s.counts >= 50) & (s.counts <= 150)))
            total += s.counts.size
    assert inside / total >= 0.99


def test_entropy_increases_with_beta():
    ds = make_synthetic(5, 200, 2, 0.1, seed=0)
    means = []
    for beta in (0.1, 0.3, 0.6, 10.0):
        per_seed = [
            np.mean([label_entropy(s.counts) for s in dirichlet_partition(ds, PartitionSpec(10, beta, seed))])
            for seed in range(50)
        ]
        means.append(np.mean(per_seed))
    assert all(a <= b for a, b in zip(means, means[1:])), means


# --- label statistics noise ----------------------------------------------------


def test_perturb_zero_ratio_is_identity():
    counts = np.array([[3, 0, 7], [1, 2, 0]])
    np.testing.assert_array_equal(perturb_label_stats(counts, 0.0, seed=1), counts)


def test_perturb_keeps_zero_and_range():
    counts = np.array([[100, 0], [0, 100]])
    for seed in range(20):
        out = perturb_label_stats(counts, 0.1, seed)
        assert out[0, 1] == 0 and out[1, 0] == 0
        assert 90 <= out[0, 0] <= 110 and 90 <= out[1, 1] <= 110


def test_perturb_rejects_bad_ratio():
    with pytest.raises(ValueError):
        perturb_label_stats(np.array([1]), 1.5, 0)
