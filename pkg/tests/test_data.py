import numpy as np
import pytest

from fedpricing.data import (
    IdxFormatError,
    filter_labels,
    gen_synthetic,
    load_dataset,
    load_idx,
    partition_label_limited,
    power_law_sizes,
    save_dataset,
    subsample,
    write_idx,
)


# ---------------------------------------------------------------- shard sizes


def test_power_law_sizes_exact_total_and_minimum():
    rng = np.random.default_rng(0)
    for total, n in [(100, 10), (57, 7), (10, 10), (5000, 40)]:
        sizes = power_law_sizes(n, total, 1.5, rng)
        assert sum(sizes) == total
        assert min(sizes) >= 1
        assert len(sizes) == n


def test_power_law_sizes_skewed_when_exponent_positive():
    rng = np.random.default_rng(1)
    sizes = sorted(power_law_sizes(10, 1000, 1.5, rng))
    assert sizes[-1] > 3 * sizes[0]


def test_power_law_sizes_rejects_overflow():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        power_law_sizes(10, 5, 1.5, rng)


# ---------------------------------------------------------------- synthetic generator


def test_gen_synthetic_shapes_and_determinism():
    ds1 = gen_synthetic(n_clients=4, dim=6, n_classes=3, total_samples=100, seed=5)
    ds2 = gen_synthetic(n_clients=4, dim=6, n_classes=3, total_samples=100, seed=5)
    assert ds1.n_clients == 4
    assert ds1.dim == 6
    assert sum(len(x) for x, _ in ds1.shards) == 100
    assert len(ds1.test_labels) > 0
    for (x1, y1), (x2, y2) in zip(ds1.shards, ds2.shards):
        assert np.array_equal(x1, x2)
        assert np.array_equal(y1, y2)
    ds3 = gen_synthetic(n_clients=4, dim=6, n_classes=3, total_samples=100, seed=6)
    assert not np.array_equal(ds1.shards[0][0], ds3.shards[0][0])


def test_gen_synthetic_labels_in_range():
    ds = gen_synthetic(n_clients=3, dim=5, n_classes=4, total_samples=90, seed=0)
    for _, y in ds.shards:
        assert y.min() >= 0 and y.max() < 4
        assert y.dtype == np.int64


def test_gen_synthetic_zero_spread_shares_generating_parameters():
    # In the i.i.d. limit the per-shard label marginals come from one shared
    # model, so shard means should be statistically indistinguishable; with a
    # large spread the shard feature means separate clearly.
    iid = gen_synthetic(n_clients=6, dim=8, n_classes=3, alpha=0.0, beta=0.0,
                        total_samples=1200, seed=3)
    het = gen_synthetic(n_clients=6, dim=8, n_classes=3, alpha=0.0, beta=25.0,
                        total_samples=1200, seed=3)

    def mean_spread(ds):
        means = np.array([x.mean(axis=0) for x, _ in ds.shards])
        return float(np.std(means, axis=0).mean())

    assert mean_spread(het) > 5 * mean_spread(iid)


# ---------------------------------------------------------------- IDX format


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    images = rng.random((12, 9))
    labels = rng.integers(0, 10, size=12)
    ip, lp = str(tmp_path / "im.idx"), str(tmp_path / "lb.idx")
    write_idx(ip, lp, images, labels, rows=3, cols=3)
    got_x, got_y = load_idx(ip, lp)
    assert got_x.shape == (12, 9)
    assert got_x.min() >= 0.0 and got_x.max() <= 1.0
    assert np.abs(got_x - images).max() <= 0.5 / 255.0 + 1e-12
    assert np.array_equal(got_y, labels)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"\x00\x00\x09\x99" + b"\x00" * 12)
    lp = tmp_path / "lb.idx"
    lp.write_bytes(b"\x00\x00\x08\x01" + b"\x00" * 4)
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(str(p), str(lp))


def test_idx_truncated(tmp_path):
    import struct
    p = tmp_path / "trunc.idx"
    p.write_bytes(struct.pack(">IIII", 0x803, 10, 2, 2) + b"\x00" * 5)
    lp = tmp_path / "lb.idx"
    lp.write_bytes(struct.pack(">II", 0x801, 10) + b"\x00" * 10)
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(str(p), str(lp))


def test_idx_count_mismatch(tmp_path):
    rng = np.random.default_rng(8)
    ip, lp = str(tmp_path / "im.idx"), str(tmp_path / "lb.idx")
    write_idx(ip, lp, rng.random((4, 4)), rng.integers(0, 2, size=4), 2, 2)
    ip2, lp2 = str(tmp_path / "im2.idx"), str(tmp_path / "lb2.idx")
    write_idx(ip2, lp2, rng.random((5, 4)), rng.integers(0, 2, size=5), 2, 2)
    with pytest.raises(IdxFormatError, match="mismatch"):
        load_idx(ip, lp2)


# ---------------------------------------------------------------- slicing helpers


def test_subsample_deterministic_and_exact():
    rng = np.random.default_rng(9)
    x = rng.random((50, 3))
    y = rng.integers(0, 5, size=50)
    x1, y1 = subsample(x, y, 20, seed=4)
    x2, y2 = subsample(x, y, 20, seed=4)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    assert len(y1) == 20
    with pytest.raises(ValueError):
        subsample(x, y, 51)


def test_filter_labels_remaps_contiguously():
    x = np.arange(10, dtype=float).reshape(5, 2)
    y = np.array([0, 3, 7, 3, 1])
    fx, fy = filter_labels(x, y, keep=[3, 7])
    assert np.array_equal(fy, [0, 1, 0])
    assert np.array_equal(fx, x[[1, 2, 3]])


# ---------------------------------------------------------------- partitioning


def test_partition_label_limited_invariants():
    rng = np.random.default_rng(10)
    x = rng.random((600, 4))
    y = rng.integers(0, 10, size=600).astype(np.int64)
    ds = partition_label_limited(x, y, n_clients=8,
                                 classes_per_client_min=4, classes_per_client_max=8,
                                 power_exponent=1.0, seed=11)
    assert ds.n_clients == 8
    assert sum(len(sx) for sx, _ in ds.shards) == 600
    all_idx = []
    for sx, sy in ds.shards:
        n_labels = len(set(int(l) for l in sy))
        assert 1 <= n_labels <= 8
        all_idx.extend(map(tuple, sx))
    # Disjoint union of the inputs.
    assert sorted(all_idx) == sorted(map(tuple, x))


def test_partition_label_limited_oversubscribed_class_errors():
    # 2 classes, class 1 has a single sample, but every client must hold
    # both classes: the pool cannot cover the demand.
    x = np.zeros((20, 2))
    y = np.array([0] * 19 + [1], dtype=np.int64)
    with pytest.raises(ValueError, match="class 1"):
        partition_label_limited(x, y, n_clients=5,
                                classes_per_client_min=2, classes_per_client_max=2,
                                power_exponent=0.0, seed=0)


def test_partition_invalid_class_range():
    x = np.zeros((10, 2))
    y = np.zeros(10, dtype=np.int64)
    with pytest.raises(ValueError, match="invalid"):
        partition_label_limited(x, y, 2, classes_per_client_min=0,
                                classes_per_client_max=1)


# ---------------------------------------------------------------- container


def test_dataset_container_round_trip(tmp_path):
    ds = gen_synthetic(n_clients=3, dim=5, n_classes=3, total_samples=80, seed=12)
    path = str(tmp_path / "dataset.bin")
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.n_clients == ds.n_clients
    assert back.n_classes == ds.n_classes
    assert back.dim == ds.dim
    for (x1, y1), (x2, y2) in zip(ds.shards, back.shards):
        assert np.array_equal(x1, x2)
        assert np.array_equal(y1, y2)
    assert np.array_equal(ds.test_features, back.test_features)
    assert np.array_equal(ds.test_labels, back.test_labels)


def test_dataset_container_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_dataset(str(p))
