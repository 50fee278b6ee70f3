"""Federated dataset generation, IDX ingestion, and non-i.i.d. partitioning.

Shard sizes follow a power law over a random client permutation (rounded with
largest remainders so totals are exact); everything is deterministic for a
fixed seed.
"""

from __future__ import annotations

import struct

import numpy as np

from .core import FederatedDataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncated payload, or count mismatch)."""


def power_law_sizes(
    n_clients: int, total: int, exponent: float, rng: np.random.Generator
) -> list:
    """Shard sizes proportional to rank^(-exponent) over a random permutation.

    Largest-remainder rounding keeps the sum exact; every shard gets at
    least one sample.
    """
    if total < n_clients:
        raise ValueError(f"cannot split {total} samples across {n_clients} clients")
    raw = (np.arange(1, n_clients + 1, dtype=float)) ** (-exponent)
    raw = raw / raw.sum() * (total - n_clients)
    sizes = np.floor(raw).astype(int)
    remainder = total - n_clients - sizes.sum()
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    sizes[order[:remainder]] += 1
    sizes += 1
    perm = rng.permutation(n_clients)
    return [int(sizes[perm[i]]) for i in range(n_clients)]


def gen_synthetic(
    n_clients: int,
    dim: int = 60,
    n_classes: int = 10,
    alpha: float = 1.0,
    beta: float = 1.0,
    total_samples: int = 2000,
    power_exponent: float = 1.5,
    seed: int = 0,
) -> FederatedDataset:
    """Non-i.i.d. synthetic classification data with unbalanced shard sizes.

    Per client: a generating weight matrix with entries Normal(u_n, 1),
    u_n ~ Normal(0, alpha); a feature mean vector Normal(v_n, 1) per
    coordinate, v_n ~ Normal(0, beta); diagonal feature covariance
    Sigma_jj = j^(-1.2). Labels are sampled from the softmax of the client's
    linear model. An extra 10% of each shard's size is generated into the
    shared test pool; the declared total covers training shards only.

    The inter-client spread parameters (alpha, beta) interpolate between an
    i.i.d. population (0, 0) and strongly heterogeneous clients. This recipe
    is one documented, reproducible instantiation of the "Synthetic" family;
    variants differ in inessential details.
    """
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    if total_samples < n_clients:
        raise ValueError(f"total_samples={total_samples} below n_clients={n_clients}")
    rng = np.random.default_rng(seed)
    sizes = power_law_sizes(n_clients, total_samples, power_exponent, rng)
    cov_diag = np.arange(1, dim + 1, dtype=float) ** (-1.2)
    scale = np.sqrt(cov_diag)

    # Zero spread means every client shares one generating model/mean: the
    # i.i.d. limit. Positive spread draws per-client parameters.
    shared_w = rng.normal(0.0, 1.0, size=(n_classes, dim)) if alpha == 0 else None
    shared_b = rng.normal(0.0, 1.0, size=n_classes) if alpha == 0 else None
    shared_mean = rng.normal(0.0, 1.0, size=dim) if beta == 0 else None

    shards = []
    test_x, test_y = [], []
    for n in range(n_clients):
        if alpha > 0:
            u_n = rng.normal(0.0, np.sqrt(alpha))
            w_n = rng.normal(u_n, 1.0, size=(n_classes, dim))
            b_n = rng.normal(u_n, 1.0, size=n_classes)
        else:
            w_n, b_n = shared_w, shared_b
        if beta > 0:
            v_n = rng.normal(0.0, np.sqrt(beta))
            mean_n = rng.normal(v_n, 1.0, size=dim)
        else:
            mean_n = shared_mean
        n_test = max(1, int(round(0.1 * sizes[n])))
        count = sizes[n] + n_test
        x = mean_n + rng.normal(0.0, 1.0, size=(count, dim)) * scale
        logits = x @ w_n.T + b_n
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        cdf = np.cumsum(probs, axis=1)
        y = (rng.random((count, 1)) < cdf).argmax(axis=1)
        shards.append((x[: sizes[n]], y[: sizes[n]].astype(np.int64)))
        test_x.append(x[sizes[n] :])
        test_y.append(y[sizes[n] :].astype(np.int64))
    return FederatedDataset(
        shards=tuple(shards),
        test_features=np.concatenate(test_x, axis=0),
        test_labels=np.concatenate(test_y, axis=0),
        n_classes=n_classes,
        dim=dim,
    )


def _read_exact(f, count: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise IdxFormatError(f"truncated IDX file: expected {count} bytes for {what}, got {len(buf)}")
    return buf


def load_idx(images_path: str, labels_path: str):
    """Parse a big-endian IDX image/label pair; pixels scaled to [0, 1].

    Returns (samples: float64 array of shape (count, rows*cols), labels:
    int64 array). Image and label counts must match.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x} in {images_path}")
        raw = _read_exact(f, count * rows * cols, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x} in {labels_path}")
        raw = _read_exact(f, label_count, "label data")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if count != label_count:
        raise IdxFormatError(f"count mismatch: {count} images but {label_count} labels")
    return images.astype(np.float64) / 255.0, labels


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray, rows: int, cols: int) -> None:
    """Write an IDX pair (testing and tooling convenience; inverse of load_idx)."""
    count = len(labels)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        f.write(np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, count))
        f.write(labels.astype(np.uint8).tobytes())


def subsample(samples: np.ndarray, labels: np.ndarray, n: int, seed: int = 0):
    """Uniform subsample without replacement, deterministic per seed."""
    if n > len(labels):
        raise ValueError(f"cannot subsample {n} from {len(labels)} samples")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(labels), size=n, replace=False)
    return samples[idx], labels[idx]


def filter_labels(samples: np.ndarray, labels: np.ndarray, keep: list):
    """Keep only samples whose label is in ``keep``, remapping labels to 0..k-1."""
    keep = sorted(set(keep))
    remap = {lbl: i for i, lbl in enumerate(keep)}
    mask = np.isin(labels, keep)
    new_labels = np.array([remap[int(l)] for l in labels[mask]], dtype=np.int64)
    return samples[mask], new_labels


def _route_residual(
    assigned: list,
    residual_need: np.ndarray,
    residual_supply: np.ndarray,
    n_clients: int,
    n_classes: int,
) -> np.ndarray:
    """Split each client's remaining shard size across its assigned classes.

    Max-flow on source -> clients -> classes -> sink with pool capacities;
    a saturating flow is exactly a feasible split. Raises naming a deficient
    class when the pools cannot cover the shard sizes.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import maximum_flow

    total_need = int(residual_need.sum())
    demand = np.zeros((n_clients, n_classes), dtype=np.int64)
    if total_need == 0:
        return demand

    src = 0
    sink = 1 + n_clients + n_classes
    n_nodes = sink + 1
    rows, cols, caps = [], [], []
    for n in range(n_clients):
        rows.append(src)
        cols.append(1 + n)
        caps.append(int(residual_need[n]))
        for c in assigned[n]:
            rows.append(1 + n)
            cols.append(1 + n_clients + c)
            caps.append(int(residual_need[n]))
    for c in range(n_classes):
        rows.append(1 + n_clients + c)
        cols.append(sink)
        caps.append(int(residual_supply[c]))
    graph = csr_matrix((caps, (rows, cols)), shape=(n_nodes, n_nodes), dtype=np.int64)
    flow = maximum_flow(graph.astype(np.int32), src, sink)
    if flow.flow_value < total_need:
        # Name the tightest saturated class pool touched by an unmet client.
        residual = flow.flow.toarray()
        sent = residual[src, 1:1 + n_clients]
        unmet = [n for n in range(n_clients) if sent[n] < residual_need[n]]
        for n in unmet:
            for c in assigned[n]:
                if residual[1 + n_clients + c, sink] >= residual_supply[c]:
                    need = int(residual_need[n]) + len(assigned[n])
                    raise ValueError(
                        f"class {c}: partition needs more samples than the "
                        f"{int(residual_supply[c])} left in its pool "
                        f"(client shard of {need} cannot be filled)"
                    )
        raise ValueError("partition infeasible: class pools cannot cover shard sizes")
    fl = flow.flow.toarray()
    for n in range(n_clients):
        for c in assigned[n]:
            demand[n, c] = fl[1 + n, 1 + n_clients + c]
    return demand


def partition_label_limited(
    samples: np.ndarray,
    labels: np.ndarray,
    n_clients: int,
    classes_per_client_min: int,
    classes_per_client_max: int,
    power_exponent: float = 1.5,
    seed: int = 0,
    n_classes: int | None = None,
    test_features: np.ndarray | None = None,
    test_labels: np.ndarray | None = None,
) -> FederatedDataset:
    """Unbalanced, label-limited partition: each client holds a random number
    of distinct classes in [min, max], with power-law shard sizes.

    Shards are disjoint and their union is exactly the input sample set.
    Raises when some class pool cannot cover its assignments.
    """
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if not 1 <= classes_per_client_min <= classes_per_client_max <= n_classes:
        raise ValueError(
            f"class count range [{classes_per_client_min}, {classes_per_client_max}] "
            f"invalid for {n_classes} classes"
        )
    rng = np.random.default_rng(seed)
    sizes = power_law_sizes(n_clients, len(labels), power_exponent, rng)

    pools = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in range(n_classes)}
    supply = np.array([len(pools[c]) for c in range(n_classes)])

    # Assign class sets, then split each shard's size across its classes by
    # solving the transportation problem exactly: every assigned class gets
    # at least one sample, the rest is routed by max-flow so any feasible
    # split is found. Total demand equals total supply, so a feasible demand
    # matrix uses every sample exactly once.
    assigned = []
    for n in range(n_clients):
        k = int(rng.integers(classes_per_client_min, classes_per_client_max + 1))
        k = min(k, sizes[n])  # a shard cannot hold more classes than samples
        assigned.append([int(c) for c in rng.choice(n_classes, size=k, replace=False)])

    mandatory = np.zeros(n_classes, dtype=np.int64)
    for classes in assigned:
        mandatory[classes] += 1
    for c in range(n_classes):
        if mandatory[c] > supply[c]:
            raise ValueError(
                f"class {c}: partition needs {int(mandatory[c])} samples but only "
                f"{int(supply[c])} available"
            )

    residual_need = np.array([sizes[n] - len(assigned[n]) for n in range(n_clients)])
    residual_supply = supply - mandatory
    demand = _route_residual(assigned, residual_need, residual_supply, n_clients, n_classes)
    for n, classes in enumerate(assigned):
        demand[n, classes] += 1

    shards = []
    for n in range(n_clients):
        idx = []
        for c in assigned[n]:
            count = int(demand[n, c])
            idx.extend(pools[c][:count])
            pools[c] = pools[c][count:]
        idx = np.array(sorted(idx))
        shards.append((samples[idx], labels[idx]))

    if test_features is None:
        test_features = np.empty((0, samples.shape[1]))
        test_labels = np.empty((0,), dtype=np.int64)
    return FederatedDataset(
        shards=tuple(shards),
        test_features=test_features,
        test_labels=test_labels,
        n_classes=n_classes,
        dim=samples.shape[1],
    )


# Binary dataset container: magic "FPDS", version, header, then little-endian
# float64 feature blocks and int64 label blocks, shards in client order, test
# set last. See README FORMATS for the byte layout.
_CONTAINER_MAGIC = b"FPDS"
_CONTAINER_VERSION = 1


def save_dataset(path: str, dataset: FederatedDataset) -> None:
    with open(path, "wb") as f:
        f.write(_CONTAINER_MAGIC)
        f.write(struct.pack("<IIIIQ", _CONTAINER_VERSION, dataset.n_clients,
                            dataset.dim, dataset.n_classes, len(dataset.test_labels)))
        for x, _ in dataset.shards:
            f.write(struct.pack("<Q", len(x)))
        for x, y in dataset.shards:
            f.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(y, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(dataset.test_features, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(dataset.test_labels, dtype="<i8").tobytes())


def load_dataset(path: str) -> FederatedDataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CONTAINER_MAGIC:
            raise ValueError(f"{path}: not a dataset container (magic {magic!r})")
        version, n_clients, dim, n_classes, n_test = struct.unpack("<IIIIQ", f.read(24))
        if version != _CONTAINER_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        sizes = [struct.unpack("<Q", f.read(8))[0] for _ in range(n_clients)]
        shards = []
        for size in sizes:
            x = np.frombuffer(f.read(8 * size * dim), dtype="<f8").reshape(size, dim)
            y = np.frombuffer(f.read(8 * size), dtype="<i8")
            shards.append((x.copy(), y.copy()))
        tx = np.frombuffer(f.read(8 * n_test * dim), dtype="<f8").reshape(n_test, dim).copy()
        ty = np.frombuffer(f.read(8 * n_test), dtype="<i8").copy()
    return FederatedDataset(
        shards=tuple(shards), test_features=tx, test_labels=ty,
        n_classes=n_classes, dim=dim,
    )
