"""Open-set datasets: synthetic Gaussian clusters, MNIST IDX files, splits,
vector augmentation and batch streams.

Labels are 0-based: ID classes are ``0..K-1`` and every OOD sample carries
``K``. The OOD label on unlabeled/test data is hidden ground truth, kept for
metrics and diagnostics only.
"""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

ROLES = ("labeled", "unlabeled", "test")


class FormatError(ValueError):
    """Malformed IDX or CSV input."""


class ConfigError(ValueError):
    """A split or generation request that cannot be satisfied."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int  # K, the number of ID classes
    role: str = "test"
    indices: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise ValueError(f"features {feats.shape} and labels {labels.shape} disagree")
        if not np.isfinite(feats).all():
            raise ValueError("features must be finite")
        if labels.size and (labels.min() < 0 or labels.max() > self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes}]")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if self.indices is None:
            idx = np.arange(len(labels))
        else:
            idx = np.asarray(self.indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def ood_label(self) -> int:
        return self.num_classes

    @property
    def is_ood(self) -> np.ndarray:
        return self.labels == self.num_classes

    def subset(self, idx, role: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes,
                       role or self.role, self.indices[idx])


@dataclass(frozen=True)
class SplitConfig:
    num_id_classes: int
    labels_per_class: int
    unlabeled_size: int
    mismatch_ratio: float
    seed: int = 0
    test_size: int | None = None  # None keeps every held-out sample

    def __post_init__(self):
        if not 0.0 <= self.mismatch_ratio <= 1.0:
            raise ConfigError("mismatch_ratio must lie in [0, 1]")
        if self.num_id_classes < 1 or self.labels_per_class < 1 or self.unlabeled_size < 0:
            raise ConfigError("class, label and unlabeled counts must be positive")


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise_sigma: float = 0.1
    strong_noise_sigma: float = 0.5
    strong_dropout_prob: float = 0.2

    def __post_init__(self):
        if self.strong_noise_sigma < self.weak_noise_sigma:
            raise ConfigError("strong_noise_sigma must be >= weak_noise_sigma")
        if not 0.0 <= self.strong_dropout_prob < 1.0:
            raise ConfigError("strong_dropout_prob must lie in [0, 1)")
        if self.weak_noise_sigma < 0:
            raise ConfigError("noise sigmas must be non-negative")


def make_synthetic_openset(K: int, num_ood_clusters: int, dim: int, cluster_separation: float,
                           per_cluster: int, seed: int, cluster_std: float = 1.0,
                           max_retries: int = 1000) -> Dataset:
    """Isotropic Gaussian clusters; the first ``K`` are ID classes, the rest share label ``K``.

    Means are drawn from N(0, s^2 I) and redrawn until every pair sits at least
    ``cluster_separation`` apart.
    """
    if K < 2 or num_ood_clusters < 1 or dim < 2:
        raise ConfigError("need K >= 2, num_ood_clusters >= 1 and dim >= 2")
    rng = np.random.default_rng(seed)
    n_clusters = K + num_ood_clusters
    # expected pairwise distance of the draws is s*sqrt(2*dim)
    scale = 1.5 * cluster_separation / np.sqrt(2.0 * dim)
    for _ in range(max_retries):
        means = rng.normal(0.0, scale, size=(n_clusters, dim))
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        if d[np.triu_indices(n_clusters, 1)].min() >= cluster_separation:
            break
    else:
        raise ConfigError(f"could not place {n_clusters} clusters {cluster_separation} apart "
                          f"in {dim} dimensions after {max_retries} tries")
    feats = np.concatenate([m + cluster_std * rng.standard_normal((per_cluster, dim)) for m in means])
    labels = np.repeat(np.minimum(np.arange(n_clusters), K), per_cluster)
    return Dataset(feats, labels, K, "test")


def _read_idx(path, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: bad magic number 0x{got:08x} for {what} (expected 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = raw[header:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    return dims, payload


def read_idx_images(path) -> np.ndarray:
    dims, payload = _read_idx(path, IDX_IMAGES_MAGIC, "images")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_idx_labels(path) -> np.ndarray:
    dims, payload = _read_idx(path, IDX_LABELS_MAGIC, "labels")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, r, c = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_idx(images_path, labels_path, id_classes=(0, 1, 2, 3, 4, 5)) -> Dataset:
    """Read an IDX image/label pair into flattened features scaled to [0, 1].

    Raw labels listed in ``id_classes`` map to ``0..K-1`` in order; all other
    labels become the OOD label ``K``.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    K = len(id_classes)
    lut = np.full(256, K, dtype=np.int64)
    lut[list(id_classes)] = np.arange(K)
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(feats, lut[labels], K, "test")


def round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def split_open_set(dataset: Dataset, cfg: SplitConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Partition into labeled (ID only), unlabeled (exact OOD count) and held-out test.

    The three parts are disjoint by index. Unlabeled ID samples are drawn
    uniformly from the ID pool left after the labeled quota.
    """
    K = cfg.num_id_classes
    if dataset.num_classes != K:
        raise ConfigError(f"dataset has {dataset.num_classes} ID classes, config says {K}")
    rng = np.random.default_rng(cfg.seed)
    n_ood = round_half_away(cfg.unlabeled_size * cfg.mismatch_ratio)
    n_id = cfg.unlabeled_size - n_ood

    labeled = []
    rest_id = []
    for c in range(K):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < cfg.labels_per_class:
            raise ConfigError(f"class {c} has {len(idx)} samples, fewer than "
                              f"labels_per_class={cfg.labels_per_class}")
        idx = rng.permutation(idx)
        labeled.append(idx[: cfg.labels_per_class])
        rest_id.append(idx[cfg.labels_per_class:])
    labeled = np.sort(np.concatenate(labeled))
    rest_id = rng.permutation(np.concatenate(rest_id))
    ood = rng.permutation(np.flatnonzero(dataset.is_ood))
    if n_id > len(rest_id):
        raise ConfigError(f"unlabeled pool needs {n_id} ID samples, only {len(rest_id)} remain")
    if n_ood > len(ood):
        raise ConfigError(f"unlabeled pool needs {n_ood} OOD samples, only {len(ood)} available")
    unlabeled = np.sort(np.concatenate([rest_id[:n_id], ood[:n_ood]]))
    held = np.concatenate([rest_id[n_id:], ood[n_ood:]])
    if cfg.test_size is not None:
        held = rng.permutation(held)[: cfg.test_size]
    test = np.sort(held)
    return (dataset.subset(labeled, "labeled"), dataset.subset(unlabeled, "unlabeled"),
            dataset.subset(test, "test"))


def augment_weak(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.weak_noise_sigma == 0:
        return np.array(x, dtype=np.float64)
    return x + cfg.weak_noise_sigma * rng.standard_normal(np.shape(x))


def augment_strong(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = x + cfg.strong_noise_sigma * rng.standard_normal(np.shape(x))
    if cfg.strong_dropout_prob > 0:
        out = out * (rng.random(np.shape(x)) >= cfg.strong_dropout_prob)
    return out


class IndexStream:
    """Endless stream of indices into a pool, reshuffled at every epoch boundary.

    A request larger than the pool spans several epochs, so an index may repeat
    within one batch.
    """

    def __init__(self, n: int, rng: np.random.Generator):
        if n <= 0:
            raise ConfigError("cannot batch from an empty pool")
        self.n = n
        self.rng = rng
        self.perm = np.zeros(0, dtype=np.int64)
        self.pos = n  # first take() shuffles

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            m = min(k, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + m])
            self.pos += m
            k -= m
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def state(self) -> dict:
        return {"perm": self.perm.tolist(), "pos": self.pos}

    def set_state(self, state: dict) -> None:
        self.perm = np.asarray(state["perm"], dtype=np.int64).reshape(-1)
        self.pos = int(state["pos"])


class BatchStream:
    """Yields ``(labeled_idx, unlabeled_idx)`` of sizes ``(B, mu*B)`` forever.

    Both pools draw from the one ``rng`` (the batching sub-stream).
    """

    def __init__(self, n_labeled: int, n_unlabeled: int, B: int, mu: int, rng: np.random.Generator):
        self.B, self.mu = B, mu
        self.rng = rng
        self.labeled = IndexStream(n_labeled, rng)
        self.unlabeled = IndexStream(n_unlabeled, rng) if mu > 0 else None

    def __iter__(self):
        return self

    def __next__(self):
        li = self.labeled.take(self.B)
        ui = self.unlabeled.take(self.mu * self.B) if self.unlabeled else np.zeros(0, dtype=np.int64)
        return li, ui

    def state(self) -> dict:
        return {"labeled": self.labeled.state(),
                "unlabeled": self.unlabeled.state() if self.unlabeled else None}

    def set_state(self, state: dict) -> None:
        self.labeled.set_state(state["labeled"])
        if self.unlabeled is not None:
            self.unlabeled.set_state(state["unlabeled"])


def batch_iter(labeled: Dataset, unlabeled: Dataset, B: int, mu: int, rng: np.random.Generator):
    """Stream of ``(X, y, U)`` batches: B labeled features/labels and mu*B unlabeled features."""
    for li, ui in BatchStream(len(labeled), len(unlabeled), B, mu, rng):
        yield labeled.features[li], labeled.labels[li], unlabeled.features[ui]


def save_csv(datasets, path) -> None:
    """Write datasets as CSV with header ``f0..f{d-1},label,role``."""
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    dim = datasets[0].dim
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"f{i}" for i in range(dim)] + ["label", "role"])
        for ds in datasets:
            for x, y in zip(ds.features, ds.labels):
                w.writerow([repr(float(v)) for v in x] + [int(y), ds.role])


def load_csv(path, num_classes: int | None = None) -> dict[str, Dataset]:
    """Read a CSV written by :func:`save_csv`, grouped by role.

    ``num_classes`` defaults to the largest label present (the OOD label).
    """
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header is None or header[-2:] != ["label", "role"]:
            raise FormatError(f"{path}: header must end with 'label,role'")
        dim = len(header) - 2
        if header[:dim] != [f"f{i}" for i in range(dim)]:
            raise FormatError(f"{path}: feature columns must be named f0..f{dim - 1}")
        rows = list(r)
    for i, row in enumerate(rows, start=2):
        if len(row) != dim + 2:
            raise FormatError(f"{path}:{i}: expected {dim + 2} fields, got {len(row)}")
    feats = np.array([[float(v) for v in row[:dim]] for row in rows]).reshape(len(rows), dim)
    labels = np.array([int(row[dim]) for row in rows], dtype=np.int64)
    roles = np.array([row[dim + 1] for row in rows])
    if num_classes is None:
        num_classes = int(labels.max()) if len(labels) else 0
    out = {}
    for role in ROLES:
        sel = roles == role
        if sel.any():
            out[role] = Dataset(feats[sel], labels[sel], num_classes, role)
    return out


