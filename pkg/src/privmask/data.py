"""Dual-task datasets: synthetic generators, splits, label perturbation, and IO.

A dual-task dataset carries one feature matrix and two label columns: the
utility task (what the model owner wants to predict) and the identity task
(a surrogate for who contributed each sample). All generators are pure
functions of their arguments including the seed.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

TASKS = ("identity", "utility")


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclasses.dataclass(frozen=True)
class DualTaskDataset:
    """Feature matrix in [0,1] with utility and identity label columns.

    Instances are immutable: arrays are stored read-only so a dataset can be
    shared across parallel workers without copying.
    """

    features: np.ndarray        # (N, K) float64, values in [0, 1]
    utility_labels: np.ndarray  # (N,) int64 in {0..num_utility_classes-1}
    identity_labels: np.ndarray  # (N,) int64 in {0..num_identity_classes-1}
    num_utility_classes: int
    num_identity_classes: int
    name: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        uy = np.asarray(self.utility_labels, dtype=np.int64)
        iz = np.asarray(self.identity_labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        n, k = feats.shape
        if n < 1 or k < 1:
            raise ValueError(f"need at least 1 sample and 1 feature, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        if uy.shape != (n,) or iz.shape != (n,):
            raise ValueError("label vectors must both have length N")
        if self.num_utility_classes < 2 or self.num_identity_classes < 2:
            raise ValueError("both tasks need at least 2 classes")
        if uy.min() < 0 or uy.max() >= self.num_utility_classes:
            raise ValueError("utility labels out of range")
        if iz.min() < 0 or iz.max() >= self.num_identity_classes:
            raise ValueError("identity labels out of range")
        object.__setattr__(self, "features", _as_readonly(feats))
        object.__setattr__(self, "utility_labels", _as_readonly(uy))
        object.__setattr__(self, "identity_labels", _as_readonly(iz))

    @property
    def sample_count(self) -> int:
        return self.features.shape[0]

    @property
    def feature_count(self) -> int:
        return self.features.shape[1]

    def labels_for(self, task: str) -> np.ndarray:
        if task == "identity":
            return self.identity_labels
        if task == "utility":
            return self.utility_labels
        raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")

    def num_classes_for(self, task: str) -> int:
        if task == "identity":
            return self.num_identity_classes
        if task == "utility":
            return self.num_utility_classes
        raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")

    def take(self, indices: np.ndarray, name: str | None = None) -> "DualTaskDataset":
        """Row subset as a new dataset (class counts preserved)."""
        idx = np.asarray(indices)
        return DualTaskDataset(
            features=self.features[idx],
            utility_labels=self.utility_labels[idx],
            identity_labels=self.identity_labels[idx],
            num_utility_classes=self.num_utility_classes,
            num_identity_classes=self.num_identity_classes,
            name=self.name if name is None else name,
        )


@dataclasses.dataclass(frozen=True)
class PlantedStructure:
    """Which features drive the identity and utility labeling rules."""

    identity_features: tuple[int, ...]
    utility_features: tuple[int, ...]
    noise_std: float = 0.0

    def __post_init__(self):
        if len(self.identity_features) == 0 or len(self.utility_features) == 0:
            raise ValueError("planted feature sets must be non-empty")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        object.__setattr__(self, "identity_features", tuple(int(j) for j in self.identity_features))
        object.__setattr__(self, "utility_features", tuple(int(j) for j in self.utility_features))

    @property
    def overlap_fraction(self) -> float:
        i, u = set(self.identity_features), set(self.utility_features)
        return len(i & u) / len(i | u)

    def validate_for(self, num_features: int) -> None:
        for j in self.identity_features + self.utility_features:
            if not 0 <= j < num_features:
                raise ValueError(f"planted feature index {j} out of range [0, {num_features})")


def _quantile_labels(scores: np.ndarray, num_classes: int) -> np.ndarray:
    # Class-balanced thresholds: cut points at the i/num_classes quantiles.
    qs = np.arange(1, num_classes) / num_classes
    thresholds = np.quantile(scores, qs)
    return np.searchsorted(thresholds, scores, side="right").astype(np.int64)


def _planted_labels(features, feature_set, num_classes, noise_std, rng):
    cols = np.asarray(feature_set)
    weights = rng.uniform(0.5, 1.5, size=len(cols))
    scores = features[:, cols] @ weights
    if noise_std > 0:
        scores = scores + rng.normal(scale=noise_std, size=scores.shape)
    labels = _quantile_labels(scores, num_classes)
    # Quantile thresholds can leave the top class empty on tied scores; clip defensively.
    return np.clip(labels, 0, num_classes - 1)


def gen_synthetic_dual_task(num_samples: int, num_features: int,
                            num_identity_classes: int, num_utility_classes: int,
                            structure: PlantedStructure, seed: int) -> DualTaskDataset:
    """Generate a dataset whose labels depend only on planted feature sets.

    Identity labels are a linear score over ``structure.identity_features``
    (weights drawn from the seeded rng, optional Gaussian noise of
    ``noise_std``) cut at class-balanced quantiles; utility labels likewise
    over ``structure.utility_features``. All other features are pure noise.
    """
    if num_samples < 1 or num_features < 1:
        raise ValueError("num_samples and num_features must be positive")
    if num_identity_classes < 2 or num_utility_classes < 2:
        raise ValueError("class counts must be at least 2")
    structure.validate_for(num_features)
    rng = np.random.default_rng(seed)
    features = rng.uniform(size=(num_samples, num_features))
    identity = _planted_labels(features, structure.identity_features,
                               num_identity_classes, structure.noise_std, rng)
    utility = _planted_labels(features, structure.utility_features,
                              num_utility_classes, structure.noise_std, rng)
    return DualTaskDataset(features, utility, identity,
                           num_utility_classes=num_utility_classes,
                           num_identity_classes=num_identity_classes,
                           name=f"planted-n{num_samples}-k{num_features}-s{seed}")


def gen_random_dataset(num_samples: int, num_features: int,
                       num_classes: int, seed: int) -> DualTaskDataset:
    """Features i.i.d. uniform [0,1]; both label columns i.i.d. uniform and
    statistically independent of the features."""
    if num_samples < 1 or num_features < 1:
        raise ValueError("num_samples and num_features must be positive")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    rng = np.random.default_rng(seed)
    features = rng.uniform(size=(num_samples, num_features))
    utility = rng.integers(0, num_classes, size=num_samples)
    identity = rng.integers(0, num_classes, size=num_samples)
    return DualTaskDataset(features, utility, identity,
                           num_utility_classes=num_classes,
                           num_identity_classes=num_classes,
                           name=f"random-n{num_samples}-k{num_features}-s{seed}")


def randomize_labels(dataset: DualTaskDataset, fraction: float,
                     which_task: str, seed: int) -> DualTaskDataset:
    """Redraw the labels of ``floor(fraction * N)`` uniformly chosen samples.

    The fresh label is uniform over the task's class set (it may coincide
    with the original). The input dataset is not modified.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    n = dataset.sample_count
    count = int(np.floor(fraction * n))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=count, replace=False)
    num_classes = dataset.num_classes_for(which_task)
    fresh = rng.integers(0, num_classes, size=count)
    labels = dataset.labels_for(which_task).copy()
    labels[chosen] = fresh
    new_utility = labels if which_task == "utility" else dataset.utility_labels
    new_identity = labels if which_task == "identity" else dataset.identity_labels
    return DualTaskDataset(dataset.features, new_utility, new_identity,
                           num_utility_classes=dataset.num_utility_classes,
                           num_identity_classes=dataset.num_identity_classes,
                           name=f"{dataset.name}:rand{which_task[0]}{fraction:g}")


def split_train_test(dataset: DualTaskDataset, ratio: float,
                     seed: int) -> tuple[DualTaskDataset, DualTaskDataset]:
    """Disjoint partition of sizes ceil(ratio*N) and the rest, seeded."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    n = dataset.sample_count
    n_train = int(np.ceil(ratio * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split ratio {ratio} leaves an empty side for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    train = dataset.take(np.sort(perm[:n_train]), name=f"{dataset.name}:train")
    test = dataset.take(np.sort(perm[n_train:]), name=f"{dataset.name}:test")
    return train, test


# ---------------------------------------------------------------------------
# IDX ingestion (optional; single-task files such as MNIST)
# ---------------------------------------------------------------------------

_IDX_MAGIC_LABELS = 0x00000801
_IDX_MAGIC_IMAGES = 0x00000803


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (_IDX_MAGIC_LABELS, _IDX_MAGIC_IMAGES):
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ValueError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < expected:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(dims)


def _avg_pool(images: np.ndarray, out_side: int) -> np.ndarray:
    n, h, w = images.shape
    if h != w:
        raise ValueError(f"expected square images, got {h}x{w}")
    if h % out_side != 0:
        raise ValueError(f"cannot average-pool {h}x{h} images to {out_side}x{out_side}")
    f = h // out_side
    return images.reshape(n, out_side, f, out_side, f).mean(axis=(2, 4))


def load_idx_subset(images_path, labels_path, max_samples: int | None = None,
                    downscale_to: int | None = None) -> DualTaskDataset:
    """Load an IDX image/label file pair as a dual-task dataset.

    Pixels are scaled to [0,1] and optionally average-pooled down to
    ``downscale_to`` x ``downscale_to``. The identity column is a copy of the
    label column (single-task source); callers may overwrite it.
    """
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected a 3-D image tensor, got {images.ndim}-D")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected a 1-D label vector, got {labels.ndim}-D")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}")
    if max_samples is not None:
        images = images[:max_samples]
        labels = labels[:max_samples]
    pixels = images.astype(np.float64) / 255.0
    if downscale_to is not None:
        pixels = _avg_pool(pixels, downscale_to)
    features = pixels.reshape(pixels.shape[0], -1)
    labels = labels.astype(np.int64)
    num_classes = max(int(labels.max()) + 1, 2)
    return DualTaskDataset(features, labels, labels.copy(),
                           num_utility_classes=num_classes,
                           num_identity_classes=num_classes,
                           name=Path(images_path).stem)


# ---------------------------------------------------------------------------
# CSV and binary snapshots
# ---------------------------------------------------------------------------

def to_csv(dataset: DualTaskDataset, path) -> None:
    """Write `f0..f{K-1},y,z` rows."""
    k = dataset.feature_count
    header = ",".join([f"f{j}" for j in range(k)] + ["y", "z"])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i in range(dataset.sample_count):
            feats = ",".join(repr(float(v)) for v in dataset.features[i])
            fh.write(f"{feats},{dataset.utility_labels[i]},{dataset.identity_labels[i]}\n")


def from_csv(path, num_utility_classes: int | None = None,
             num_identity_classes: int | None = None, name: str = "") -> DualTaskDataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if len(header) < 3 or header[-2:] != ["y", "z"]:
            raise ValueError(f"{path}: expected header f0..f{{K-1}},y,z, got {header[:4]}...")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    features, uy, iz = rows[:, :-2], rows[:, -2].astype(np.int64), rows[:, -1].astype(np.int64)
    return DualTaskDataset(
        features, uy, iz,
        num_utility_classes=num_utility_classes or max(int(uy.max()) + 1, 2),
        num_identity_classes=num_identity_classes or max(int(iz.max()) + 1, 2),
        name=name or Path(path).stem,
    )


def save_snapshot(dataset: DualTaskDataset, path, seed_provenance: int | None = None) -> None:
    """Compact binary snapshot with explicit shape, class counts, and seed."""
    np.savez_compressed(
        path,
        features=dataset.features,
        utility_labels=dataset.utility_labels,
        identity_labels=dataset.identity_labels,
        meta=np.array([dataset.sample_count, dataset.feature_count,
                       dataset.num_utility_classes, dataset.num_identity_classes,
                       -1 if seed_provenance is None else seed_provenance], dtype=np.int64),
        name=np.str_(dataset.name),
    )


def load_snapshot(path) -> DualTaskDataset:
    with np.load(path, allow_pickle=False) as z:
        meta = z["meta"]
        return DualTaskDataset(
            z["features"], z["utility_labels"], z["identity_labels"],
            num_utility_classes=int(meta[2]), num_identity_classes=int(meta[3]),
            name=str(z["name"]),
        )
