import struct

import numpy as np
import pytest

from privmask import data, models


def test_generators_are_deterministic():
    s = data.PlantedStructure((0, 1), (1, 2), noise_std=0.1)
    a = data.gen_synthetic_dual_task(50, 5, 2, 2, s, seed=9)
    b = data.gen_synthetic_dual_task(50, 5, 2, 2, s, seed=9)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.identity_labels, b.identity_labels)
    assert np.array_equal(a.utility_labels, b.utility_labels)
    c = data.gen_random_dataset(50, 5, 3, seed=4)
    d = data.gen_random_dataset(50, 5, 3, seed=4)
    assert np.array_equal(c.features, d.features)
    assert not np.array_equal(a.features, data.gen_synthetic_dual_task(50, 5, 2, 2, s, seed=10).features)


def test_planted_identity_signal_above_chance():
    # seed=7, N=200, K=20, |I|=6, |U|=6, overlap 2: a plain probe classifier
    # must beat chance by at least 3 binomial standard deviations.
    s = data.PlantedStructure((0, 1, 2, 3, 4, 5), (4, 5, 6, 7, 8, 9), noise_std=0.0)
    ds = data.gen_synthetic_dual_task(200, 20, 4, 3, s, seed=7)
    model = models.train_plain(ds.features, ds.identity_labels,
                               models.ModelSpec((16,), "relu"),
                               models.TrainConfig(0.2, 60, 32, seed=0),
                               num_classes=4)
    acc = models.accuracy(model, ds.features, ds.identity_labels)
    chance = 1.0 / 4
    assert acc > chance + 3 * np.sqrt(chance * (1 - chance) / 200)


def test_overlap_fraction():
    s = data.PlantedStructure((0, 1, 2), (0, 1, 2))
    assert s.overlap_fraction == 1.0
    s2 = data.PlantedStructure((0, 1), (2, 3))
    assert s2.overlap_fraction == 0.0
    s3 = data.PlantedStructure((0, 1, 2, 3, 4, 5), (4, 5, 6, 7, 8, 9))
    assert s3.overlap_fraction == pytest.approx(2 / 10)


def test_noiseless_single_feature_recoverable_by_threshold_scan():
    s = data.PlantedStructure((3,), (3,), noise_std=0.0)
    ds = data.gen_synthetic_dual_task(150, 6, 2, 2, s, seed=11)
    col = ds.features[:, 3]
    # brute-force threshold scan oracle
    candidates = np.sort(col)
    best = 0.0
    for t in candidates:
        acc = max(np.mean((col > t) == ds.identity_labels),
                  np.mean((col <= t) == ds.identity_labels))
        best = max(best, acc)
    assert best == 1.0


def test_structure_validation():
    with pytest.raises(ValueError):
        data.PlantedStructure((), (0,))
    s = data.PlantedStructure((0, 9), (0,))
    with pytest.raises(ValueError):
        data.gen_synthetic_dual_task(10, 5, 2, 2, s, seed=0)
    with pytest.raises(ValueError):
        data.gen_synthetic_dual_task(10, 5, 1, 2, data.PlantedStructure((0,), (1,)), seed=0)


def test_random_dataset_label_range():
    ds = data.gen_random_dataset(100, 10, 5, seed=1)
    for labels in (ds.utility_labels, ds.identity_labels):
        assert labels.min() >= 0 and labels.max() <= 4


def test_random_dataset_feature_label_independence():
    # Plug-in mutual information of one feature (8 bins) vs labels must sit
    # below the 95th percentile of its permutation-null distribution.
    ds = data.gen_random_dataset(400, 6, 4, seed=21)
    rng = np.random.default_rng(0)

    def plugin_mi(x, y, bins=8):
        xb = np.digitize(x, np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1]))
        joint = np.zeros((bins, y.max() + 1))
        for a, b in zip(xb, y):
            joint[a, b] += 1
        joint /= joint.sum()
        px = joint.sum(1, keepdims=True)
        py = joint.sum(0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = joint * np.log(joint / (px * py))
        return np.nansum(terms)

    rejections = 0
    for j in range(ds.feature_count):
        observed = plugin_mi(ds.features[:, j], ds.utility_labels)
        null = [plugin_mi(ds.features[:, j], rng.permutation(ds.utility_labels))
                for _ in range(99)]
        if observed > np.quantile(null, 0.95):
            rejections += 1
    assert rejections <= 2  # nominal 5% level over 6 features


def test_randomize_labels_fraction_zero_noop(random_dataset):
    out = data.randomize_labels(random_dataset, 0.0, "utility", seed=5)
    assert np.array_equal(out.utility_labels, random_dataset.utility_labels)
    assert np.array_equal(out.features, random_dataset.features)


def test_randomize_labels_full_agreement_matches_expectation():
    # fraction=1: every label redrawn uniformly; expected agreement 1/classes.
    ds = data.gen_random_dataset(300, 4, 5, seed=2)
    agreements = []
    for seed in range(40):
        out = data.randomize_labels(ds, 1.0, "utility", seed=seed)
        agreements.append(np.mean(out.utility_labels == ds.utility_labels))
    expected = 1.0 / 5
    se = np.sqrt(expected * (1 - expected) / (300 * 40))
    assert abs(np.mean(agreements) - expected) < 4 * se


def test_randomize_labels_changes_at_most_floor_fn(random_dataset):
    for fraction in (0.1, 0.33, 0.8):
        out = data.randomize_labels(random_dataset, fraction, "identity", seed=3)
        changed = np.sum(out.identity_labels != random_dataset.identity_labels)
        assert changed <= int(fraction * random_dataset.sample_count)
        assert np.array_equal(out.utility_labels, random_dataset.utility_labels)


def test_randomize_labels_rejects_bad_fraction(random_dataset):
    with pytest.raises(ValueError):
        data.randomize_labels(random_dataset, 1.5, "utility", seed=0)


def test_split_sizes_and_partition():
    ds = data.gen_random_dataset(100, 4, 3, seed=0)
    train, test = data.split_train_test(ds, 0.8, seed=1)
    assert (train.sample_count, test.sample_count) == (80, 20)
    combined = np.vstack([train.features, test.features])
    assert np.array_equal(np.sort(combined.ravel()), np.sort(ds.features.ravel()))
    tiny = data.gen_random_dataset(2, 3, 2, seed=0)
    a, b = data.split_train_test(tiny, 0.5, seed=0)
    assert (a.sample_count, b.sample_count) == (1, 1)


def test_split_determinism_and_errors():
    ds = data.gen_random_dataset(30, 4, 3, seed=0)
    a1, _ = data.split_train_test(ds, 0.7, seed=9)
    a2, _ = data.split_train_test(ds, 0.7, seed=9)
    assert np.array_equal(a1.features, a2.features)
    with pytest.raises(ValueError):
        data.split_train_test(ds, 1.0, seed=0)
    one = data.gen_random_dataset(1, 3, 2, seed=0)
    with pytest.raises(ValueError):
        data.split_train_test(one, 0.5, seed=0)


# --- IDX ingestion ---------------------------------------------------------

def _write_idx_images(path, arr):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x00000803))
        fh.write(struct.pack(">3I", *arr.shape))
        fh.write(arr.astype(np.uint8).tobytes())


def _write_idx_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x00000801))
        fh.write(struct.pack(">I", len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=12)
    _write_idx_images(tmp_path / "img", images)
    _write_idx_labels(tmp_path / "lab", labels)
    ds = data.load_idx_subset(tmp_path / "img", tmp_path / "lab")
    assert ds.sample_count == 12 and ds.feature_count == 28 * 28
    assert ds.features.min() >= 0 and ds.features.max() <= 1
    assert np.array_equal(ds.utility_labels, labels)
    assert np.array_equal(ds.identity_labels, labels)

    subset = data.load_idx_subset(tmp_path / "img", tmp_path / "lab", max_samples=10)
    assert subset.sample_count == 10


def test_idx_constant_image_pooling(tmp_path):
    images = np.full((3, 28, 28), 128, dtype=np.uint8)
    _write_idx_images(tmp_path / "img", images)
    _write_idx_labels(tmp_path / "lab", [0, 1, 2])
    ds = data.load_idx_subset(tmp_path / "img", tmp_path / "lab", downscale_to=7)
    assert ds.feature_count == 49
    assert np.allclose(ds.features, 128 / 255.0)


def test_idx_errors(tmp_path):
    (tmp_path / "bad").write_bytes(struct.pack(">I", 0xDEADBEEF))
    with pytest.raises(ValueError, match="magic"):
        data._read_idx(tmp_path / "bad")
    with open(tmp_path / "trunc", "wb") as fh:
        fh.write(struct.pack(">I", 0x00000801))
        fh.write(struct.pack(">I", 100))
        fh.write(b"\x00" * 10)
    with pytest.raises(ValueError, match="payload"):
        data._read_idx(tmp_path / "trunc")
    _write_idx_images(tmp_path / "img", np.zeros((4, 4, 4), dtype=np.uint8))
    _write_idx_labels(tmp_path / "lab", [0, 1])
    with pytest.raises(ValueError, match="mismatch"):
        data.load_idx_subset(tmp_path / "img", tmp_path / "lab")


# --- serialization ---------------------------------------------------------

def test_csv_round_trip(tmp_path, planted_dataset):
    path = tmp_path / "ds.csv"
    data.to_csv(planted_dataset, path)
    header = path.read_text().splitlines()[0]
    assert header == ",".join([f"f{j}" for j in range(24)] + ["y", "z"])
    back = data.from_csv(path, planted_dataset.num_utility_classes,
                         planted_dataset.num_identity_classes)
    assert np.array_equal(back.features, planted_dataset.features)
    assert np.array_equal(back.utility_labels, planted_dataset.utility_labels)
    assert np.array_equal(back.identity_labels, planted_dataset.identity_labels)


def test_snapshot_round_trip(tmp_path, planted_dataset):
    path = tmp_path / "ds.npz"
    data.save_snapshot(planted_dataset, path, seed_provenance=42)
    back = data.load_snapshot(path)
    assert np.array_equal(back.features, planted_dataset.features)
    assert back.num_identity_classes == planted_dataset.num_identity_classes
    assert back.name == planted_dataset.name


def test_dataset_invariants():
    with pytest.raises(ValueError):
        data.DualTaskDataset(np.array([[np.nan]]), [0], [0], 2, 2)
    with pytest.raises(ValueError):
        data.DualTaskDataset(np.ones((2, 2)), [0, 5], [0, 0], 2, 2)
    with pytest.raises(ValueError):
        data.DualTaskDataset(np.ones((2, 2)), [0, 1], [0], 2, 2)
    ds = data.DualTaskDataset(np.ones((2, 2)), [0, 1], [1, 0], 2, 2)
    with pytest.raises(ValueError):
        ds.features[0, 0] = 3.0  # read-only
