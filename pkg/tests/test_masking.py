import itertools
import logging

import numpy as np
import pytest

from privmask import data, masking, models
from privmask.masking import CAPACITY_MARGIN
from privmask.models import ModelSpec, TrainConfig


def brute_force_best(u, s, capacity):
    """Oracle: direct evaluation of every mask."""
    k = len(u)
    best_value, best_mask = -1.0, None
    for bits in itertools.product((0, 1), repeat=k):
        weight = sum(s[j] for j in range(k) if bits[j])
        if weight <= capacity:
            value = sum(u[j] for j in range(k) if bits[j])
            if value > best_value:
                best_value, best_mask = value, bits
    return best_value, best_mask


def test_disjoint_supports_keep_utility_drop_privacy():
    u = np.array([1.0, 2.0, 0.0, 0.0, 0.0])
    s = np.array([0.0, 0.0, 3.0, 1.0, 2.0])
    sol = masking.optimize_mask(u, s, alpha=0.9)
    assert sol.mask[0] == 1 and sol.mask[1] == 1
    assert sol.budget == 0.0
    assert sol.objective == 3.0


def test_alpha_zero_forces_strict_drop():
    u = np.array([1.0, 1.0, 1.0])
    s = np.array([0.5, 0.5, 0.5])
    sol = masking.optimize_mask(u, s, alpha=0.0)
    # capacity is just below sum(s): the all-ones mask violates the strict
    # inequality, so at least one feature must go.
    assert sol.mask.sum() == 2
    assert sol.budget < s.sum()


def test_alpha_near_one_keeps_only_free_features():
    u = np.array([5.0, 1.0, 1.0])
    s = np.array([0.0, 2.0, 3.0])
    sol = masking.optimize_mask(u, s, alpha=0.9999)
    assert np.array_equal(sol.mask, [1, 0, 0])


def test_zero_privacy_vector_keeps_everything():
    sol = masking.optimize_mask(np.array([1.0, 0.0]), np.zeros(2), alpha=0.5)
    assert np.array_equal(sol.mask, [1, 1])
    assert sol.method == "keep-all"


def test_exact_solver_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(30):
        k = int(rng.integers(4, 13))
        # dyadic grids make float sums order-independent, so equality is exact
        u = rng.integers(0, 128, size=k) / 64.0
        s = rng.integers(0, 128, size=k) / 64.0
        alpha = float(rng.choice([0.0, 0.25, 0.5, 0.75]))
        sol = masking.optimize_mask(u, s, alpha)
        if s.sum() == 0:
            continue
        capacity = max((1 - alpha) * s.sum() - CAPACITY_MARGIN, 0.0)
        oracle_value, _ = brute_force_best(u, s, capacity)
        assert sol.objective == oracle_value
        assert sol.budget <= capacity


def test_optimized_budget_satisfies_strict_inequality():
    rng = np.random.default_rng(1)
    for _ in range(20):
        u = rng.uniform(size=10)
        s = rng.uniform(size=10)
        for alpha in (0.0, 0.3, 0.7):
            sol = masking.optimize_mask(u, s, alpha)
            assert sol.mask @ s < (1 - alpha) * s.sum()


def test_greedy_meets_half_lp_bound():
    rng = np.random.default_rng(2)
    for _ in range(50):
        k = 64
        u = rng.uniform(size=k)
        s = rng.uniform(size=k)
        sol = masking.optimize_mask(u, s, alpha=float(rng.uniform(0.1, 0.9)))
        assert sol.method == "greedy"
        assert sol.lp_bound is not None
        assert sol.objective >= 0.5 * sol.lp_bound - 1e-12
        assert sol.objective <= sol.lp_bound + 1e-12


def test_greedy_agrees_with_exact_on_easy_instances():
    # Identical ratios: greedy fills by weight and lands on the exact optimum.
    u = np.array([4.0, 2.0, 1.0, 1.0])
    s = np.array([4.0, 2.0, 1.0, 1.0])
    exact = masking.optimize_mask(u, s, 0.5)
    greedy = masking.optimize_mask(u, s, 0.5, exact_limit=0)
    assert greedy.objective == exact.objective


def test_top_k_mask():
    s = np.array([3.0, 1.0, 2.0])
    assert np.array_equal(masking.top_k_mask(s, 0), [1, 1, 1])
    assert np.array_equal(masking.top_k_mask(s, 100), [0, 0, 0])
    # ceil(3 * 0.34) = 2 masked: the two largest sensitivities (features 0, 2)
    assert np.array_equal(masking.top_k_mask(s, 34), [0, 1, 0])
    # ties: lower feature index masked first
    tied = np.array([1.0, 2.0, 2.0, 0.5])
    assert np.array_equal(masking.top_k_mask(tied, 50), [1, 0, 0, 1])
    with pytest.raises(ValueError):
        masking.top_k_mask(s, 101)


def test_random_mask():
    m = masking.random_mask(20, 0.3, seed=0)
    assert (m == 0).sum() == 6
    assert np.array_equal(masking.random_mask(20, 0.0, seed=1), np.ones(20))
    assert np.array_equal(masking.random_mask(20, 0.3, seed=5),
                          masking.random_mask(20, 0.3, seed=5))
    different = [tuple(masking.random_mask(20, 0.5, seed=s)) for s in range(8)]
    assert len(set(different)) > 1
    with pytest.raises(ValueError):
        masking.random_mask(20, 1.2, seed=0)


@pytest.fixture(scope="module")
def masked_setup():
    s = data.PlantedStructure((0, 1, 2), (3, 4, 5), noise_std=0.1)
    ds = data.gen_synthetic_dual_task(150, 8, 3, 2, s, seed=4)
    classes = np.unique(ds.identity_labels)
    return ds, classes


def test_apply_mask_identity(masked_setup):
    ds, classes = masked_setup
    ones = masking.uniform_mask_set(np.ones(8, dtype=np.uint8), classes, "random")
    out = masking.apply_mask(ds, ones, "identity")
    assert np.array_equal(out.features, ds.features)


def test_apply_mask_zeros_destroys_signal(masked_setup):
    ds, classes = masked_setup
    zeros = masking.uniform_mask_set(np.zeros(8, dtype=np.uint8), classes, "random")
    out = masking.apply_mask(ds, zeros, "identity")
    assert np.all(out.features == 0)
    model = models.train_plain(out.features, out.utility_labels, ModelSpec((8,)),
                               TrainConfig(0.2, 30, 32, seed=0), num_classes=2)
    acc = models.accuracy(model, out.features, out.utility_labels)
    majority = max(np.bincount(ds.utility_labels)) / ds.sample_count
    assert acc == pytest.approx(majority, abs=0.02)


def test_apply_mask_zeroes_exactly_where_masked(masked_setup):
    ds, classes = masked_setup
    mask = np.array([1, 0, 1, 0, 1, 0, 1, 0], dtype=np.uint8)
    ms = masking.uniform_mask_set(mask, classes, "top-k")
    out = masking.apply_mask(ds, ms, "identity")
    assert np.all(out.features[:, mask == 0] == 0)
    assert np.array_equal(out.features[:, mask == 1], ds.features[:, mask == 1])
    # original untouched; application idempotent
    assert not np.all(ds.features[:, 1] == 0)
    twice = masking.apply_mask(out, ms, "identity")
    assert np.array_equal(twice.features, out.features)


def test_apply_mask_class_wise(masked_setup):
    ds, classes = masked_setup
    masks = {int(c): np.ones(8, dtype=np.uint8) for c in classes}
    masks[0] = np.zeros(8, dtype=np.uint8)
    ms = masking.ClassMaskSet(masks, 0.2, "optimized")
    out = masking.apply_mask(ds, ms, "identity")
    zeroed = ds.identity_labels == 0
    assert np.all(out.features[zeroed] == 0)
    assert np.array_equal(out.features[~zeroed], ds.features[~zeroed])


def test_apply_mask_missing_class(masked_setup):
    ds, _ = masked_setup
    ms = masking.ClassMaskSet({0: np.ones(8, dtype=np.uint8)}, 0.2, "optimized")
    with pytest.raises(KeyError):
        masking.apply_mask(ds, ms, "identity")


def _surrogates(ds, seed=0):
    cfg = TrainConfig(0.2, 50, 32, seed=seed, early_stop_patience=6)
    ident = models.train_plain(ds.features, ds.identity_labels, ModelSpec((16,)),
                               cfg, num_classes=ds.num_identity_classes)
    cfg2 = TrainConfig(0.2, 50, 32, seed=seed + 1, early_stop_patience=6)
    util = models.train_plain(ds.features, ds.utility_labels, ModelSpec((16,)),
                              cfg2, num_classes=ds.num_utility_classes)
    return ident, util


def test_pipeline_masks_identity_features_keeps_utility(masked_setup):
    # Disjoint planted sets: for classes carrying positive identity evidence,
    # identity-only features are masked and utility-only features kept. The
    # lowest-quantile class is identified by the absence of signal, so its
    # positive-clipped sensitivity is near zero and only the (scale-invariant)
    # budget contract applies to it.
    ds, _ = masked_setup
    ident, util = _surrogates(ds)
    masked, mask_set = masking.feature_masking_pipeline(
        ds, ident, util, "shapley-sampled", alpha=0.5, seed=9,
        num_permutations=64)
    raw_s = np.maximum(explain_util_sensitivities(ident, ds), 0.0)
    totals = {c: raw_s[ds.identity_labels == c].mean(axis=0).sum()
              for c in mask_set.masks}
    informative = [c for c, t in totals.items() if t >= 0.5 * np.median(list(totals.values()))]
    assert len(informative) >= 2
    for c in informative:
        mask = mask_set.masks[c]
        assert np.all(mask[[3, 4, 5]] == 1), f"class {c} masked a utility feature"
        assert np.any(mask[[0, 1, 2]] == 0), f"class {c} kept every identity feature"
    assert (masked.features == 0).any()
    assert mask_set.method == "optimized"
    assert not mask_set.fallbacks


def explain_util_sensitivities(model, ds):
    from privmask import explain
    return explain.explain_dataset(model, ds.features, ds.identity_labels,
                                   "shapley-sampled", seed=9, num_permutations=64)


def test_pipeline_budget_consistency(masked_setup):
    ds, _ = masked_setup
    ident, util = _surrogates(ds)
    _, mask_set = masking.feature_masking_pipeline(
        ds, ident, util, "shapley-sampled", alpha=0.3, seed=9,
        num_permutations=64)
    assert set(mask_set.budget_used) == set(mask_set.masks)
    for c in mask_set.masks:
        assert mask_set.budget_used[c] >= 0


def test_pipeline_deterministic(masked_setup):
    ds, _ = masked_setup
    ident, util = _surrogates(ds)
    m1, s1 = masking.feature_masking_pipeline(ds, ident, util, "shapley-sampled",
                                              0.4, seed=3, num_permutations=32)
    m2, s2 = masking.feature_masking_pipeline(ds, ident, util, "shapley-sampled",
                                              0.4, seed=3, num_permutations=32)
    assert np.array_equal(m1.features, m2.features)
    for c in s1.masks:
        assert np.array_equal(s1.masks[c], s2.masks[c])


def test_pipeline_fallback_on_degenerate_sensitivities(masked_setup, caplog):
    # Zeroed models yield all-zero attributions on both tasks, tripping the
    # top-k fallback for every class.
    ds, _ = masked_setup
    dead = models.init_model(8, 3, ModelSpec((4,)), seed=0)
    for w, b in zip(dead.weights, dead.biases):
        w[:] = 0.0
        b[:] = 0.0
    dead_util = models.init_model(8, 2, ModelSpec((4,)), seed=0)
    for w, b in zip(dead_util.weights, dead_util.biases):
        w[:] = 0.0
        b[:] = 0.0
    with caplog.at_level(logging.WARNING):
        masked, mask_set = masking.feature_masking_pipeline(
            ds, dead, dead_util, "shapley-exact", alpha=0.3, seed=1)
    assert set(mask_set.fallbacks) == set(mask_set.masks)
    assert "falling back" in caplog.text
    # fallback masks ceil(8 * 0.30) = 3 features per class
    for mask in mask_set.masks.values():
        assert (mask == 0).sum() == 3


def test_mask_set_round_trip(tmp_path, masked_setup):
    ds, _ = masked_setup
    ident, util = _surrogates(ds)
    _, mask_set = masking.feature_masking_pipeline(
        ds, ident, util, "shapley-sampled", alpha=0.4, seed=9,
        num_permutations=32)
    path = tmp_path / "masks.csv"
    masking.save_mask_set(mask_set, path)
    header = path.read_text().splitlines()[0]
    assert header == "class_id,feature_id,keep"
    back = masking.load_mask_set(path)
    assert back.alpha == mask_set.alpha
    assert back.method == mask_set.method
    for c in mask_set.masks:
        assert np.array_equal(back.masks[c], mask_set.masks[c])
        assert back.budget_used[c] == pytest.approx(mask_set.budget_used[c])


def test_mask_set_validation():
    with pytest.raises(ValueError):
        masking.ClassMaskSet({0: np.array([0, 2, 1])}, 0.1, "optimized")
