import itertools
import math

import numpy as np
import pytest

from privmask import explain, models
from privmask.models import ModelSpec

ZEROS8 = np.zeros(8)


def brute_force_shapley(model, x, baseline, target_class):
    """Independent oracle: direct evaluation of the Shapley formula."""
    k = len(x)
    phi = np.zeros(k)
    for j in range(k):
        others = [i for i in range(k) if i != j]
        for size in range(k):
            weight = (math.factorial(size) * math.factorial(k - size - 1)
                      / math.factorial(k))
            for subset in itertools.combinations(others, size):
                on = np.zeros(k, dtype=bool)
                on[list(subset)] = True
                v_without = models.predict_proba(
                    model, np.where(on, x, baseline))[target_class]
                on[j] = True
                v_with = models.predict_proba(
                    model, np.where(on, x, baseline))[target_class]
                phi[j] += weight * (v_with - v_without)
    return phi


def _ignoring_model(k, dead_feature, seed=0):
    model = models.init_model(k, 2, ModelSpec((4,)), seed=seed)
    model.weights[0][:, dead_feature] = 0.0
    return model


def test_exact_matches_brute_force_formula():
    rng = np.random.default_rng(0)
    model = models.init_model(5, 3, ModelSpec((4,), "tanh"), seed=1)
    x = rng.uniform(size=5)
    baseline = np.zeros(5)
    fast = explain.shapley_exact(model, x, baseline, 2)
    slow = brute_force_shapley(model, x, baseline, 2)
    assert np.allclose(fast, slow, atol=1e-12)


def test_exact_efficiency_on_random_instances():
    rng = np.random.default_rng(3)
    for seed in range(5):
        model = models.init_model(6, 2, ModelSpec((5,)), seed=seed)
        x = rng.uniform(size=6)
        baseline = rng.uniform(size=6) * 0.1
        phi = explain.shapley_exact(model, x, baseline, 0)
        v_full = models.predict_proba(model, x)[0]
        v_empty = models.predict_proba(model, baseline)[0]
        assert abs(phi.sum() - (v_full - v_empty)) <= 1e-9


def test_exact_null_player():
    model = _ignoring_model(6, dead_feature=2)
    phi = explain.shapley_exact(model, np.full(6, 0.7), np.zeros(6), 1)
    assert abs(phi[2]) <= 1e-9


def test_exact_symmetry():
    # Two features wired identically with equal values get equal attributions.
    model = models.init_model(4, 2, ModelSpec((3,)), seed=2)
    model.weights[0][:, 1] = model.weights[0][:, 0]
    x = np.array([0.6, 0.6, 0.3, 0.9])
    phi = explain.shapley_exact(model, x, np.zeros(4), 0)
    assert phi[0] == pytest.approx(phi[1], abs=1e-12)


def test_exact_enumeration_limit():
    model = models.init_model(16, 2, ModelSpec((2,)), seed=0)
    with pytest.raises(ValueError, match="exact Shapley"):
        explain.shapley_exact(model, np.zeros(16), np.zeros(16), 0)


def test_sampled_agrees_with_exact_within_3se():
    rng = np.random.default_rng(4)
    model = models.init_model(8, 3, ModelSpec((6,)), seed=5)
    x = rng.uniform(size=8)
    exact = explain.shapley_exact(model, x, ZEROS8, 1)
    est, se = explain.shapley_sampled(model, x, ZEROS8, 1, num_permutations=2000,
                                      seed=11, return_se=True)
    assert np.all(np.abs(est - exact) <= 3 * se + 1e-9)


def test_sampled_variance_halves_with_double_budget():
    rng = np.random.default_rng(5)
    model = models.init_model(6, 2, ModelSpec((4,)), seed=6)
    x = rng.uniform(size=6)

    def spread(perms):
        runs = np.array([explain.shapley_sampled(model, x, np.zeros(6), 0,
                                                 perms, seed=s)
                         for s in range(12)])
        return runs.var(axis=0).mean()

    v1, v2 = spread(100), spread(200)
    assert 0.3 < v2 / v1 < 0.85  # approx 0.5 with sampling slack


def test_sampled_null_player():
    model = _ignoring_model(6, dead_feature=4, seed=7)
    est, se = explain.shapley_sampled(model, np.full(6, 0.5), np.zeros(6), 0,
                                      500, seed=3, return_se=True)
    assert abs(est[4]) <= 3 * se[4] + 1e-9


def test_local_surrogate_recovers_linear_signs():
    # A single-layer two-class model is logistic in x: coefficient signs of
    # the surrogate must match the true weight differences.
    w = np.array([[1.5, -2.0, 0.0, 0.8], [0.0, 0.0, 0.0, 0.0]])
    model = models.MlpModel((4, 2), [w], [np.zeros(2)], "relu")
    x = np.array([0.9, 0.8, 0.7, 0.9])
    coefs = explain.local_surrogate(model, x, 0, num_perturbations=2000,
                                    ridge=1e-3, seed=0)
    true_effect = w[0] - w[1]
    for j in (0, 1, 3):
        assert np.sign(coefs[j]) == np.sign(true_effect[j])
    assert abs(coefs[2]) < 0.05


def test_local_surrogate_uniform_weights_in_wide_kernel_limit():
    model = models.init_model(5, 2, ModelSpec((4,)), seed=1)
    x = np.random.default_rng(2).uniform(size=5)
    wide = explain.local_surrogate(model, x, 0, 400, kernel_width=1e9,
                                   ridge=1e-2, seed=9)
    # Oracle: plain (uniform-weight) ridge fit on the same perturbations.
    rng = np.random.default_rng(9)
    z = rng.integers(0, 2, size=(400, 5)).astype(np.float64)
    z[0] = 1.0
    preds = np.array([models.predict_proba(model, z[i] * x)[0] for i in range(400)])
    design = np.hstack([z, np.ones((400, 1))])
    penalty = np.eye(6) * 1e-2
    penalty[5, 5] = 0.0
    ref = np.linalg.solve(design.T @ design + penalty, design.T @ preds)[:5]
    assert np.allclose(wide, ref, atol=1e-9)


def test_local_surrogate_validation():
    model = models.init_model(5, 2, ModelSpec((4,)), seed=1)
    with pytest.raises(ValueError, match="perturbations"):
        explain.local_surrogate(model, np.zeros(5), 0, num_perturbations=4)
    with pytest.raises(ValueError, match="ridge"):
        explain.local_surrogate(model, np.zeros(5), 0, 10, ridge=0.0)


def test_sampled_shapley_more_stable_than_surrogate():
    # Stability ranking at an equal forward-evaluation budget, on trained
    # (genuinely nonlinear) models; the full 10-instance version runs in the
    # acceptance suite.
    from privmask import data
    s = data.PlantedStructure((0, 1, 2), (2, 3, 4), noise_std=0.2)
    ds = data.gen_synthetic_dual_task(200, 8, 3, 3, s, seed=1)
    wins = 0
    for instance in range(6):
        model = models.train_plain(ds.features, ds.identity_labels,
                                   ModelSpec((16,)),
                                   models.TrainConfig(0.2, 40, 32, seed=instance),
                                   num_classes=3)
        x = ds.features[instance]
        y = int(ds.identity_labels[instance])
        budget_perms = 60
        budget_evals = budget_perms * 9
        shap_runs = np.array([explain.shapley_sampled(model, x, ZEROS8, y,
                                                      budget_perms, seed=s2)
                              for s2 in range(8)])
        lime_runs = np.array([explain.local_surrogate(model, x, y, budget_evals,
                                                      ridge=1e-2, seed=s2)
                              for s2 in range(8)])
        if shap_runs.std(axis=0).mean() <= lime_runs.std(axis=0).mean():
            wins += 1
    assert wins >= 4


def test_clip_positive():
    vec = explain.clip_positive(np.array([-1.0, 0.0, 2.0]), task="identity")
    assert np.array_equal(vec.values, [0.0, 0.0, 2.0])
    assert vec.task == "identity"
    all_neg = explain.clip_positive(np.array([-3.0, -0.1]), task="utility")
    assert np.array_equal(all_neg.values, [0.0, 0.0])
    again = explain.clip_positive(vec.values, task="identity")
    assert np.array_equal(again.values, vec.values)  # idempotent


def test_class_aggregate():
    vals = np.array([[0.0, 2.0], [2.0, 0.0], [4.0, 4.0]])
    labels = np.array([0, 0, 1])
    agg = explain.class_aggregate(vals, labels, "identity", "shapley-exact")
    assert np.array_equal(agg[0].values, [1.0, 1.0])
    assert np.array_equal(agg[1].values, [4.0, 4.0])
    assert agg[0].scope == "per-class" and agg[0].class_id == 0
    assert np.all(agg[0].values >= 0)
    single = explain.class_aggregate(vals[:1], labels[:1], "utility", "shapley-exact")
    assert np.array_equal(single[0].values, vals[0])


def test_planted_structure_recovery():
    # Mean identity-task sensitivity over planted features must exceed the
    # mean over non-planted features, across seeds (one-sided sign test).
    from privmask import data
    wins, trials = 0, 20
    for seed in range(trials):
        s = data.PlantedStructure((0, 1, 2), (3, 4, 5), noise_std=0.1)
        ds = data.gen_synthetic_dual_task(150, 9, 3, 3, s, seed=seed)
        model = models.train_plain(ds.features, ds.identity_labels,
                                   ModelSpec((12,)),
                                   models.TrainConfig(0.2, 40, 32, seed=seed),
                                   num_classes=3)
        raw = explain.explain_dataset(model, ds.features[:60], ds.identity_labels[:60],
                                      "shapley-sampled", seed=seed,
                                      num_permutations=32)
        clipped = np.maximum(raw, 0.0).mean(axis=0)
        if clipped[:3].mean() > clipped[3:].mean():
            wins += 1
    # One-sided binomial: 20 fair coins give >= 17 heads with p < 0.002.
    assert wins >= 17


def test_explain_dataset_modes_and_validation(small_model):
    model, x, y = small_model
    for explainer in ("shapley-exact", "shapley-sampled", "local-surrogate"):
        out = explain.explain_dataset(model, x[:4], y[:4], explainer, seed=0,
                                      num_permutations=16)
        assert out.shape == (4, 6)
        assert np.all(np.isfinite(out))
    with pytest.raises(ValueError):
        explain.explain_dataset(model, x[:4], y[:4], "gradient", seed=0)


def test_sensitivity_csv_round_trip(tmp_path):
    vecs = {
        0: explain.SensitivityVector(np.array([0.5, 0.0, 1.25]), "identity",
                                     "per-class", "shapley-sampled", 0),
        1: explain.SensitivityVector(np.array([0.0, 2.0, 0.75]), "identity",
                                     "per-class", "shapley-sampled", 1),
    }
    path = tmp_path / "sens.csv"
    explain.save_sensitivities(vecs, path)
    back = explain.load_sensitivities(path)
    for c in vecs:
        assert np.array_equal(back[c].values, vecs[c].values)
        assert back[c].task == "identity"


def test_sensitivity_vector_validation():
    with pytest.raises(ValueError):
        explain.SensitivityVector(np.array([-0.1, 0.2]), "identity")
    with pytest.raises(ValueError):
        explain.SensitivityVector(np.ones((2, 2)), "identity")


def test_exact_shapley_cost_doubles_per_feature():
    # 2^K model evaluations: log2(time) regressed on K should have a slope
    # near 1 (loose bound; timings are noisy).
    import time
    rng = np.random.default_rng(0)
    times = []
    for k in (8, 10, 12):
        model = models.init_model(k, 2, ModelSpec((4,)), seed=k)
        x = rng.uniform(size=k)
        best = math.inf
        for _ in range(3):
            t0 = time.perf_counter()
            explain.shapley_exact(model, x, np.zeros(k), 0)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    slope = np.polyfit([8, 10, 12], np.log2(times), 1)[0]
    assert slope > 0.4, (times, slope)
