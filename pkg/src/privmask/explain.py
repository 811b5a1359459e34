"""Model-agnostic per-feature sensitivity scores.

Two explainer families with the same contract: Shapley values (exact
enumeration for small K, permutation sampling above) and a local surrogate
(weighted ridge fit on binary on/off perturbations). The value function is
the model's probability for the sample's own label on a composite input
where "off" features are replaced by the baseline. The all-zeros baseline
coincides with feature masking, so a feature's sensitivity and the effect
of masking it are the same counterfactual.

Privacy sensitivity s comes from explaining the identity model, utility
sensitivity u from the utility model; both are clipped to their positive
part per sample before class-wise averaging.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import models
from .models import MlpModel

EXACT_SHAPLEY_LIMIT = 15

EXPLAINERS = ("shapley-exact", "shapley-sampled", "local-surrogate")


@dataclasses.dataclass(frozen=True)
class SensitivityVector:
    """Non-negative per-feature scores for one task, one scope."""

    values: np.ndarray
    task: str                     # "identity" | "utility"
    scope: str = "per-sample"     # "per-sample" | "per-class"
    explainer: str = "shapley-sampled"
    class_id: int | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError("sensitivity values must be a 1-D vector")
        if np.any(vals < 0):
            raise ValueError("sensitivity values must be non-negative (clip first)")
        object.__setattr__(self, "values", vals)

    @property
    def feature_count(self) -> int:
        return self.values.shape[0]

    @property
    def total(self) -> float:
        return float(self.values.sum())


def _composite(x: np.ndarray, baseline: np.ndarray, on: np.ndarray) -> np.ndarray:
    # on: (..., K) boolean/0-1; rows of x where on, baseline elsewhere.
    return np.where(on, x, baseline)


def _value_fn(model: MlpModel, target_class: int):
    def v(batch_on: np.ndarray, x, baseline) -> np.ndarray:
        composites = _composite(x, baseline, batch_on.astype(bool))
        return models.predict_proba(model, composites)[:, target_class]
    return v


def shapley_exact(model: MlpModel, x: np.ndarray, baseline: np.ndarray,
                  target_class: int) -> np.ndarray:
    """Exact Shapley attributions by enumerating all feature coalitions.

    Satisfies efficiency: the attributions sum to v(all on) - v(all off).
    Limited to K <= 15 features (2^K model evaluations).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    baseline = np.asarray(baseline, dtype=np.float64).ravel()
    k = x.size
    if baseline.size != k:
        raise ValueError("baseline length must match x")
    if k > EXACT_SHAPLEY_LIMIT:
        raise ValueError(f"exact Shapley limited to K <= {EXACT_SHAPLEY_LIMIT}, got K={k}")
    value = _value_fn(model, target_class)
    subsets = np.arange(1 << k, dtype=np.int64)
    on = (subsets[:, None] >> np.arange(k)) & 1
    v = value(on, x, baseline)
    sizes = on.sum(axis=1)
    # weight for adding j to a coalition of size s: s! (K-1-s)! / K!
    log_k_fact = math.lgamma(k + 1)
    weights = np.array([math.exp(math.lgamma(s + 1) + math.lgamma(k - s) - log_k_fact)
                        for s in range(k)])
    phi = np.empty(k)
    for j in range(k):
        without = subsets[(subsets >> j) & 1 == 0]
        gain = v[without | (1 << j)] - v[without]
        phi[j] = float(weights[sizes[without]] @ gain)
    total = float(v[-1] - v[0])
    if abs(phi.sum() - total) > 1e-9:
        raise RuntimeError(f"efficiency violated: sum(phi)={phi.sum():.3e} "
                           f"vs v(full)-v(empty)={total:.3e}")
    return phi


def shapley_sampled(model: MlpModel, x: np.ndarray, baseline: np.ndarray,
                    target_class: int, num_permutations: int, seed: int,
                    return_se: bool = False):
    """Unbiased permutation-sampling Shapley estimate.

    Each permutation contributes one marginal gain per feature; the estimate
    averages over permutations. With return_se, also returns the per-feature
    standard error of that average.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    baseline = np.asarray(baseline, dtype=np.float64).ravel()
    k = x.size
    if baseline.size != k:
        raise ValueError("baseline length must match x")
    if num_permutations < 1:
        raise ValueError("num_permutations must be positive")
    rng = np.random.default_rng(seed)
    value = _value_fn(model, target_class)
    sums = np.zeros(k)
    sq_sums = np.zeros(k)
    # Batch size trades peak memory for fewer predict calls.
    chunk = max(1, 4096 // (k + 1))
    for start in range(0, num_permutations, chunk):
        p = min(chunk, num_permutations - start)
        perms = np.array([rng.permutation(k) for _ in range(p)])
        on = np.zeros((p, k + 1, k), dtype=bool)
        for t in range(k):
            on[:, t + 1] = on[:, t]
            on[np.arange(p), t + 1, perms[:, t]] = True
        v = value(on.reshape(-1, k), x, baseline).reshape(p, k + 1)
        gains = np.diff(v, axis=1)  # (p, k): gain of perms[:, t] at step t
        contrib = np.zeros((p, k))
        np.put_along_axis(contrib, perms, gains, axis=1)
        sums += contrib.sum(axis=0)
        sq_sums += (contrib * contrib).sum(axis=0)
    est = sums / num_permutations
    if not return_se:
        return est
    if num_permutations > 1:
        var = (sq_sums - num_permutations * est * est) / (num_permutations - 1)
        se = np.sqrt(np.maximum(var, 0.0) / num_permutations)
    else:
        se = np.full(k, np.inf)
    return est, se


def local_surrogate(model: MlpModel, x: np.ndarray, target_class: int,
                    num_perturbations: int, kernel_width: float | None = None,
                    ridge: float = 1.0, seed: int = 0) -> np.ndarray:
    """Weighted ridge fit on binary on/off perturbations (off = zero baseline).

    Perturbations are Bernoulli(0.5) masks (the unperturbed instance is always
    included); weights decay exponentially in squared Hamming distance from
    the full instance. Returns the linear coefficients, one per feature.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    k = x.size
    if num_perturbations < k:
        raise ValueError(f"need at least K={k} perturbations, got {num_perturbations}")
    if ridge <= 0:
        raise ValueError("ridge must be positive (keeps the system non-singular)")
    if kernel_width is None:
        kernel_width = 0.75 * math.sqrt(k)
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, size=(num_perturbations, k)).astype(np.float64)
    z[0] = 1.0
    baseline = np.zeros(k)
    preds = _value_fn(model, target_class)(z, x, baseline)
    hamming = k - z.sum(axis=1)
    w = np.exp(-(hamming ** 2) / (kernel_width ** 2))
    design = np.hstack([z, np.ones((num_perturbations, 1))])  # intercept last
    wd = design * w[:, None]
    gram = design.T @ wd
    penalty = np.eye(k + 1) * ridge
    penalty[k, k] = 0.0  # intercept unpenalized
    coefs = np.linalg.solve(gram + penalty, wd.T @ preds)
    return coefs[:k]


def clip_positive(values: np.ndarray, task: str, scope: str = "per-sample",
                  explainer: str = "shapley-sampled",
                  class_id: int | None = None) -> SensitivityVector:
    """Elementwise max(v, 0): only positive contributions count as sensitivity."""
    clipped = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    return SensitivityVector(clipped, task, scope, explainer, class_id)


def class_aggregate(per_sample_values: np.ndarray, class_labels: np.ndarray,
                    task: str, explainer: str) -> dict[int, SensitivityVector]:
    """Arithmetic mean of per-sample (clipped) vectors within each class."""
    per_sample_values = np.atleast_2d(np.asarray(per_sample_values, dtype=np.float64))
    class_labels = np.asarray(class_labels, dtype=np.int64).ravel()
    if per_sample_values.shape[0] != class_labels.shape[0]:
        raise ValueError("one vector per sample required")
    out = {}
    for c in np.unique(class_labels):
        rows = per_sample_values[class_labels == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {c} has no samples")
        out[int(c)] = SensitivityVector(rows.mean(axis=0), task, "per-class",
                                        explainer, int(c))
    return out


def explain_dataset(model: MlpModel, features: np.ndarray, labels: np.ndarray,
                    explainer: str, seed: int = 0, num_permutations: int = 128,
                    num_perturbations: int | None = None,
                    kernel_width: float | None = None,
                    ridge: float = 1.0) -> np.ndarray:
    """Signed attribution matrix (N, K): one explanation per sample, each
    targeting the sample's own label. Masked/off features use the zero baseline."""
    if explainer not in EXPLAINERS:
        raise ValueError(f"explainer must be one of {EXPLAINERS}")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, k = features.shape
    baseline = np.zeros(k)
    if num_perturbations is None:
        num_perturbations = num_permutations * (k + 1)
    out = np.empty((n, k))
    for i in range(n):
        sample_seed = _sample_seed(seed, i)
        if explainer == "shapley-exact":
            out[i] = shapley_exact(model, features[i], baseline, int(labels[i]))
        elif explainer == "shapley-sampled":
            out[i] = shapley_sampled(model, features[i], baseline, int(labels[i]),
                                     num_permutations, sample_seed)
        else:
            out[i] = local_surrogate(model, features[i], int(labels[i]),
                                     num_perturbations, kernel_width, ridge,
                                     sample_seed)
    return out


def _sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def save_sensitivities(vectors: dict[int, SensitivityVector], path) -> None:
    """CSV dump: class_id, feature_id, value, task, explainer."""
    with open(path, "w") as fh:
        fh.write("class_id,feature_id,value,task,explainer\n")
        for class_id in sorted(vectors):
            vec = vectors[class_id]
            for j, v in enumerate(vec.values):
                fh.write(f"{class_id},{j},{repr(float(v))},{vec.task},{vec.explainer}\n")


def load_sensitivities(path) -> dict[int, "SensitivityVector"]:
    rows = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "class_id,feature_id,value,task,explainer":
            raise ValueError(f"unexpected sensitivity CSV header: {header}")
        for line in fh:
            cid, fid, val, task, explainer = line.strip().split(",")
            rows.setdefault((int(cid), task, explainer), {})[int(fid)] = float(val)
    out = {}
    for (cid, task, explainer), feats in rows.items():
        values = np.array([feats[j] for j in range(len(feats))])
        out[cid] = SensitivityVector(values, task, "per-class", explainer, cid)
    return out
