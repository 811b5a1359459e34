"""Class-wise binary feature masks: optimized, top-k, and random.

The optimized mask solves, per class, the 0/1 knapsack
    maximize m . u   subject to   m . s < (1 - alpha) * sum(s)
where u and s are the class's utility and privacy sensitivity vectors and
alpha is the owner's desired privacy-preservation level. Small instances are
solved exactly; large ones fall back to ratio-greedy with an LP-relaxation
upper bound reported alongside. An end-to-end pipeline explains both task
models, aggregates sensitivities class-wise, optimizes one mask per identity
class, and applies it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import explain
from .data import DualTaskDataset
from .explain import SensitivityVector
from .models import MlpModel

log = logging.getLogger(__name__)

# Strict-inequality margin: the budget constraint is m.s < capacity, honored
# by shaving the capacity.
CAPACITY_MARGIN = 1e-9

EXACT_SOLVE_LIMIT = 20

MASK_METHODS = ("optimized", "top-k", "random")

FALLBACK_TOP_K_PERCENT = 30.0


class MaskOptimizationError(RuntimeError):
    """The per-class optimizer could not produce a usable mask."""


@dataclasses.dataclass(frozen=True)
class MaskSolution:
    mask: np.ndarray          # (K,) uint8; 1 = keep
    objective: float          # mask . u
    budget: float             # mask . s
    method: str               # "exact" | "greedy" | "keep-all"
    lp_bound: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=np.uint8))


def _values_of(vec) -> np.ndarray:
    values = vec.values if isinstance(vec, SensitivityVector) else np.asarray(vec, dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("sensitivity vectors must be non-negative")
    return np.asarray(values, dtype=np.float64)


def _solve_exact(u: np.ndarray, s: np.ndarray, capacity: float) -> MaskSolution:
    k = u.size
    best_value, best_weight, best_mask = -1.0, math.inf, 0
    subsets = np.arange(1 << min(k, 16), dtype=np.int64)
    for high in range(1 << max(0, k - 16)):
        masks = (high << 16) | subsets if k > 16 else subsets
        bits = ((masks[:, None] >> np.arange(k)) & 1).astype(np.float64)
        weights = bits @ s
        feasible = weights <= capacity
        if not feasible.any():
            continue
        values = bits @ u
        values[~feasible] = -np.inf
        order = np.argmax(values)
        # Among equal-value candidates prefer smaller weight, then smaller id.
        tied = np.flatnonzero(values >= values[order] - 0.0)
        tied = tied[np.lexsort((masks[tied], weights[tied]))]
        cand = tied[0]
        if (values[cand], -weights[cand], -masks[cand]) > (best_value, -best_weight, -best_mask):
            best_value = float(values[cand])
            best_weight = float(weights[cand])
            best_mask = int(masks[cand])
    mask = ((best_mask >> np.arange(k)) & 1).astype(np.uint8)
    return MaskSolution(mask, best_value, best_weight, "exact")


def _solve_greedy(u: np.ndarray, s: np.ndarray, capacity: float) -> MaskSolution:
    k = u.size
    keep = np.zeros(k, dtype=np.uint8)
    free = s <= 0.0
    keep[free] = 1
    candidates = np.flatnonzero(~free & (s <= capacity))
    # Ratio-greedy over affordable items, skipping ones that no longer fit.
    order = candidates[np.lexsort((candidates, -u[candidates] / s[candidates]))]
    weight = 0.0
    for j in order:
        if weight + s[j] <= capacity:
            keep[j] = 1
            weight += s[j]
    greedy_value = float(u @ keep)
    # Classic 1/2-of-LP guarantee needs "better of greedy and best single item".
    if candidates.size:
        best_single = candidates[np.argmax(u[candidates])]
        single_value = float(u[free].sum() + u[best_single])
        if single_value > greedy_value:
            keep = np.zeros(k, dtype=np.uint8)
            keep[free] = 1
            keep[best_single] = 1
            greedy_value = single_value
            weight = float(s[best_single])
    lp = float(u[free].sum())
    remaining = capacity
    for j in order:
        if s[j] <= remaining:
            lp += u[j]
            remaining -= s[j]
        else:
            lp += u[j] * remaining / s[j]
            break
    return MaskSolution(keep, greedy_value, float(s @ keep), "greedy", lp_bound=lp)


def optimize_mask(utility, privacy, alpha: float,
                  exact_limit: int = EXACT_SOLVE_LIMIT) -> MaskSolution:
    """Keep-mask maximizing kept utility under the privacy budget constraint.

    Exact solution (all 2^K masks evaluated) for K <= exact_limit; ratio
    greedy with the best-single-item rule and an LP-relaxation upper bound
    beyond that. A zero privacy vector means every feature is free to keep.
    """
    u = _values_of(utility)
    s = _values_of(privacy)
    if u.size != s.size:
        raise ValueError("utility and privacy vectors must have equal length")
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    total = float(s.sum())
    if total == 0.0:
        ones = np.ones(u.size, dtype=np.uint8)
        return MaskSolution(ones, float(u.sum()), 0.0, "keep-all")
    # The empty mask (weight 0) always satisfies the strict inequality, so the
    # shaved capacity never goes negative.
    capacity = max((1.0 - alpha) * total - CAPACITY_MARGIN, 0.0)
    if u.size <= exact_limit:
        return _solve_exact(u, s, capacity)
    return _solve_greedy(u, s, capacity)


def top_k_mask(privacy, k_percent: float) -> np.ndarray:
    """Mask (zero out) the ceil(K * k/100) features with the largest privacy
    sensitivity; ties mask the lower feature index first."""
    s = _values_of(privacy)
    if not 0.0 <= k_percent <= 100.0:
        raise ValueError(f"k_percent must be in [0, 100], got {k_percent}")
    k = s.size
    n_mask = math.ceil(k * k_percent / 100.0)
    mask = np.ones(k, dtype=np.uint8)
    order = np.lexsort((np.arange(k), -s))
    mask[order[:n_mask]] = 0
    return mask


def random_mask(num_features: int, fraction: float, seed: int) -> np.ndarray:
    """Mask exactly floor(K * fraction) uniformly chosen features."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    n_mask = int(math.floor(num_features * fraction))
    mask = np.ones(num_features, dtype=np.uint8)
    chosen = np.random.default_rng(seed).choice(num_features, size=n_mask, replace=False)
    mask[chosen] = 0
    return mask


@dataclasses.dataclass
class ClassMaskSet:
    """One keep-mask per class, with solver provenance."""

    masks: dict[int, np.ndarray]
    alpha: float
    method: str
    budget_used: dict[int, float] = dataclasses.field(default_factory=dict)
    lp_bounds: dict[int, float] = dataclasses.field(default_factory=dict)
    fallbacks: dict[int, str] = dataclasses.field(default_factory=dict)
    explainer: str = ""
    seed: int | None = None

    def __post_init__(self):
        for c, m in self.masks.items():
            m = np.asarray(m, dtype=np.uint8)
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"mask for class {c} is not binary")
            self.masks[c] = m

    @property
    def masked_counts(self) -> dict[int, int]:
        return {c: int((m == 0).sum()) for c, m in self.masks.items()}


def uniform_mask_set(mask: np.ndarray, class_ids, method: str,
                     alpha: float = 0.0, seed: int | None = None) -> ClassMaskSet:
    """The same mask for every class (random / global top-k variants)."""
    mask = np.asarray(mask, dtype=np.uint8)
    return ClassMaskSet({int(c): mask.copy() for c in class_ids}, alpha, method,
                        seed=seed)


def apply_mask(dataset: DualTaskDataset, mask_set: ClassMaskSet,
               class_source: str = "identity") -> DualTaskDataset:
    """Elementwise-multiply each sample's features by its class's keep-mask."""
    labels = dataset.labels_for(class_source)
    present = np.unique(labels)
    missing = [int(c) for c in present if int(c) not in mask_set.masks]
    if missing:
        raise KeyError(f"no mask for {class_source} classes {missing}")
    mask_matrix = np.empty_like(dataset.features)
    for c in present:
        mask_matrix[labels == c] = mask_set.masks[int(c)]
    return DualTaskDataset(dataset.features * mask_matrix,
                           dataset.utility_labels, dataset.identity_labels,
                           num_utility_classes=dataset.num_utility_classes,
                           num_identity_classes=dataset.num_identity_classes,
                           name=f"{dataset.name}:{mask_set.method}-masked")


def _needs_fallback(u: np.ndarray, s: np.ndarray, alpha: float) -> str | None:
    total = float(s.sum())
    if total == 0.0 and float(u.sum()) == 0.0:
        return "zero sensitivity on both tasks"
    positive = s[s > 0]
    if positive.size:
        capacity = (1.0 - alpha) * total - CAPACITY_MARGIN
        if capacity < positive.min() and float(u[s <= 0].sum()) == 0.0:
            return "capacity below every positive-sensitivity feature carrying utility"
    return None


def _paired_utility(u_by_class: dict[int, SensitivityVector],
                    identity_labels: np.ndarray, utility_labels: np.ndarray,
                    identity_class: int, global_u: np.ndarray | None) -> np.ndarray:
    """Utility vector paired to an identity class: the class-wise utility
    aggregates averaged under the utility-label distribution of that identity
    class's samples (or the dataset-wide aggregate with --global-u)."""
    if global_u is not None:
        return global_u
    rows = utility_labels[identity_labels == identity_class]
    out = None
    for y in np.unique(rows):
        weight = float((rows == y).mean())
        term = weight * u_by_class[int(y)].values
        out = term if out is None else out + term
    return out


def feature_masking_pipeline(dataset: DualTaskDataset, identity_model: MlpModel,
                             utility_model: MlpModel, explainer_choice: str,
                             alpha: float, seed: int,
                             fit_dataset: DualTaskDataset | None = None,
                             use_global_utility: bool = False,
                             fallback_k_percent: float = FALLBACK_TOP_K_PERCENT,
                             num_permutations: int = 128,
                             num_perturbations: int | None = None
                             ) -> tuple[DualTaskDataset, ClassMaskSet]:
    """End-to-end feature masking: explain, aggregate, optimize, apply.

    Sensitivities are computed on ``fit_dataset`` (defaults to ``dataset``;
    pass the training split so masks are never fitted on test data), then the
    per-identity-class masks are applied to the whole ``dataset``. Classes
    whose optimization trips a degenerate condition fall back to the top-k%
    method; every fallback is logged and recorded in the returned mask set.
    """
    fit = fit_dataset if fit_dataset is not None else dataset
    raw_s = explain.explain_dataset(identity_model, fit.features,
                                    fit.identity_labels, explainer_choice,
                                    seed=seed, num_permutations=num_permutations,
                                    num_perturbations=num_perturbations)
    raw_u = explain.explain_dataset(utility_model, fit.features,
                                    fit.utility_labels, explainer_choice,
                                    seed=seed + 1, num_permutations=num_permutations,
                                    num_perturbations=num_perturbations)
    s_clipped = np.maximum(raw_s, 0.0)
    u_clipped = np.maximum(raw_u, 0.0)
    s_by_class = explain.class_aggregate(s_clipped, fit.identity_labels,
                                         "identity", explainer_choice)
    u_by_class = explain.class_aggregate(u_clipped, fit.utility_labels,
                                         "utility", explainer_choice)
    global_u = u_clipped.mean(axis=0) if use_global_utility else None

    # Classes that appear anywhere in `dataset` need a mask; classes absent
    # from the fit split get the dataset-wide sensitivity aggregates.
    s_global = s_clipped.mean(axis=0)
    masks, budgets, lp_bounds, fallbacks = {}, {}, {}, {}
    for c in (int(v) for v in np.unique(dataset.identity_labels)):
        s_vec = s_by_class[c].values if c in s_by_class else s_global
        u_vec = _paired_utility(u_by_class, fit.identity_labels,
                                fit.utility_labels, c, global_u) \
            if c in s_by_class else u_clipped.mean(axis=0)
        reason = _needs_fallback(u_vec, s_vec, alpha)
        solution = None
        if reason is None:
            try:
                solution = optimize_mask(u_vec, s_vec, alpha)
            except Exception as exc:  # solver failure falls back to top-k
                reason = f"optimizer error: {exc}"
        if reason is not None:
            log.warning("class %d: falling back to top-%g%% masking (%s)",
                        c, fallback_k_percent, reason)
            masks[c] = top_k_mask(s_vec, fallback_k_percent)
            fallbacks[c] = reason
            budgets[c] = float(s_vec @ masks[c])
        else:
            masks[c] = solution.mask
            budgets[c] = solution.budget
            if solution.lp_bound is not None:
                lp_bounds[c] = solution.lp_bound
    mask_set = ClassMaskSet(masks, alpha, "optimized", budgets, lp_bounds,
                            fallbacks, explainer_choice, seed)
    return apply_mask(dataset, mask_set, "identity"), mask_set


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_mask_set(mask_set: ClassMaskSet, csv_path) -> None:
    """CSV `class_id, feature_id, keep` plus a JSON provenance sidecar."""
    csv_path = Path(csv_path)
    with open(csv_path, "w") as fh:
        fh.write("class_id,feature_id,keep\n")
        for c in sorted(mask_set.masks):
            for j, keep in enumerate(mask_set.masks[c]):
                fh.write(f"{c},{j},{int(keep)}\n")
    sidecar = {
        "alpha": mask_set.alpha,
        "method": mask_set.method,
        "budget_used": {str(c): v for c, v in sorted(mask_set.budget_used.items())},
        "lp_bounds": {str(c): v for c, v in sorted(mask_set.lp_bounds.items())},
        "fallbacks": {str(c): v for c, v in sorted(mask_set.fallbacks.items())},
        "explainer": mask_set.explainer,
        "seed": mask_set.seed,
    }
    csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_mask_set(csv_path) -> ClassMaskSet:
    csv_path = Path(csv_path)
    per_class: dict[int, dict[int, int]] = {}
    with open(csv_path) as fh:
        header = fh.readline().strip()
        if header != "class_id,feature_id,keep":
            raise ValueError(f"unexpected mask CSV header: {header}")
        for line in fh:
            c, j, keep = (int(v) for v in line.strip().split(","))
            per_class.setdefault(c, {})[j] = keep
    masks = {c: np.array([feats[j] for j in range(len(feats))], dtype=np.uint8)
             for c, feats in per_class.items()}
    sidecar_path = csv_path.with_suffix(".json")
    meta = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return ClassMaskSet(
        masks,
        alpha=meta.get("alpha", 0.0),
        method=meta.get("method", "optimized"),
        budget_used={int(c): v for c, v in meta.get("budget_used", {}).items()},
        lp_bounds={int(c): v for c, v in meta.get("lp_bounds", {}).items()},
        fallbacks={int(c): v for c, v in meta.get("fallbacks", {}).items()},
        explainer=meta.get("explainer", ""),
        seed=meta.get("seed"),
    )
