"""Offline likelihood-ratio membership inference and dataset-level risk.

Protocol: train n shadow models, each on a random half of the dataset
(fair coin per sample). For a target sample with model confidence q, the
score is the CDF of a Gaussian fitted to non-member logit confidences,
evaluated at phi(q) = log(q / (1-q)); scores above the threshold are called
members. Per-sample attack success rate (ASR) is the fraction of shadow
models where the call matches the stored membership bit, and the dataset's
sensitivity is the worst-case ASR over samples.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import dp, models
from .data import DualTaskDataset
from .dp import PrivacySpec
from .models import MlpModel, ModelSpec, TrainConfig

SIGMA_FLOOR = 1e-6

NULL_MODES = ("global-per-model", "per-example")


def logit_confidence(q):
    """phi(q) = log(q / (1 - q)); strictly increasing in q."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0.0) or np.any(q >= 1.0):
        raise ValueError("confidence must lie strictly inside (0, 1); clamp first")
    out = np.log(q) - np.log1p(-q)
    return float(out) if out.ndim == 0 else out


@dataclasses.dataclass(frozen=True)
class GaussianNull:
    """Non-member logit-confidence distribution, N(mu_out, sigma_out^2)."""

    mu_out: float
    sigma_out: float

    def __post_init__(self):
        if not math.isfinite(self.mu_out) or not math.isfinite(self.sigma_out):
            raise ValueError("null parameters must be finite")
        object.__setattr__(self, "sigma_out", max(self.sigma_out, SIGMA_FLOOR))


def fit_null_from_scores(phi_values: np.ndarray) -> GaussianNull:
    phi_values = np.asarray(phi_values, dtype=np.float64)
    if phi_values.size < 2:
        raise ValueError("need at least 2 out samples to fit the null")
    return GaussianNull(float(phi_values.mean()), float(phi_values.std(ddof=1)))


def fit_null(model: MlpModel, out_features: np.ndarray,
             out_labels: np.ndarray) -> GaussianNull:
    """Gaussian fit (sample mean, unbiased std) of phi over non-member samples."""
    q = models.confidence_for_labels(model, out_features, out_labels)
    return fit_null_from_scores(logit_confidence(q))


def lira_score(model: MlpModel, null: GaussianNull, x: np.ndarray, y: int) -> float:
    """Lambda = Pr[Z <= phi(q)] for Z ~ N(mu_out, sigma_out^2); in [0, 1]."""
    q = models.confidence_for_labels(model, np.atleast_2d(x), np.array([y]))[0]
    phi = logit_confidence(q)
    return float(ndtr((phi - null.mu_out) / null.sigma_out))


def lira_decide(score: float, threshold: float = 0.5) -> bool:
    """True = member. Ties classify as non-member (strict inequality)."""
    if not 0.0 <= score <= 1.0:
        raise ValueError("score must be in [0, 1]")
    return score > threshold


@dataclasses.dataclass(frozen=True)
class TrainerSpec:
    """How shadow (and target) models are trained: plain SGD or DP-SGD."""

    model: ModelSpec
    train: TrainConfig
    privacy: PrivacySpec | None = None

    @property
    def kind(self) -> str:
        return "plain" if self.privacy is None else "dp"

    def describe(self) -> dict:
        d = {"kind": self.kind, "hidden_dims": list(self.model.hidden_dims),
             "activation": self.model.activation,
             "learning_rate": self.train.learning_rate, "epochs": self.train.epochs}
        if self.privacy is not None:
            d.update(noise_multiplier=self.privacy.noise_multiplier,
                     clip_norm=self.privacy.clip_norm,
                     sampling_rate=self.privacy.sampling_rate,
                     delta=self.privacy.delta,
                     epsilon_target=self.privacy.epsilon_target)
        return d


def train_with(trainer: TrainerSpec, features: np.ndarray, labels: np.ndarray,
               num_classes: int, seed: int) -> MlpModel:
    config = dataclasses.replace(trainer.train, seed=seed)
    if trainer.privacy is None:
        return models.train_plain(features, labels, trainer.model, config,
                                  num_classes=num_classes)
    model, _ = dp.train_dp(features, labels, trainer.model, config,
                           trainer.privacy, num_classes=num_classes)
    return model


@dataclasses.dataclass
class ShadowEnsemble:
    models: list[MlpModel]
    membership: np.ndarray  # (n, N) uint8; 1 = sample was in model i's train set
    trainer: TrainerSpec
    task: str
    seed: int
    redraws: int = 0

    @property
    def n_models(self) -> int:
        return len(self.models)


def _seed_from(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def build_shadow_ensemble(dataset: DualTaskDataset, task: str, n: int,
                          trainer: TrainerSpec, master_seed: int) -> ShadowEnsemble:
    """Train n shadow models on coin-flip halves of the dataset.

    Rows that come up all-in or all-out are redrawn (and counted); model i's
    training seed derives from (master_seed, i) so ensembles are reproducible
    regardless of execution order.
    """
    if n < 2:
        raise ValueError("need at least 2 shadow models")
    num_samples = dataset.sample_count
    labels = dataset.labels_for(task)
    num_classes = dataset.num_classes_for(task)
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 0]))
    membership = np.zeros((n, num_samples), dtype=np.uint8)
    redraws = 0
    for i in range(n):
        for _ in range(10000):
            row = (rng.random(num_samples) < 0.5).astype(np.uint8)
            if 0 < row.sum() < num_samples:
                membership[i] = row
                break
            redraws += 1
        else:
            raise RuntimeError("could not draw a non-degenerate membership row")
    shadow_models = []
    for i in range(n):
        rows = membership[i].astype(bool)
        shadow_models.append(train_with(trainer, dataset.features[rows],
                                        labels[rows], num_classes,
                                        seed=_seed_from(master_seed, 1, i)))
    return ShadowEnsemble(shadow_models, membership, trainer, task,
                          master_seed, redraws)


@dataclasses.dataclass(frozen=True)
class AsrReport:
    per_sample_asr: np.ndarray
    asr_mean: float
    asr_max: float
    n_models: int
    threshold: float
    null_mode: str = "global-per-model"

    def __post_init__(self):
        object.__setattr__(self, "per_sample_asr",
                           np.asarray(self.per_sample_asr, dtype=np.float64))


def _phi_matrix(ensemble: ShadowEnsemble, dataset: DualTaskDataset,
                task: str) -> np.ndarray:
    labels = dataset.labels_for(task)
    phi = np.empty((ensemble.n_models, dataset.sample_count))
    for i, model in enumerate(ensemble.models):
        q = models.confidence_for_labels(model, dataset.features, labels)
        phi[i] = logit_confidence(q)
    return phi


def _floored_std(var: np.ndarray) -> np.ndarray:
    return np.maximum(np.sqrt(np.maximum(var, 0.0)), SIGMA_FLOOR)


def compute_asr(ensemble: ShadowEnsemble, dataset: DualTaskDataset,
                task: str | None = None, threshold: float = 0.5,
                null_mode: str = "global-per-model",
                exclude_target: bool = True) -> AsrReport:
    """Score every sample against every shadow model and compare to ground truth.

    null_mode "global-per-model" fits one Gaussian per model over all its out
    samples; "per-example" fits, for each (model, sample) pair, a Gaussian
    over that sample's phi values under the *other* models that held it out.
    With exclude_target, an out sample is removed from its own model's null
    fit (leave-one-out) so the target cannot contaminate its null. At the
    default threshold 0.5 the global-mode decision reduces to sign(phi - mu),
    which leave-one-out mean removal cannot flip; the guard only changes
    decisions at other thresholds.
    """
    if null_mode not in NULL_MODES:
        raise ValueError(f"null_mode must be one of {NULL_MODES}")
    task = task or ensemble.task
    n, num_samples = ensemble.membership.shape
    if num_samples != dataset.sample_count:
        raise ValueError("ensemble membership width does not match the dataset")
    phi = _phi_matrix(ensemble, dataset, task)
    member_truth = ensemble.membership.astype(bool)
    out_mask = ~member_truth
    correct = np.zeros((n, num_samples), dtype=bool)

    if null_mode == "global-per-model":
        for i in range(n):
            out = out_mask[i]
            outv = phi[i, out]
            m = outv.size
            s, q2 = outv.sum(), float(outv @ outv)
            mu_full = s / m
            var_full = (q2 - m * mu_full * mu_full) / (m - 1) if m >= 2 else 0.0
            mu = np.full(num_samples, mu_full)
            sd = np.full(num_samples, _floored_std(np.array(var_full)))
            if exclude_target and m >= 2:
                loo_mu = (s - phi[i, out]) / (m - 1)
                if m >= 3:
                    loo_var = (q2 - phi[i, out] ** 2 - (m - 1) * loo_mu ** 2) / (m - 2)
                else:
                    loo_var = np.zeros_like(loo_mu)
                mu[out] = loo_mu
                sd[out] = _floored_std(loo_var)
            lam = ndtr((phi[i] - mu) / sd)
            correct[i] = (lam > threshold) == member_truth[i]
    else:
        col_c = out_mask.sum(axis=0).astype(np.float64)
        col_s = (phi * out_mask).sum(axis=0)
        col_q = (phi * phi * out_mask).sum(axis=0)
        for i in range(n):
            if exclude_target:
                c = col_c - out_mask[i]
                s = col_s - phi[i] * out_mask[i]
                q2 = col_q - phi[i] * phi[i] * out_mask[i]
            else:
                c, s, q2 = col_c, col_s, col_q
            with np.errstate(divide="ignore", invalid="ignore"):
                mu = np.where(c > 0, s / np.maximum(c, 1.0), 0.0)
                var = np.where(c >= 2, (q2 - c * mu * mu) / np.maximum(c - 1.0, 1.0), 0.0)
            # Columns with no usable out models fall back to this model's global null.
            degenerate = c < 1
            if degenerate.any():
                outv = phi[i, out_mask[i]]
                mu[degenerate] = outv.mean()
                var[degenerate] = outv.var(ddof=1) if outv.size >= 2 else 0.0
            lam = ndtr((phi[i] - mu) / _floored_std(var))
            correct[i] = (lam > threshold) == member_truth[i]

    per_sample = correct.mean(axis=0)
    return AsrReport(per_sample, float(per_sample.mean()), float(per_sample.max()),
                     n, threshold, null_mode)


def dataset_sensitivity(report: AsrReport) -> float:
    """Worst-case per-sample ASR (the dataset's sensitivity level)."""
    if report.per_sample_asr.size == 0:
        raise ValueError("empty report")
    return report.asr_max


# ---------------------------------------------------------------------------
# Approximately equivalent epsilon search
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class EquivalenceReport:
    epsilon_original: float
    epsilon_equivalent: float | None
    original_asr: float
    masked_curve: tuple[tuple[float, float], ...]  # (epsilon, asr statistic)
    statistic: str
    tolerance: float

    @property
    def found(self) -> bool:
        return self.epsilon_equivalent is not None


def _asr_statistic(report: AsrReport, statistic: str) -> float:
    if statistic == "max":
        return report.asr_max
    if statistic == "mean":
        return report.asr_mean
    raise ValueError("statistic must be 'max' or 'mean'")


def asr_at_epsilon(dataset: DualTaskDataset, epsilon: float, *, n: int,
                   master_seed: int, model_spec: ModelSpec, train_config: TrainConfig,
                   sampling_rate: float, clip_norm: float = 1.0, delta: float = 1e-5,
                   task: str = "identity", threshold: float = 0.5,
                   null_mode: str = "global-per-model") -> AsrReport:
    """ASR of a DP shadow ensemble trained at the given theoretical epsilon.

    The ensemble seed derives from (master_seed, epsilon) so curves measured
    on different dataset variants are seed-paired at equal epsilon.
    """
    steps = dp.derive_step_count(train_config.epochs, sampling_rate)
    sigma = dp.calibrate_noise(epsilon, delta, sampling_rate, steps, clip_norm)
    privacy = PrivacySpec(clip_norm, sigma, sampling_rate, steps, delta,
                          epsilon_target=epsilon)
    trainer = TrainerSpec(model_spec, train_config, privacy)
    seed = _seed_from(master_seed, int(round(epsilon * 1e6)))
    ensemble = build_shadow_ensemble(dataset, task, n, trainer, seed)
    return compute_asr(ensemble, dataset, task, threshold, null_mode)


def find_equivalent_epsilon(dataset_original: DualTaskDataset,
                            dataset_masked: DualTaskDataset,
                            epsilon_original: float,
                            search_grid, n: int, master_seed: int, *,
                            model_spec: ModelSpec, train_config: TrainConfig,
                            sampling_rate: float, clip_norm: float = 1.0,
                            delta: float = 1e-5, task: str = "identity",
                            tolerance: float = 0.01, statistic: str = "max",
                            threshold: float = 0.5,
                            null_mode: str = "global-per-model") -> EquivalenceReport:
    """Largest grid epsilon whose masked-data ASR stays within ``tolerance``
    of the original data's ASR at ``epsilon_original``.

    Returns the full masked curve either way; ``epsilon_equivalent`` is None
    when no grid point qualifies.
    """
    grid = [float(e) for e in search_grid]
    if len(grid) == 0 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("search_grid must be non-empty and sorted ascending")
    if n < 2:
        raise ValueError("need at least 2 shadow models")
    common = dict(n=n, master_seed=master_seed, model_spec=model_spec,
                  train_config=train_config, sampling_rate=sampling_rate,
                  clip_norm=clip_norm, delta=delta, task=task,
                  threshold=threshold, null_mode=null_mode)
    original = _asr_statistic(
        asr_at_epsilon(dataset_original, epsilon_original, **common), statistic)
    curve = []
    for eps in grid:
        report = asr_at_epsilon(dataset_masked, eps, **common)
        curve.append((eps, _asr_statistic(report, statistic)))
    qualifying = [eps for eps, stat in curve if stat <= original + tolerance]
    return EquivalenceReport(epsilon_original,
                             max(qualifying) if qualifying else None,
                             original, tuple(curve), statistic, tolerance)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_asr_report(report: AsrReport, out_dir, prefix: str = "asr",
                    trainer: TrainerSpec | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{prefix}.csv", "w") as fh:
        fh.write("sample_id,asr\n")
        for j, v in enumerate(report.per_sample_asr):
            fh.write(f"{j},{repr(float(v))}\n")
    summary = {
        "n": report.n_models,
        "threshold": report.threshold,
        "mode": report.null_mode,
        "asr_mean": report.asr_mean,
        "asr_max": report.asr_max,
        "trainer": trainer.describe() if trainer is not None else None,
    }
    (out_dir / f"{prefix}_summary.json").write_text(json.dumps(summary, indent=2))


def save_ensemble(ensemble: ShadowEnsemble, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "models").mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "membership.npy", ensemble.membership)
    for i, model in enumerate(ensemble.models):
        models.save_model(model, out_dir / "models" / f"model_{i:04d}.json")
    meta = {"task": ensemble.task, "seed": ensemble.seed,
            "redraws": ensemble.redraws, "n": ensemble.n_models,
            "trainer": ensemble.trainer.describe()}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))
