"""Experiment orchestration: seeded sweeps over mask methods, privacy budgets,
masked fractions, label randomization, and alpha, plus equivalence search and
timing, all emitting deterministic CSV/JSON/plot-data files.

Every sweep is a pure function of (config, master seed): replicate r uses a
seed derived from (master_seed, r), each grid cell is independently seeded,
and aggregation is order-independent, so re-runs and different worker counts
produce byte-identical results files. Wall-clock timings are therefore kept
out of results.csv and written to a separate timing sidecar.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import attack, data, dp, explain, masking, models
from .attack import TrainerSpec
from .data import DualTaskDataset, PlantedStructure
from .dp import PrivacySpec
from .models import ModelSpec, TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    kind: str = "planted"  # planted | random | csv | snapshot
    num_samples: int = 256
    num_features: int = 24
    num_identity_classes: int = 4
    num_utility_classes: int = 3
    identity_features: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7)
    utility_features: tuple[int, ...] = (5, 6, 7, 8, 9, 10, 11, 12)
    noise_std: float = 0.25
    num_classes: int = 5  # random datasets (both tasks)
    path: str = ""        # csv / snapshot sources

    def __post_init__(self):
        if self.kind not in ("planted", "random", "csv", "snapshot"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        object.__setattr__(self, "identity_features", tuple(self.identity_features))
        object.__setattr__(self, "utility_features", tuple(self.utility_features))


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    hidden_dims: tuple[int, ...] = (32,)
    activation: str = "relu"
    learning_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    early_stop_patience: int = 0
    privacy_grid: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    alpha_grid: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4)
    mask_methods: tuple[str, ...] = ("original", "random", "top-k", "optimized")
    alpha: float = 0.2                 # mask level used outside alpha sweeps
    top_k_percent: float = 30.0
    random_mask_fraction: float = 0.3
    shadow_count: int = 64
    null_mode: str = "global-per-model"
    attack_task: str = "identity"
    attack_threshold: float = 0.5
    explainer: str = "shapley-sampled"
    num_permutations: int = 64
    sampling_rate: float = 0.25
    delta: float = 1e-5
    clip_norm: float = 1.0
    fraction_sweep_epsilon: float = 8.0
    equivalence_statistic: str = "max"
    equivalence_tolerance: float = 0.01
    split_ratio: float = 0.8
    master_seed: int = 0
    replicates: int = 5
    workers: int = 1
    output_dir: str = "out"

    def __post_init__(self):
        if len(self.privacy_grid) == 0 or len(self.alpha_grid) == 0:
            raise ConfigError("privacy_grid and alpha_grid must be non-empty")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        unknown = set(self.mask_methods) - {"original", "random", "top-k", "optimized"}
        if unknown:
            raise ConfigError(f"unknown mask methods {sorted(unknown)}")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        object.__setattr__(self, "privacy_grid", tuple(float(e) for e in self.privacy_grid))
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        object.__setattr__(self, "mask_methods", tuple(self.mask_methods))

    # -- derived pieces -----------------------------------------------------

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.hidden_dims, self.activation)

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size,
                           seed, self.early_stop_patience)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dataset"] = dataclasses.asdict(self.dataset)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        ds_doc = doc.pop("dataset", {})
        known_ds = {f.name for f in dataclasses.fields(DatasetConfig)}
        known = {f.name for f in dataclasses.fields(cls)} - {"dataset"}
        bad = (set(ds_doc) - known_ds) | (set(doc) - known)
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        try:
            return cls(dataset=DatasetConfig(**ds_doc), **doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _seed_from(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _eps_key(epsilon: float) -> int:
    return int(round(epsilon * 1e6))


def build_dataset(config: ExperimentConfig, seed: int) -> DualTaskDataset:
    ds = config.dataset
    if ds.kind == "planted":
        structure = PlantedStructure(ds.identity_features, ds.utility_features,
                                     ds.noise_std)
        return data.gen_synthetic_dual_task(ds.num_samples, ds.num_features,
                                            ds.num_identity_classes,
                                            ds.num_utility_classes, structure, seed)
    if ds.kind == "random":
        return data.gen_random_dataset(ds.num_samples, ds.num_features,
                                       ds.num_classes, seed)
    if ds.kind == "csv":
        return data.from_csv(ds.path)
    return data.load_snapshot(ds.path)


# ---------------------------------------------------------------------------
# Sweep rows and results
# ---------------------------------------------------------------------------

ROW_FIELDS = ("method", "epsilon", "alpha", "fraction", "replicate",
              "asr_mean", "asr_max", "utility_accuracy", "accountant_epsilon",
              "error")


@dataclasses.dataclass
class SweepRow:
    method: str
    epsilon: float | None = None
    alpha: float | None = None
    fraction: float | None = None
    replicate: int = 0
    asr_mean: float | None = None
    asr_max: float | None = None
    utility_accuracy: float | None = None
    accountant_epsilon: float | None = None
    error: str = ""

    def as_csv(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, (float, np.floating)):
                return repr(float(v))
            return str(v)
        return ",".join(fmt(getattr(self, f)) for f in ROW_FIELDS)


@dataclasses.dataclass
class SweepResult:
    kind: str
    rows: list[SweepRow]
    wall_times: list[float]
    config: ExperimentConfig

    @property
    def failed_rows(self) -> int:
        return sum(1 for r in self.rows if r.error)


# ---------------------------------------------------------------------------
# Cell execution (module-level so ProcessPoolExecutor can pickle it)
# ---------------------------------------------------------------------------

def _privacy_for(config: ExperimentConfig, epsilon: float) -> PrivacySpec:
    steps = dp.derive_step_count(config.epochs, config.sampling_rate)
    sigma = dp.calibrate_noise(epsilon, config.delta, config.sampling_rate,
                               steps, config.clip_norm)
    return PrivacySpec(config.clip_norm, sigma, config.sampling_rate, steps,
                       config.delta, epsilon_target=epsilon)


def _utility_accuracy_dp(config, variant, train_idx, test_idx, privacy, seed):
    train_cfg = config.train_config(seed)
    model, report = dp.train_dp(variant.features[train_idx],
                                variant.utility_labels[train_idx],
                                config.model_spec(), train_cfg, privacy,
                                num_classes=variant.num_utility_classes)
    acc = models.accuracy(model, variant.features[test_idx],
                          variant.utility_labels[test_idx])
    return acc, report


def _run_cell(payload: dict):
    """One grid cell; never raises (errors land in the row's error column)."""
    config: ExperimentConfig = payload["config"]
    row = SweepRow(method=payload["method"], epsilon=payload.get("epsilon"),
                   alpha=payload.get("alpha"), fraction=payload.get("fraction"),
                   replicate=payload["replicate"])
    start = time.perf_counter()
    try:
        variant: DualTaskDataset = payload["variant"]
        rep_seed: int = payload["rep_seed"]
        if payload.get("epsilon") is not None:
            privacy = _privacy_for(config, payload["epsilon"])
            trainer = TrainerSpec(config.model_spec(), config.train_config(), privacy)
            ens_seed = _seed_from(rep_seed, _eps_key(payload["epsilon"]))
        else:  # non-private ensemble (alpha sweep)
            privacy = None
            trainer = TrainerSpec(config.model_spec(), config.train_config())
            ens_seed = _seed_from(rep_seed, 999)
        ensemble = attack.build_shadow_ensemble(variant, config.attack_task,
                                                config.shadow_count, trainer,
                                                ens_seed)
        report = attack.compute_asr(ensemble, variant, config.attack_task,
                                    config.attack_threshold, config.null_mode)
        row.asr_mean, row.asr_max = report.asr_mean, report.asr_max
        train_idx, test_idx = payload["train_idx"], payload["test_idx"]
        util_seed = _seed_from(rep_seed, 7,
                               _eps_key(payload.get("epsilon") or 0.0))
        if privacy is not None:
            acc, acc_report = _utility_accuracy_dp(config, variant, train_idx,
                                                   test_idx, privacy, util_seed)
            row.accountant_epsilon = acc_report.epsilon
        else:
            cfg = dataclasses.replace(config.train_config(util_seed),
                                      early_stop_patience=max(
                                          config.early_stop_patience, 5))
            model = models.train_plain(variant.features[train_idx],
                                       variant.utility_labels[train_idx],
                                       config.model_spec(), cfg,
                                       num_classes=variant.num_utility_classes)
            acc = models.accuracy(model, variant.features[test_idx],
                                  variant.utility_labels[test_idx])
        row.utility_accuracy = acc
    except Exception as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    return row, time.perf_counter() - start


def _execute(cells: list[dict], workers: int):
    if workers <= 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, cells))


# ---------------------------------------------------------------------------
# Variant construction per replicate
# ---------------------------------------------------------------------------

def _train_surrogates(config: ExperimentConfig, train: DualTaskDataset, rep_seed: int):
    cfg = dataclasses.replace(config.train_config(_seed_from(rep_seed, 11)),
                              early_stop_patience=max(config.early_stop_patience, 5))
    identity_model = models.train_plain(train.features, train.identity_labels,
                                        config.model_spec(), cfg,
                                        num_classes=train.num_identity_classes)
    cfg_u = dataclasses.replace(cfg, seed=_seed_from(rep_seed, 12))
    utility_model = models.train_plain(train.features, train.utility_labels,
                                       config.model_spec(), cfg_u,
                                       num_classes=train.num_utility_classes)
    return identity_model, utility_model


def _global_privacy_sensitivity(config, identity_model, train, rep_seed):
    raw = explain.explain_dataset(identity_model, train.features,
                                  train.identity_labels, config.explainer,
                                  seed=_seed_from(rep_seed, 13),
                                  num_permutations=config.num_permutations)
    return np.maximum(raw, 0.0).mean(axis=0)


def build_variant(config: ExperimentConfig, dataset: DualTaskDataset,
                  train: DualTaskDataset, method: str, rep_seed: int,
                  identity_model=None, utility_model=None,
                  alpha: float | None = None):
    """Dataset variant for one mask method; masks are fitted on the training
    split and applied to the full dataset. Returns (variant, mask_set)."""
    if method == "original":
        return dataset, None
    identity_classes = np.unique(dataset.identity_labels)
    if method == "random":
        mask = masking.random_mask(dataset.feature_count,
                                   config.random_mask_fraction,
                                   seed=_seed_from(rep_seed, 21))
        mask_set = masking.uniform_mask_set(mask, identity_classes, "random",
                                            seed=rep_seed)
        return masking.apply_mask(dataset, mask_set, "identity"), mask_set
    if identity_model is None or utility_model is None:
        raise ValueError(f"method {method!r} needs surrogate models")
    if method == "top-k":
        s_global = _global_privacy_sensitivity(config, identity_model, train,
                                               rep_seed)
        mask = masking.top_k_mask(s_global, config.top_k_percent)
        mask_set = masking.uniform_mask_set(mask, identity_classes, "top-k",
                                            seed=rep_seed)
        return masking.apply_mask(dataset, mask_set, "identity"), mask_set
    if method == "optimized":
        masked, mask_set = masking.feature_masking_pipeline(
            dataset, identity_model, utility_model, config.explainer,
            config.alpha if alpha is None else alpha,
            seed=_seed_from(rep_seed, 22), fit_dataset=train,
            num_permutations=config.num_permutations)
        return masked, mask_set
    raise ValueError(f"unknown mask method {method!r}")


def _replicate_context(config: ExperimentConfig, replicate: int):
    rep_seed = _seed_from(config.master_seed, replicate)
    dataset = build_dataset(config, rep_seed)
    n = dataset.sample_count
    perm = np.random.default_rng(np.random.SeedSequence([rep_seed, 5])).permutation(n)
    n_train = int(np.ceil(config.split_ratio * n))
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    train = dataset.take(train_idx, name=f"{dataset.name}:train")
    return rep_seed, dataset, train, train_idx, test_idx


# ---------------------------------------------------------------------------
# The sweeps
# ---------------------------------------------------------------------------

def run_asr_vs_epsilon(config: ExperimentConfig) -> SweepResult:
    """ASR and DP utility accuracy across mask methods and the epsilon grid."""
    cells, error_rows = [], []
    for r in range(config.replicates):
        rep_seed, dataset, train, train_idx, test_idx = _replicate_context(config, r)
        needs_models = any(m in ("top-k", "optimized") for m in config.mask_methods)
        identity_model = utility_model = None
        if needs_models:
            identity_model, utility_model = _train_surrogates(config, train, rep_seed)
        for method in config.mask_methods:
            try:
                variant, _ = build_variant(config, dataset, train, method,
                                           rep_seed, identity_model, utility_model)
            except Exception as exc:
                for eps in config.privacy_grid:
                    error_rows.append(SweepRow(method, epsilon=eps, replicate=r,
                                               error=f"{type(exc).__name__}: {exc}"))
                continue
            for eps in config.privacy_grid:
                cells.append(dict(config=config, method=method, epsilon=eps,
                                  replicate=r, rep_seed=rep_seed, variant=variant,
                                  train_idx=train_idx, test_idx=test_idx))
    outcomes = _execute(cells, config.workers)
    rows = [row for row, _ in outcomes] + error_rows
    times = [t for _, t in outcomes] + [0.0] * len(error_rows)
    return SweepResult("asr-vs-epsilon", rows, times, config)


def _fraction_sweep(config: ExperimentConfig, fractions, variant_builder,
                    kind: str, methods) -> SweepResult:
    cells, error_rows = [], []
    eps = config.fraction_sweep_epsilon
    for r in range(config.replicates):
        rep_seed, dataset, train, train_idx, test_idx = _replicate_context(config, r)
        context = variant_builder(config, dataset, train, rep_seed, prepare=True)
        for method in methods:
            for fraction in fractions:
                try:
                    variant = variant_builder(config, dataset, train, rep_seed,
                                              method=method, fraction=fraction,
                                              context=context)
                except Exception as exc:
                    error_rows.append(SweepRow(method, epsilon=eps, fraction=fraction,
                                               replicate=r,
                                               error=f"{type(exc).__name__}: {exc}"))
                    continue
                cells.append(dict(config=config, method=method, epsilon=eps,
                                  fraction=fraction, replicate=r, rep_seed=rep_seed,
                                  variant=variant, train_idx=train_idx,
                                  test_idx=test_idx))
    outcomes = _execute(cells, config.workers)
    rows = [row for row, _ in outcomes] + error_rows
    times = [t for _, t in outcomes] + [0.0] * len(error_rows)
    return SweepResult(kind, rows, times, config)


def _masked_variant_builder(config, dataset, train, rep_seed, prepare=False,
                            method=None, fraction=None, context=None):
    if prepare:
        identity_model, _ = _train_surrogates(config, train, rep_seed)
        return _global_privacy_sensitivity(config, identity_model, train, rep_seed)
    identity_classes = np.unique(dataset.identity_labels)
    if method == "top-k":
        mask = masking.top_k_mask(context, fraction * 100.0)
    else:
        mask = masking.random_mask(dataset.feature_count, fraction,
                                   seed=_seed_from(rep_seed, 21, int(fraction * 1000)))
    mask_set = masking.uniform_mask_set(mask, identity_classes, method)
    return masking.apply_mask(dataset, mask_set, "identity")


def run_masked_fraction_sweep(config: ExperimentConfig,
                              fractions=(0.0, 0.25, 0.5, 0.75, 1.0)) -> SweepResult:
    """Top-k and random masking at increasing masked fractions, fixed epsilon."""
    methods = [m for m in ("top-k", "random") if m in config.mask_methods] or ["top-k"]
    return _fraction_sweep(config, fractions, _masked_variant_builder,
                           "masked-fraction", methods)


def _randomized_variant_builder(config, dataset, train, rep_seed, prepare=False,
                                method=None, fraction=None, context=None):
    if prepare:
        return None
    return data.randomize_labels(dataset, fraction, config.attack_task,
                                 seed=_seed_from(rep_seed, 31, int(fraction * 1000)))


def run_label_randomization_sweep(config: ExperimentConfig,
                                  fractions=(0.0, 0.25, 0.5, 0.75, 1.0)) -> SweepResult:
    """Label quality degradation: randomize a growing share of attack-task labels."""
    return _fraction_sweep(config, fractions, _randomized_variant_builder,
                           "label-randomization", ["randomized-labels"])


def run_alpha_sweep(config: ExperimentConfig, alphas=None) -> SweepResult:
    """Non-private utility accuracy and (plain-ensemble) ASR across alpha."""
    alphas = config.alpha_grid if alphas is None else tuple(alphas)
    cells, error_rows = [], []
    for r in range(config.replicates):
        rep_seed, dataset, train, train_idx, test_idx = _replicate_context(config, r)
        identity_model, utility_model = _train_surrogates(config, train, rep_seed)
        for alpha in alphas:
            try:
                variant, _ = build_variant(config, dataset, train, "optimized",
                                           rep_seed, identity_model, utility_model,
                                           alpha=alpha)
            except Exception as exc:
                error_rows.append(SweepRow("optimized", alpha=alpha, replicate=r,
                                           error=f"{type(exc).__name__}: {exc}"))
                continue
            cells.append(dict(config=config, method="optimized", alpha=alpha,
                              replicate=r, rep_seed=rep_seed, variant=variant,
                              train_idx=train_idx, test_idx=test_idx))
    outcomes = _execute(cells, config.workers)
    rows = [row for row, _ in outcomes] + error_rows
    times = [t for _, t in outcomes] + [0.0] * len(error_rows)
    return SweepResult("alpha", rows, times, config)


def run_equivalence(config: ExperimentConfig, epsilon_original: float) -> dict:
    """Per replicate: equivalent-epsilon search for the optimized-masked dataset
    plus the utility-accuracy comparison at the matched ASR level."""
    replicates = []
    for r in range(config.replicates):
        rep_seed, dataset, train, train_idx, test_idx = _replicate_context(config, r)
        identity_model, utility_model = _train_surrogates(config, train, rep_seed)
        masked, mask_set = build_variant(config, dataset, train, "optimized",
                                         rep_seed, identity_model, utility_model)
        report = attack.find_equivalent_epsilon(
            dataset, masked, epsilon_original, config.privacy_grid,
            config.shadow_count, rep_seed, model_spec=config.model_spec(),
            train_config=config.train_config(), sampling_rate=config.sampling_rate,
            clip_norm=config.clip_norm, delta=config.delta,
            task=config.attack_task, tolerance=config.equivalence_tolerance,
            statistic=config.equivalence_statistic,
            threshold=config.attack_threshold, null_mode=config.null_mode)
        entry = {
            "replicate": r,
            "epsilon_original": epsilon_original,
            "epsilon_equivalent": report.epsilon_equivalent,
            "original_asr": report.original_asr,
            "masked_curve": [list(p) for p in report.masked_curve],
            "masked_features_per_class": mask_set.masked_counts,
            "fallbacks": mask_set.fallbacks,
        }
        acc_orig, _ = _utility_accuracy_dp(config, dataset, train_idx, test_idx,
                                           _privacy_for(config, epsilon_original),
                                           _seed_from(rep_seed, 41))
        entry["utility_accuracy_original"] = acc_orig
        if report.epsilon_equivalent is not None:
            acc_masked, _ = _utility_accuracy_dp(
                config, masked, train_idx, test_idx,
                _privacy_for(config, report.epsilon_equivalent),
                _seed_from(rep_seed, 42))
            entry["utility_accuracy_masked"] = acc_masked
        else:
            entry["utility_accuracy_masked"] = None
        replicates.append(entry)
    found = [e for e in replicates if e["epsilon_equivalent"] is not None]
    return {
        "epsilon_original": epsilon_original,
        "statistic": config.equivalence_statistic,
        "tolerance": config.equivalence_tolerance,
        "replicates": replicates,
        "num_found": len(found),
        "num_relaxed": sum(1 for e in found
                           if e["epsilon_equivalent"] > epsilon_original),
    }


def run_timing(config: ExperimentConfig, num_explain_samples: int = 16) -> list[dict]:
    """Wall-clock cost of sensitivity generation and per-class optimization.

    Environment-dependent; reported, never asserted against reference values.
    """
    rep_seed, dataset, train, _, _ = _replicate_context(config, 0)
    identity_model, utility_model = _train_surrogates(config, train, rep_seed)
    rows = []
    take = min(num_explain_samples, train.sample_count)
    per_sample = []
    for i in range(take):
        t0 = time.perf_counter()
        explain.explain_dataset(identity_model, train.features[i:i + 1],
                                train.identity_labels[i:i + 1], config.explainer,
                                seed=_seed_from(rep_seed, 51, i),
                                num_permutations=config.num_permutations)
        per_sample.append(time.perf_counter() - t0)
    rows.append({"stage": f"explain[{config.explainer}]", "unit": "sample",
                 "mean_s": float(np.mean(per_sample)),
                 "std_s": float(np.std(per_sample)), "count": take})
    raw = explain.explain_dataset(identity_model, train.features,
                                  train.identity_labels, config.explainer,
                                  seed=_seed_from(rep_seed, 52),
                                  num_permutations=config.num_permutations)
    s_by_class = explain.class_aggregate(np.maximum(raw, 0.0),
                                         train.identity_labels, "identity",
                                         config.explainer)
    raw_u = explain.explain_dataset(utility_model, train.features,
                                    train.utility_labels, config.explainer,
                                    seed=_seed_from(rep_seed, 53),
                                    num_permutations=config.num_permutations)
    u_global = np.maximum(raw_u, 0.0).mean(axis=0)
    per_class = []
    for c, vec in s_by_class.items():
        t0 = time.perf_counter()
        masking.optimize_mask(u_global, vec.values, config.alpha)
        per_class.append(time.perf_counter() - t0)
    rows.append({"stage": "optimize-mask", "unit": "class",
                 "mean_s": float(np.mean(per_class)),
                 "std_s": float(np.std(per_class)), "count": len(per_class)})
    return rows


# ---------------------------------------------------------------------------
# Output emission
# ---------------------------------------------------------------------------

def _config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def results_csv_text(result: SweepResult) -> str:
    lines = [",".join(ROW_FIELDS)]
    lines += [row.as_csv() for row in result.rows]
    return "\n".join(lines) + "\n"


def _plot_data(result: SweepResult) -> str:
    """Whitespace-separated `x y series` rows for the sweep's plot-data file."""
    x_field = {"asr-vs-epsilon": "epsilon", "masked-fraction": "fraction",
               "label-randomization": "fraction", "alpha": "alpha"}[result.kind]
    y_field = "utility_accuracy" if result.kind == "alpha" else "asr_mean"
    groups: dict[tuple, list] = {}
    for row in result.rows:
        if row.error:
            continue
        x = getattr(row, x_field)
        groups.setdefault((row.method, x), []).append(getattr(row, y_field))
    lines = [f"# x={x_field} y=mean_{y_field} series=method"]
    for (method, x) in sorted(groups, key=lambda t: (t[0], t[1])):
        y = float(np.mean(groups[(method, x)]))
        lines.append(f"{x!r} {y!r} {method}")
    return "\n".join(lines) + "\n"


def _summary(result: SweepResult) -> dict:
    by_cell: dict[tuple, dict[str, list]] = {}
    for row in result.rows:
        if row.error:
            continue
        key = (row.method, row.epsilon, row.alpha, row.fraction)
        slot = by_cell.setdefault(key, {"asr_mean": [], "asr_max": [],
                                        "utility_accuracy": []})
        for f in slot:
            v = getattr(row, f)
            if v is not None:
                slot[f].append(v)
    cells = []
    for key in sorted(by_cell, key=lambda k: tuple(str(p) for p in k)):
        method, eps, alpha, fraction = key
        entry = {"method": method, "epsilon": eps, "alpha": alpha,
                 "fraction": fraction}
        for f, vals in by_cell[key].items():
            if vals:
                entry[f] = {"mean": float(np.mean(vals)),
                            "std": float(np.std(vals)), "n": len(vals)}
        cells.append(entry)
    return {"kind": result.kind, "num_rows": len(result.rows),
            "num_failed": result.failed_rows, "cells": cells}


def emit_outputs(result: SweepResult, outdir) -> dict:
    """Write results.csv, summary.json, plot data, timing sidecar, and manifest.

    Everything except timing.csv is a pure function of (config, seed); re-runs
    overwrite idempotently and byte-identically.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_text = results_csv_text(result)
    (outdir / "results.csv").write_text(csv_text)
    (outdir / "summary.json").write_text(json.dumps(_summary(result), indent=2,
                                                    sort_keys=True))
    (outdir / f"fig_{result.kind}.dat").write_text(_plot_data(result))
    timing_lines = ["row_index,wall_time_s"]
    timing_lines += [f"{i},{t:.6f}" for i, t in enumerate(result.wall_times)]
    (outdir / "timing.csv").write_text("\n".join(timing_lines) + "\n")
    manifest = {
        "kind": result.kind,
        "config_hash": _config_hash(result.config),
        "results_digest": hashlib.sha256(csv_text.encode()).hexdigest(),
        "config": result.config.to_dict(),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                     sort_keys=True))
    return manifest
