"""Command-line entry points.

Every experiment is driven by one config file (TOML or JSON) plus flag
overrides; each subcommand maps to one stage of the pipeline or one sweep.
Exit codes: 0 success, 2 configuration error, 3 partial failure (some sweep
cells errored).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import attack, data, dp, explain, harness, masking, models
from .harness import ConfigError, ExperimentConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    doc: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        if p.suffix == ".toml":
            try:
                import tomllib  # py311+
            except ModuleNotFoundError:
                import tomli as tomllib
            doc = tomllib.loads(p.read_text())
        elif p.suffix == ".json":
            doc = json.loads(p.read_text())
        else:
            raise ConfigError(f"config must be .toml or .json, got {p.suffix!r}")
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    return ExperimentConfig.from_dict(doc)


def _add_config_args(parser):
    parser.add_argument("--config", help="TOML or JSON experiment config")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--master-seed", dest="master_seed", type=int)
    parser.add_argument("--replicates", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--shadow-count", dest="shadow_count", type=int)


def _overrides(args, names):
    return {n: getattr(args, n, None) for n in names}


def _config_from(args) -> ExperimentConfig:
    names = ("output_dir", "master_seed", "replicates", "workers", "shadow_count")
    return _load_config(args.config, _overrides(args, names))


def cmd_gen_data(args) -> int:
    config = _config_from(args)
    dataset = harness.build_dataset(config, config.master_seed)
    out = Path(args.out)
    if out.suffix == ".csv":
        data.to_csv(dataset, out)
    else:
        data.save_snapshot(dataset, out, seed_provenance=config.master_seed)
    print(f"wrote {dataset.sample_count}x{dataset.feature_count} dataset to {out}")
    return EXIT_OK


def _resolve_privacy(args, config: ExperimentConfig, n: int):
    if args.epsilon is not None and args.noise_multiplier is not None:
        raise ConfigError("give exactly one of --epsilon / --noise-multiplier")
    steps = dp.derive_step_count(config.epochs, config.sampling_rate)
    clip = args.clip_norm if args.clip_norm is not None else config.clip_norm
    delta = args.delta if args.delta is not None else config.delta
    if args.noise_multiplier is not None:
        sigma = args.noise_multiplier
    else:
        epsilon = args.epsilon if args.epsilon is not None else config.privacy_grid[-1]
        sigma = dp.calibrate_noise(epsilon, delta, config.sampling_rate, steps, clip)
    return dp.PrivacySpec(clip, sigma, config.sampling_rate, steps, delta,
                          epsilon_target=args.epsilon)


def _load_dataset_arg(path: str) -> data.DualTaskDataset:
    return data.from_csv(path) if path.endswith(".csv") else data.load_snapshot(path)


def cmd_train(args) -> int:
    config = _config_from(args)
    dataset = _load_dataset_arg(args.data)
    labels = dataset.labels_for(args.task)
    model = models.train_plain(dataset.features, labels, config.model_spec(),
                               config.train_config(config.master_seed),
                               num_classes=dataset.num_classes_for(args.task))
    models.save_model(model, args.out)
    acc = models.accuracy(model, dataset.features, labels)
    print(f"trained {args.task} model; train accuracy {acc:.4f}; saved to {args.out}")
    return EXIT_OK


def cmd_train_dp(args) -> int:
    config = _config_from(args)
    dataset = _load_dataset_arg(args.data)
    labels = dataset.labels_for(args.task)
    privacy = _resolve_privacy(args, config, dataset.sample_count)
    model, report = dp.train_dp(dataset.features, labels, config.model_spec(),
                                config.train_config(config.master_seed), privacy,
                                num_classes=dataset.num_classes_for(args.task))
    models.save_model(model, args.out)
    report_path = Path(args.out).with_suffix(".accounting.json")
    report_path.write_text(json.dumps(dataclasses.asdict(report), indent=2))
    print(f"trained with sigma={privacy.noise_multiplier:.4g}; "
          f"accounted epsilon={report.epsilon:.4g} (delta={report.delta:g}); "
          f"model at {args.out}, accounting at {report_path}")
    return EXIT_OK


def cmd_attack(args) -> int:
    config = _config_from(args)
    dataset = _load_dataset_arg(args.data)
    privacy = None
    if args.epsilon is not None or args.noise_multiplier is not None:
        privacy = _resolve_privacy(args, config, dataset.sample_count)
    trainer = attack.TrainerSpec(config.model_spec(), config.train_config(), privacy)
    ensemble = attack.build_shadow_ensemble(dataset, config.attack_task,
                                            config.shadow_count, trainer,
                                            config.master_seed)
    report = attack.compute_asr(ensemble, dataset, config.attack_task,
                                config.attack_threshold, config.null_mode)
    outdir = Path(config.output_dir)
    attack.save_asr_report(report, outdir, trainer=trainer)
    if args.save_ensemble:
        attack.save_ensemble(ensemble, outdir / "ensemble")
    print(f"ASR mean={report.asr_mean:.4f} max={report.asr_max:.4f} "
          f"(n={report.n_models}, mode={report.null_mode}); reports in {outdir}")
    return EXIT_OK


def cmd_explain(args) -> int:
    config = _config_from(args)
    dataset = _load_dataset_arg(args.data)
    model = models.load_model(args.model)
    labels = dataset.labels_for(args.task)
    raw = explain.explain_dataset(model, dataset.features, labels,
                                  config.explainer, seed=config.master_seed,
                                  num_permutations=config.num_permutations)
    clipped = np.maximum(raw, 0.0)
    by_class = explain.class_aggregate(clipped, labels, args.task, config.explainer)
    explain.save_sensitivities(by_class, args.out)
    if args.per_sample_out:
        np.savetxt(args.per_sample_out, raw, delimiter=",")
    print(f"wrote class-wise {args.task} sensitivities for "
          f"{len(by_class)} classes to {args.out}")
    return EXIT_OK


def cmd_mask(args) -> int:
    config = _config_from(args)
    utility = explain.load_sensitivities(args.utility)
    privacy = explain.load_sensitivities(args.privacy)
    masks, budgets, lp_bounds = {}, {}, {}
    for c, s_vec in privacy.items():
        u_vec = utility.get(c)
        u_values = u_vec.values if u_vec is not None else \
            np.mean([v.values for v in utility.values()], axis=0)
        solution = masking.optimize_mask(u_values, s_vec.values, config.alpha)
        masks[c] = solution.mask
        budgets[c] = solution.budget
        if solution.lp_bound is not None:
            lp_bounds[c] = solution.lp_bound
    mask_set = masking.ClassMaskSet(masks, config.alpha, "optimized", budgets,
                                    lp_bounds, explainer=config.explainer,
                                    seed=config.master_seed)
    masking.save_mask_set(mask_set, args.out)
    print(f"wrote masks for {len(masks)} classes to {args.out} "
          f"(alpha={config.alpha}, masked per class: {mask_set.masked_counts})")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    config = _config_from(args)
    dataset = _load_dataset_arg(args.data)
    identity_model = models.load_model(args.identity_model)
    utility_model = models.load_model(args.utility_model)
    masked, mask_set = masking.feature_masking_pipeline(
        dataset, identity_model, utility_model, config.explainer, config.alpha,
        seed=config.master_seed, num_permutations=config.num_permutations)
    data.save_snapshot(masked, args.out, seed_provenance=config.master_seed)
    masking.save_mask_set(mask_set, Path(args.out).with_suffix(".masks.csv"))
    print(f"masked dataset at {args.out}; masked per class: "
          f"{mask_set.masked_counts}; fallbacks: {mask_set.fallbacks or 'none'}")
    return EXIT_OK


_SWEEPS = {
    "asr-vs-epsilon": harness.run_asr_vs_epsilon,
    "masked-fraction": harness.run_masked_fraction_sweep,
    "label-randomization": harness.run_label_randomization_sweep,
    "alpha": harness.run_alpha_sweep,
}


def cmd_sweep(args) -> int:
    config = _config_from(args)
    result = _SWEEPS[args.kind](config)
    manifest = harness.emit_outputs(result, config.output_dir)
    print(f"{result.kind}: {len(result.rows)} rows "
          f"({result.failed_rows} failed) in {config.output_dir}; "
          f"digest {manifest['results_digest'][:12]}")
    return EXIT_PARTIAL if result.failed_rows else EXIT_OK


def cmd_equivalence(args) -> int:
    config = _config_from(args)
    report = harness.run_equivalence(config, args.epsilon_original)
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "equivalence.json").write_text(json.dumps(report, indent=2))
    for entry in report["replicates"]:
        eq = entry["epsilon_equivalent"]
        print(f"replicate {entry['replicate']}: epsilon {args.epsilon_original} -> "
              f"{eq if eq is not None else 'no equivalent found'}")
    print(f"report at {outdir / 'equivalence.json'}")
    return EXIT_OK


def cmd_timing(args) -> int:
    config = _config_from(args)
    rows = harness.run_timing(config)
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "timing_report.csv", "w") as fh:
        fh.write("stage,unit,mean_s,std_s,count\n")
        for r in rows:
            fh.write(f"{r['stage']},{r['unit']},{r['mean_s']:.6f},"
                     f"{r['std_s']:.6f},{r['count']}\n")
    for r in rows:
        print(f"{r['stage']}: {r['mean_s']:.4f}s +/- {r['std_s']:.4f}s "
              f"per {r['unit']} ({r['count']} measured)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privmask",
        description="Practical privacy-risk measurement (offline LiRA ASR) and "
                    "utility-optimized feature masking for DP-SGD training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset from the config")
    _add_config_args(p)
    p.add_argument("--out", required=True, help=".csv or .npz output path")
    p.set_defaults(fn=cmd_gen_data)

    for name, fn, task_default in (("train", cmd_train, "utility"),
                                   ("train-dp", cmd_train_dp, "utility")):
        p = sub.add_parser(name, help=f"{name} a model on one task")
        _add_config_args(p)
        p.add_argument("--data", required=True)
        p.add_argument("--task", choices=data.TASKS, default=task_default)
        p.add_argument("--out", required=True, help="model snapshot path")
        if name == "train-dp":
            p.add_argument("--epsilon", type=float)
            p.add_argument("--noise-multiplier", dest="noise_multiplier", type=float)
            p.add_argument("--clip-norm", dest="clip_norm", type=float)
            p.add_argument("--delta", type=float)
        p.set_defaults(fn=fn)

    p = sub.add_parser("attack", help="shadow-ensemble LiRA attack on a dataset")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epsilon", type=float, help="DP-train the shadow models")
    p.add_argument("--noise-multiplier", dest="noise_multiplier", type=float)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--save-ensemble", action="store_true")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("explain", help="class-wise feature sensitivities")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=data.TASKS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-sample-out", dest="per_sample_out",
                   help="also dump raw per-sample attributions (large)")
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("mask", help="optimize masks from sensitivity CSVs")
    _add_config_args(p)
    p.add_argument("--utility", required=True, help="utility sensitivity CSV")
    p.add_argument("--privacy", required=True, help="privacy sensitivity CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_mask)

    p = sub.add_parser("pipeline", help="end-to-end feature masking of a dataset")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--identity-model", dest="identity_model", required=True)
    p.add_argument("--utility-model", dest="utility_model", required=True)
    p.add_argument("--out", required=True, help=".npz for the masked dataset")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("sweep", help="run one experiment sweep")
    _add_config_args(p)
    p.add_argument("kind", choices=sorted(_SWEEPS))
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("equivalence", help="approximately equivalent epsilon search")
    _add_config_args(p)
    p.add_argument("--epsilon-original", dest="epsilon_original", type=float,
                   required=True)
    p.set_defaults(fn=cmd_equivalence)

    p = sub.add_parser("timing", help="wall-clock cost report")
    _add_config_args(p)
    p.set_defaults(fn=cmd_timing)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
