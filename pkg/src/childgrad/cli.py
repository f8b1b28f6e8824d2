"""Command-line entry point for reproducible masked fine-tuning runs."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .datasets import make_dataset, seeded_rng, subsample, TAG_MASK
from .errors import (
    ChildgradError,
    ConfigError,
    NumericError,
    OutputExistsError,
    ShapeError,
    UndefinedOverlapError,
)
from .fisher import empirical_fisher_diag, load_fisher, save_fisher
from .harness import (
    RunConfig,
    RunReport,
    _resolve_pretrained,
    overlap_matrix,
    replicate_and_aggregate,
)
from .masking import (
    bernoulli_mask,
    fisher_topk_mask,
    lowest_fisher_mask,
    random_fixed_mask,
    save_mask,
    topk_layer_mask,
)
from .models import load_checkpoint
from .theory import (
    BoundInputs,
    NoiseModel,
    escape_rho_bound,
    generalization_bound,
    sharpness_power_iteration,
    simulate_escape_frequency,
    simulate_update_covariance,
    masked_update_moments,
)
from . import reporting

ENV_SEED = "CHILDGRAD_SEED"


class OutputDir:
    """Target directory that refuses to clobber unless --overwrite is set."""

    def __init__(self, root, overwrite: bool):
        self.root = root
        self.overwrite = overwrite
        os.makedirs(root, exist_ok=True)

    def path(self, name: str) -> str:
        target = os.path.join(self.root, name)
        if os.path.exists(target) and not self.overwrite:
            raise OutputExistsError(
                f"{target} exists; pass --overwrite to replace it")
        return target


def _parse_seeds(text: str):
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc


def _default_seed_text() -> str:
    return os.environ.get(ENV_SEED, "0")


def _apply_overrides(tree: dict, overrides):
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = value
    return tree


def _load_config(args) -> dict:
    if not args.config:
        raise ConfigError("this subcommand needs --config PATH")
    try:
        with open(args.config) as fh:
            tree = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {args.config!r}: {exc}") from exc
    return _apply_overrides(tree, args.overrides or [])


def _run_config(args, seed: int) -> RunConfig:
    cfg = RunConfig.from_dict({**_load_config(args), "seed": seed})
    return cfg.validate()


def _add_common(sub, config=True):
    if config:
        sub.add_argument("--config", help="JSON config file mirroring RunConfig")
    sub.add_argument("--seed", default=None,
                     help=f"seed or comma list (default ${ENV_SEED} or 0)")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--overwrite", action="store_true",
                     help="replace existing output files")
    sub.add_argument("overrides", nargs="*", metavar="key=value",
                     help="dotted config overrides, e.g. method.p=0.3")


def cmd_train(args) -> int:
    seeds = _parse_seeds(args.seed or _default_seed_text())
    config = _run_config(args, seeds[0])
    out = OutputDir(args.out, args.overwrite)
    # pre-claim every output path so a half-written directory never clobbers
    for seed in seeds:
        out.path(f"run_{config.config_hash()}_seed{seed}.json")
    agg_csv = out.path("aggregate.csv")
    summary_txt = out.path("summary.txt")
    curves_png = out.path("learning_curves.png")

    summary = replicate_and_aggregate(config, seeds, jobs=args.jobs,
                                      out_dir=args.out)
    rows = []
    for rep in summary.reports:
        row = {"method": rep.method, "seed": rep.seed,
               "train_loss_final": rep.train_loss[-1]}
        for name, value in sorted(rep.final_metrics.items()):
            row[f"final_{name}_{rep.metric_name}"] = value
        rows.append(row)
    reporting.write_csv(agg_csv, rows)
    reporting.write_summary_text(summary_txt, [summary])
    if summary.reports:
        reporting.fig_learning_curves(summary.reports, curves_png,
                                      summary.reports[0].metric_name)
    print(reporting.summary_text([summary]), end="")
    if summary.partial and not summary.reports:
        raise NumericError("every seed failed: " + "; ".join(
            summary.failures.values()))
    return 0


def cmd_fisher(args) -> int:
    seed = _parse_seeds(args.seed or _default_seed_text())[0]
    config = _run_config(args, seed)
    out = OutputDir(args.out, args.overwrite)
    target = out.path("fisher.json")
    splits = make_dataset(config.data, seed)
    train = splits.train
    if config.subsample_n is not None:
        train = subsample(train, config.subsample_n, seed)
    if config.fisher_samples is not None and config.fisher_samples < len(train):
        train = train.take(np.arange(config.fisher_samples))
    w0 = _resolve_pretrained(config)
    diag = empirical_fisher_diag(config.model, w0, train)
    save_fisher(target, diag)
    print(f"wrote {target} (|D|={diag.dataset_size}, n={len(diag)})")
    return 0


def cmd_mask(args) -> int:
    seed = _parse_seeds(args.seed or _default_seed_text())[0]
    config = _run_config(args, seed)
    out = OutputDir(args.out, args.overwrite)
    target = out.path(f"mask_{args.kind}.json")
    registry = config.model.registry()
    head = config.model.head_indices(registry)
    rng = seeded_rng(seed, TAG_MASK)
    if args.kind in ("fisher_d", "lowest_d"):
        if not args.fisher:
            raise ConfigError(f"mask kind {args.kind} needs --fisher FILE")
        diag = load_fisher(args.fisher)
        if len(diag) != registry.size:
            raise ShapeError("fisher file misaligned with configured model")
        build = fisher_topk_mask if args.kind == "fisher_d" else lowest_fisher_mask
        mask = build(diag, head, args.p)
    elif args.kind == "random_d":
        mask = random_fixed_mask(registry.size, head, args.p, rng)
    elif args.kind == "bernoulli_f":
        mask = bernoulli_mask(registry.size, head, args.p, rng)
    elif args.kind == "topk_layers":
        if args.k_layers is None:
            raise ConfigError("mask kind topk_layers needs --k-layers")
        mask = topk_layer_mask(registry, args.k_layers, head)
    else:
        raise ConfigError(f"unknown mask kind {args.kind!r}")
    save_mask(target, mask)
    print(f"wrote {target} ({mask.positive_count}/{len(mask)} positive)")
    return 0


def cmd_overlap(args) -> int:
    out = OutputDir(args.out, args.overwrite)
    csv_path = out.path("overlap.csv")
    png_path = out.path("overlap_heatmap.png")
    matrix = overlap_matrix(args.masks)
    labels = [os.path.splitext(os.path.basename(p))[0] for p in args.masks]
    rows = []
    for i, label in enumerate(labels):
        row = {"mask": label}
        row.update({labels[j]: f"{matrix[i, j]:.6f}" for j in range(len(labels))})
        rows.append(row)
    reporting.write_csv(csv_path, rows, fieldnames=["mask", *labels])
    reporting.fig_overlap_heatmap(matrix, labels, png_path)
    print(f"wrote {csv_path}")
    return 0


def cmd_theory(args) -> int:
    seed = _parse_seeds(args.seed or _default_seed_text())[0]
    out = OutputDir(args.out, args.overwrite)
    csv1 = out.path("theory_update_variance.csv")
    csv2 = out.path("theory_bounds.csv")
    png = out.path("theory_update_variance.png")

    rows = []
    cell = 0
    for p in (0.2, 0.5, 1.0):
        for batch in (1, 4, 16):
            for eta in (args.eta,):
                noise = NoiseModel(grad_mean=np.zeros(args.dim), sigma_g=1.0,
                                   batch_size=batch, p=p, eta=eta)
                _, predicted = masked_update_moments(noise)
                rng = seeded_rng(seed, 201, cell)
                _, empirical = simulate_update_covariance(noise, args.trials, rng)
                rel = float(np.max(np.abs(empirical - predicted) / predicted))
                rows.append({
                    "p": p, "batch_size": batch, "eta": eta,
                    "predicted_var": f"{predicted[0]:.8e}",
                    "empirical_var": f"{np.mean(empirical):.8e}",
                    "rel_error": f"{rel:.6f}",
                })
                cell += 1
    reporting.write_csv(csv1, rows)
    reporting.fig_variance_check(rows, png)

    k = args.dim
    w0 = np.zeros(k)
    w = np.full(k, 0.3)
    bound_rows = []
    for i, sigma_sq in enumerate(np.geomspace(0.05, 2.0, 10)):
        inputs = BoundInputs(epsilon=1.0, delta=0.05, k=k, sigma_sq=float(sigma_sq),
                             sigma0_sq=1.0, w=w, w0=w0, sample_count=1000)
        rho = escape_rho_bound(inputs)
        rng = seeded_rng(seed, 202, i)
        freq = simulate_escape_frequency(np.full(k, rho), float(sigma_sq), 1.0,
                                         args.trials, rng)
        bound_rows.append({
            "sigma_sq": f"{sigma_sq:.6f}",
            "rho_max": f"{rho:.8e}",
            "escape_freq": f"{freq:.6f}",
            "escape_budget": f"{0.05 + 3 * np.sqrt(0.05 * 0.95 / args.trials):.6f}",
            "generalization_bound": f"{generalization_bound(inputs):.8e}",
        })
    reporting.write_csv(csv2, bound_rows)
    worst = max(float(r["rel_error"]) for r in rows)
    print(f"wrote {csv1} (worst rel error {worst:.4f}) and {csv2}")
    return 0


def cmd_sharpness(args) -> int:
    seed = _parse_seeds(args.seed or _default_seed_text())[0]
    config = _run_config(args, seed)
    out = OutputDir(args.out, args.overwrite)
    target = out.path("sharpness.json")
    if args.checkpoint:
        spec, params, _ = load_checkpoint(args.checkpoint)
        if spec.to_dict() != config.model.to_dict():
            raise ConfigError("checkpoint architecture differs from config")
    else:
        spec = config.model
        params = _resolve_pretrained(config)
    splits = make_dataset(config.data, seed)
    rho = sharpness_power_iteration(spec, params, splits.train, args.iters,
                                    seed=seed)
    record = {"rho": rho, "iters": args.iters, "seed": seed,
              "checkpoint": args.checkpoint}
    with open(f"{target}.tmp", "w") as fh:
        json.dump(record, fh, indent=1)
    os.replace(f"{target}.tmp", target)
    print(f"sharpness rho = {rho:.6g}")
    return 0


def cmd_report(args) -> int:
    out = OutputDir(args.out, args.overwrite)
    csv_path = out.path("report.csv")
    txt_path = out.path("report.txt")
    png_path = out.path("method_comparison.png")
    reports = []
    for name in sorted(os.listdir(args.runs)):
        if name.startswith("run_") and name.endswith(".json") \
                and not name.endswith(".mask.json"):
            with open(os.path.join(args.runs, name)) as fh:
                reports.append(RunReport.from_json(fh.read()))
    if not reports:
        raise ConfigError(f"no run reports found under {args.runs!r}")
    by_method = {}
    for rep in reports:
        by_method.setdefault(rep.method, []).append(rep)
    rows = []
    for method in sorted(by_method):
        group = by_method[method]
        values = [r.final_metrics.get("eval") for r in group]
        values = [v for v in values if v is not None]
        mean = float(np.mean(values))
        best = float(np.max(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        rows.append({
            "method": method, "n_runs": len(values),
            "mean": f"{mean:.6f}", "max": f"{best:.6f}", "std": f"{std:.6f}",
            "mean_max": f"{mean:.4f} ({best:.4f})",
        })
    reporting.write_csv(csv_path, rows)
    lines = [f"{'method':<28} {'mean (max)':<20} {'std':>8} {'n':>4}"]
    for r in rows:
        lines.append(f"{r['method']:<28} {r['mean_max']:<20}"
                     f" {float(r['std']):>8.4f} {int(r['n_runs']):>4d}")
    text = "\n".join(lines) + "\n"
    with open(f"{txt_path}.tmp", "w") as fh:
        fh.write(text)
    os.replace(f"{txt_path}.tmp", txt_path)
    reporting.fig_method_comparison(rows, png_path, ylabel="final eval metric")
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="childgrad",
        description="Masked fine-tuning experiments: train, analyze, report.")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    train = subs.add_parser("train", help="run one config across seeds")
    _add_common(train)
    train.add_argument("--jobs", type=int, default=1,
                       help="parallel workers across seeds")
    train.set_defaults(func=cmd_train)

    fisher = subs.add_parser("fisher", help="empirical Fisher diagonal at w0")
    _add_common(fisher)
    fisher.set_defaults(func=cmd_fisher)

    mask = subs.add_parser("mask", help="build and export a gradient mask")
    _add_common(mask)
    mask.add_argument("--kind", required=True,
                      choices=["bernoulli_f", "fisher_d", "random_d",
                               "lowest_d", "topk_layers"])
    mask.add_argument("--p", type=float, default=0.3, help="mask ratio")
    mask.add_argument("--k-layers", type=int, default=None)
    mask.add_argument("--fisher", help="fisher.json for fisher_d/lowest_d")
    mask.set_defaults(func=cmd_mask)

    overlap = subs.add_parser("overlap", help="Jaccard matrix of mask files")
    overlap.add_argument("masks", nargs="+", help="mask files to compare")
    overlap.add_argument("--out", required=True)
    overlap.add_argument("--overwrite", action="store_true")
    overlap.set_defaults(func=cmd_overlap)

    theory = subs.add_parser(
        "theory", help="update-variance grid and escape/generalization bounds")
    theory.add_argument("--trials", type=int, default=100_000)
    theory.add_argument("--dim", type=int, default=4)
    theory.add_argument("--eta", type=float, default=0.1)
    theory.add_argument("--seed", default=None)
    theory.add_argument("--out", required=True)
    theory.add_argument("--overwrite", action="store_true")
    theory.set_defaults(func=cmd_theory)

    sharp = subs.add_parser("sharpness", help="top Hessian eigenvalue estimate")
    _add_common(sharp)
    sharp.add_argument("--checkpoint", help="checkpoint to analyze")
    sharp.add_argument("--iters", type=int, default=50)
    sharp.set_defaults(func=cmd_sharpness)

    report = subs.add_parser("report", help="aggregate run files into a table")
    report.add_argument("--runs", required=True, help="directory of run_*.json")
    report.add_argument("--out", required=True)
    report.add_argument("--overwrite", action="store_true")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        result = args.func(args)
        return 0 if result is None else int(result)
    except (ConfigError, ShapeError, OutputExistsError, UndefinedOverlapError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except ChildgradError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
