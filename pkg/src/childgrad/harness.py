"""Experiment harness: run configs, the training loop, probes, replication."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datasets import (
    DataSpec,
    Dataset,
    DatasetSplits,
    TAG_MASK,
    TAG_ORDER,
    TAG_PROBE,
    make_dataset,
    seeded_rng,
    subsample,
)
from .errors import ConfigError, NumericError, ShapeError
from .fisher import FisherDiag, empirical_fisher_diag
from .masking import (
    GradMask,
    bernoulli_mask,
    fisher_topk_mask,
    jaccard,
    load_mask,
    lowest_fisher_mask,
    prune_params,
    random_fixed_mask,
    save_mask,
    topk_layer_mask,
)
from .models import (
    ModelSpec,
    default_metric,
    evaluate,
    hidden_representation,
    init_params,
    load_checkpoint,
)
from .optim import (
    AdamState,
    OptimConfig,
    child_tuning_adam_step,
    clip_global_norm,
    lr_schedule,
    sgd_masked_step,
    weight_decay_to_pretrained_loss,
)
from .params import ParamVector
from .tensor_core import forward_backward
from .theory import sharpness_power_iteration

log = logging.getLogger(__name__)

METHODS_WITH_RATIO = ("child_f", "child_d", "random_d", "lowest_d", "prune_d")
FISHER_METHODS = ("child_d", "lowest_d", "prune_d")
ALL_METHODS = ("vanilla", *METHODS_WITH_RATIO, "topk_layers", "weight_decay_w0")


@dataclass(frozen=True)
class MethodSpec:
    """Fine-tuning method plus its single hyperparameter."""

    name: str
    p: float | None = None
    k_layers: int | None = None
    lam: float | None = None
    mask_head: bool = False

    def validate(self) -> "MethodSpec":
        if self.name not in ALL_METHODS:
            raise ConfigError(f"unknown method {self.name!r}")
        if self.name in METHODS_WITH_RATIO:
            if self.p is None or not 0.0 < self.p <= 1.0:
                raise ConfigError(f"method {self.name} needs p in (0, 1]")
        if self.name == "topk_layers" and (self.k_layers is None or self.k_layers < 0):
            raise ConfigError("method topk_layers needs k_layers >= 0")
        if self.name == "weight_decay_w0" and (self.lam is None or self.lam < 0):
            raise ConfigError("method weight_decay_w0 needs lam >= 0")
        return self

    def label(self) -> str:
        if self.name in METHODS_WITH_RATIO:
            return f"{self.name}(p={self.p:g})"
        if self.name == "topk_layers":
            return f"topk_layers(k={self.k_layers})"
        if self.name == "weight_decay_w0":
            return f"weight_decay_w0(lam={self.lam:g})"
        return self.name

    def to_dict(self) -> dict:
        return {"name": self.name, "p": self.p, "k_layers": self.k_layers,
                "lam": self.lam, "mask_head": self.mask_head}

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        return cls(
            name=d["name"],
            p=d.get("p"),
            k_layers=d.get("k_layers"),
            lam=d.get("lam"),
            mask_head=bool(d.get("mask_head", False)),
        )


@dataclass(frozen=True)
class PretrainedSpec:
    """Where the starting weights come from: a fresh init or a checkpoint."""

    kind: str = "fresh"
    path: str | None = None

    def validate(self) -> "PretrainedSpec":
        if self.kind not in ("fresh", "checkpoint"):
            raise ConfigError(f"unknown pretrained kind {self.kind!r}")
        if self.kind == "checkpoint" and not self.path:
            raise ConfigError("checkpoint pretrained spec needs a path")
        return self

    def descriptor(self) -> str:
        return self.kind if self.kind == "fresh" else f"checkpoint:{self.path}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "path": self.path}

    @classmethod
    def from_dict(cls, d) -> "PretrainedSpec":
        if isinstance(d, str):
            return cls(kind=d)
        return cls(kind=d.get("kind", "fresh"), path=d.get("path"))


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run depends on, seed included."""

    model: ModelSpec
    data: DataSpec
    method: MethodSpec
    optim: OptimConfig
    epochs: int
    batch_size: int | None = None
    pretrained: PretrainedSpec = field(default_factory=PretrainedSpec)
    subsample_n: int | None = None
    seed: int = 0
    eval_metric: str | None = None
    fisher_samples: int | None = None
    sharpness_iters: int | None = None

    def validate(self) -> "RunConfig":
        self.method.validate()
        self.pretrained.validate()
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.subsample_n is not None and self.subsample_n < 1:
            raise ConfigError("subsample_n must be positive")
        if self.fisher_samples is not None and self.fisher_samples < 1:
            raise ConfigError("fisher_samples must be positive")
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "method": self.method.to_dict(),
            "optim": self.optim.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "pretrained": self.pretrained.to_dict(),
            "subsample_n": self.subsample_n,
            "seed": self.seed,
            "eval_metric": self.eval_metric,
            "fisher_samples": self.fisher_samples,
            "sharpness_iters": self.sharpness_iters,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            return cls(
                model=ModelSpec.from_dict(d["model"]),
                data=DataSpec.from_dict(d["data"]),
                method=MethodSpec.from_dict(d["method"]),
                optim=OptimConfig.from_dict(d.get("optim", {})),
                epochs=int(d["epochs"]),
                batch_size=d.get("batch_size"),
                pretrained=PretrainedSpec.from_dict(d.get("pretrained", {"kind": "fresh"})),
                subsample_n=d.get("subsample_n"),
                seed=int(d.get("seed", 0)),
                eval_metric=d.get("eval_metric"),
                fisher_samples=d.get("fisher_samples"),
                sharpness_iters=d.get("sharpness_iters"),
            )
        except KeyError as exc:
            raise ConfigError(f"config missing section {exc}") from exc

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("seed")  # seed is reported separately
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class RunReport:
    """Per-run record; everything except wall time is seed-deterministic."""

    config_hash: str
    seed: int
    method: str
    metric_name: str
    train_loss: list
    eval_metrics: dict
    final_metrics: dict
    mask_summary: dict
    total_steps: int
    pretrained: str
    fisher_samples: int | None
    sharpness: float | None
    wall_clock_seconds: float

    def canonical_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("wall_clock_seconds")  # the one field timing may perturb
        return d

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.canonical_dict(), sort_keys=True).encode()

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


@dataclass
class TrainOutcome:
    """Report plus the in-memory state tests and analyses poke at."""

    report: RunReport
    final_params: ParamVector
    start_params: ParamVector
    pretrained_params: ParamVector
    adam_state: AdamState
    fixed_mask: GradMask | None
    fisher: FisherDiag | None
    early_step_mask_indices: list
    final_step_mask_indices: np.ndarray | None
    train_data: Dataset


def _check_task_compat(spec: ModelSpec, train: Dataset) -> None:
    if train.input_dim != spec.input_dim:
        raise ConfigError(
            f"dataset has {train.input_dim} features, model wants {spec.input_dim}"
        )
    if spec.output == "classifier":
        if not train.is_classification():
            raise ConfigError("classifier model on non-integer labels")
        if train.labels.size and int(train.labels.max()) >= spec.num_classes:
            raise ConfigError("class index out of range for model head")


def _resolve_pretrained(config: RunConfig) -> ParamVector:
    if config.pretrained.kind == "fresh":
        return init_params(config.model, config.seed)
    ckpt_spec, params, _ = load_checkpoint(config.pretrained.path)
    if ckpt_spec.to_dict() != config.model.to_dict():
        raise ConfigError("checkpoint architecture differs from configured model")
    return params


def _build_fixed_mask(config: RunConfig, fisher_diag, head_idx, registry,
                      mask_rng) -> GradMask | None:
    m = config.method
    head = [] if m.mask_head else head_idx
    if m.name == "child_d" or m.name == "prune_d":
        return fisher_topk_mask(fisher_diag, head, m.p)
    if m.name == "lowest_d":
        return lowest_fisher_mask(fisher_diag, head, m.p)
    if m.name == "random_d":
        return random_fixed_mask(registry.size, head, m.p, mask_rng)
    if m.name == "topk_layers":
        return topk_layer_mask(registry, m.k_layers, head_idx)
    return None  # vanilla, child_f (per step), weight_decay_w0


def run_training(config: RunConfig) -> TrainOutcome:
    """Execute one run; see train_run for the report-only wrapper."""
    config.validate()
    t0 = time.perf_counter()
    spec = config.model
    splits = make_dataset(config.data, config.seed)
    train = splits.train
    if config.subsample_n is not None:
        if config.subsample_n > len(train):
            raise ConfigError(
                f"subsample_n {config.subsample_n} exceeds train size {len(train)}"
            )
        train = subsample(train, config.subsample_n, config.seed)
    _check_task_compat(spec, train)

    w0 = _resolve_pretrained(config)
    registry = w0.registry
    head_idx = spec.head_indices(registry)

    fisher_diag = None
    fisher_cap = None
    if config.method.name in FISHER_METHODS:
        fisher_ds = train
        if config.fisher_samples is not None and config.fisher_samples < len(train):
            fisher_cap = int(config.fisher_samples)
            fisher_ds = train.take(np.arange(fisher_cap))
        fisher_diag = empirical_fisher_diag(spec, w0, fisher_ds)

    mask_rng = seeded_rng(config.seed, TAG_MASK)
    fixed_mask = _build_fixed_mask(config, fisher_diag, head_idx, registry, mask_rng)

    params = w0
    if config.method.name == "prune_d":
        params = prune_params(w0, fixed_mask)
    start_params = params.copy()

    batch_size = config.batch_size or len(train)
    n_batches = math.ceil(len(train) / batch_size)
    total_steps = config.epochs * n_batches
    optim_cfg = config.optim.resolved(total_steps)

    graph = spec.loss_graph()
    metric = config.eval_metric or default_metric(spec)
    eval_sets = splits.eval_sets()
    state = AdamState.zeros(len(params))
    order_rng = seeded_rng(config.seed, TAG_ORDER)

    train_loss = []
    eval_history = {name: [] for name in eval_sets}
    early_masks = []
    final_step_mask = fixed_mask
    step = 0
    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(train))
        batch_losses = []
        for b in range(n_batches):
            batch = train.take(perm[b * batch_size:(b + 1) * batch_size])
            try:
                loss, grads = forward_backward(graph, params, batch)
                if config.method.name == "weight_decay_w0":
                    _, penalty_grad = weight_decay_to_pretrained_loss(
                        params, w0, config.method.lam)
                    grads = grads + penalty_grad
                if optim_cfg.clip_max_norm is not None:
                    grads = clip_global_norm(grads, optim_cfg.clip_max_norm)
                if config.method.name == "child_f":
                    step_mask = bernoulli_mask(
                        len(params), head_idx, config.method.p, mask_rng,
                        mask_head=config.method.mask_head)
                else:
                    step_mask = fixed_mask
                if step < 2 and step_mask is not None:
                    early_masks.append(step_mask.positive_indices)
                lr_t = lr_schedule(step, optim_cfg)
                if optim_cfg.algo == "sgd":
                    params = sgd_masked_step(params, grads, step_mask, lr_t)
                    state = AdamState(state.m, state.v, state.t + 1)
                else:
                    params, state = child_tuning_adam_step(
                        params, grads, step_mask, state, optim_cfg, lr_t)
            except NumericError as exc:
                raise NumericError(
                    f"run diverged at epoch {epoch}, step {step}: {exc}"
                ) from exc
            final_step_mask = step_mask
            batch_losses.append(loss)
            step += 1
        train_loss.append(float(np.mean(batch_losses)))
        for name, ds in eval_sets.items():
            eval_history[name].append(evaluate(spec, params, ds, metric))

    sharpness = None
    if config.sharpness_iters:
        sharpness = sharpness_power_iteration(
            spec, params, train, config.sharpness_iters, seed=config.seed)

    if fixed_mask is not None:
        mask_summary = {
            "kind": fixed_mask.kind, "p": fixed_mask.p,
            "positive_count": fixed_mask.positive_count,
            "param_count": len(fixed_mask),
        }
    elif config.method.name == "child_f":
        mask_summary = {
            "kind": "bernoulli_f", "p": config.method.p,
            "positive_count": int(final_step_mask.positive_count),
            "param_count": len(params),
        }
    else:
        mask_summary = {"kind": "none", "p": 1.0,
                        "positive_count": len(params), "param_count": len(params)}

    report = RunReport(
        config_hash=config.config_hash(),
        seed=config.seed,
        method=config.method.label(),
        metric_name=metric,
        train_loss=train_loss,
        eval_metrics=eval_history,
        final_metrics={name: hist[-1] for name, hist in eval_history.items()},
        mask_summary=mask_summary,
        total_steps=total_steps,
        pretrained=config.pretrained.descriptor(),
        fisher_samples=fisher_cap,
        sharpness=sharpness,
        wall_clock_seconds=time.perf_counter() - t0,
    )
    return TrainOutcome(
        report=report,
        final_params=params,
        start_params=start_params,
        pretrained_params=w0,
        adam_state=state,
        fixed_mask=fixed_mask,
        fisher=fisher_diag,
        early_step_mask_indices=early_masks,
        final_step_mask_indices=(
            final_step_mask.positive_indices if final_step_mask is not None else None),
        train_data=train,
    )


def train_run(config: RunConfig, out_dir=None) -> RunReport:
    """Run one config and optionally write its report and mask files."""
    outcome = run_training(config)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        stem = f"run_{outcome.report.config_hash}_seed{config.seed}"
        report_path = os.path.join(out_dir, f"{stem}.json")
        with open(f"{report_path}.tmp", "w") as fh:
            fh.write(outcome.report.to_json())
        os.replace(f"{report_path}.tmp", report_path)
        if outcome.fixed_mask is not None:
            mask_path = os.path.join(out_dir, f"{stem}.mask.json")
            save_mask(mask_path, outcome.fixed_mask)
            outcome.report.mask_summary["mask_file"] = mask_path
    return outcome.report


def linear_probe(spec: ModelSpec, frozen_params: ParamVector,
                 probe_splits: DatasetSplits, probe_epochs: int, seed: int,
                 eta: float = 0.05, batch_size: int = 32) -> float:
    """Train a fresh linear head on frozen representations.

    Representations come from the last hidden activation of the frozen
    model (raw features when it has no hidden layers, which is logged).
    Returns the head's metric on the probe eval split.
    """
    if probe_epochs < 1:
        raise ConfigError("probe_epochs must be at least 1")
    if not spec.hidden_dims:
        log.warning("probe on a depth-0 model falls back to raw features")
    reps_train = hidden_representation(spec, frozen_params, probe_splits.train.features)
    reps_eval = hidden_representation(spec, frozen_params, probe_splits.eval.features)
    train = Dataset(reps_train, probe_splits.train.labels)
    eval_set = Dataset(reps_eval, probe_splits.eval.labels)

    if train.is_classification():
        n_classes = int(max(train.labels.max(), eval_set.labels.max())) + 1
        head_spec = ModelSpec(input_dim=train.input_dim, hidden_dims=(),
                              output="classifier", num_classes=max(2, n_classes))
    else:
        head_spec = ModelSpec(input_dim=train.input_dim, hidden_dims=(),
                              output="regressor")
    head = init_params(head_spec, seed)
    graph = head_spec.loss_graph()

    bs = min(batch_size, len(train))
    n_batches = math.ceil(len(train) / bs)
    optim_cfg = OptimConfig(eta=eta, clip_max_norm=1.0).resolved(
        probe_epochs * n_batches)
    state = AdamState.zeros(len(head))
    rng = seeded_rng(seed, TAG_PROBE)
    step = 0
    for _ in range(probe_epochs):
        perm = rng.permutation(len(train))
        for b in range(n_batches):
            batch = train.take(perm[b * bs:(b + 1) * bs])
            _, grads = forward_backward(graph, head, batch)
            grads = clip_global_norm(grads, optim_cfg.clip_max_norm)
            lr_t = lr_schedule(step, optim_cfg)
            head, state = child_tuning_adam_step(head, grads, None, state,
                                                 optim_cfg, lr_t)
            step += 1
    return evaluate(head_spec, head, eval_set, default_metric(head_spec))


def overlap_matrix(masks) -> np.ndarray:
    """Symmetric Jaccard matrix over masks or mask-file paths."""
    loaded = [load_mask(m) if isinstance(m, (str, os.PathLike)) else m for m in masks]
    if len(loaded) < 2:
        raise ConfigError("overlap needs at least 2 masks")
    counts = {len(m) for m in loaded}
    if len(counts) != 1:
        raise ShapeError(f"masks disagree on parameter count: {sorted(counts)}")
    n = len(loaded)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = jaccard(loaded[i], loaded[j])
    return matrix


@dataclass
class AggregateSummary:
    """Mean/max/std of final metrics across seeds, plus failures."""

    config_hash: str
    method: str
    seeds: list
    reports: list
    failures: dict
    stats: dict
    partial: bool

    def to_rows(self):
        rows = []
        for name, s in sorted(self.stats.items()):
            rows.append({"eval_set": name, **s})
        return rows


def replicate_and_aggregate(config: RunConfig, seeds, jobs: int = 1,
                            out_dir=None) -> AggregateSummary:
    """Run the config once per seed and aggregate final metrics."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")

    def one(seed):
        return train_run(dataclasses.replace(config, seed=int(seed)), out_dir)

    reports, failures = {}, {}
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {seed: pool.submit(one, seed) for seed in seeds}
            for seed, fut in futures.items():
                try:
                    reports[seed] = fut.result()
                except Exception as exc:  # noqa: BLE001 - recorded, not masked
                    failures[seed] = f"{type(exc).__name__}: {exc}"
    else:
        for seed in seeds:
            try:
                reports[seed] = one(seed)
            except Exception as exc:  # noqa: BLE001
                failures[seed] = f"{type(exc).__name__}: {exc}"

    ordered = [reports[s] for s in sorted(reports)]
    stats = {}
    if ordered:
        for name in ordered[0].final_metrics:
            values = [r.final_metrics[name] for r in ordered]
            stats[name] = {
                "mean": float(np.mean(values)),
                "max": float(np.max(values)),
                "std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
                "n": len(values),
            }
    return AggregateSummary(
        config_hash=config.config_hash(),
        method=config.method.label(),
        seeds=sorted(reports),
        reports=ordered,
        failures=failures,
        stats=stats,
        partial=bool(failures),
    )
