"""Gradient masks: Bernoulli, Fisher top-k, ablation variants, overlap."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UndefinedOverlapError
from .params import ParamVector, ShapeRegistry

MASK_FORMAT_VERSION = 1

KINDS = ("bernoulli_f", "fisher_d", "random_d", "lowest_d", "topk_layers", "custom")


@dataclass(frozen=True)
class GradMask:
    """Per-parameter gradient multipliers; 0 freezes a coordinate.

    Fixed child-network kinds carry scale 1 on the child; the Bernoulli
    kind carries 1/p on reserved coordinates so the masked gradient stays
    an unbiased estimate of the full gradient.
    """

    scales: np.ndarray
    kind: str
    p: float

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=np.float64)
        if scales.ndim != 1:
            raise ShapeError("mask scales must be a flat vector")
        if np.any(scales < 0):
            raise ShapeError("mask scales must be nonnegative")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown mask kind {self.kind!r}")
        scales.flags.writeable = False
        object.__setattr__(self, "scales", scales)

    def __len__(self) -> int:
        return self.scales.size

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.scales > 0)

    @property
    def positive_count(self) -> int:
        return int(np.count_nonzero(self.scales))


def _as_index_array(index_set, param_count) -> np.ndarray:
    idx = np.asarray(sorted(index_set) if isinstance(index_set, set) else index_set,
                     dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= param_count):
        raise ShapeError("head index outside parameter range")
    return idx


def _check_ratio(p: float) -> float:
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1], got {p}")
    return float(p)


def child_size(p: float, n_maskable: int) -> int:
    """ceil(p * n): a positive ratio always reserves at least one entry."""
    return int(math.ceil(p * n_maskable)) if n_maskable else 0


def bernoulli_mask(param_count: int, head_index_set, p_f: float,
                   rng: np.random.Generator, mask_head: bool = False) -> GradMask:
    """Fresh task-free mask: each entry 1/p_f with probability p_f, else 0.

    Head entries stay at exactly 1 unless `mask_head` is set; a new draw
    is made on every call, one per training step.
    """
    p_f = _check_ratio(p_f)
    head = _as_index_array(head_index_set, param_count)
    keep = rng.random(param_count) < p_f
    scales = np.where(keep, 1.0 / p_f, 0.0)
    if not mask_head:
        scales[head] = 1.0
    return GradMask(scales, "bernoulli_f", p_f)


def _fixed_mask_from_order(order, param_count, head, p_d, kind) -> GradMask:
    scales = np.zeros(param_count)
    k = child_size(p_d, order.size)
    scales[order[:k]] = 1.0
    scales[head] = 1.0
    return GradMask(scales, kind, p_d)


def _maskable_indices(param_count, head) -> np.ndarray:
    maskable = np.ones(param_count, dtype=bool)
    maskable[head] = False
    return np.flatnonzero(maskable)


def fisher_topk_mask(fisher, head_index_set, p_d: float) -> GradMask:
    """Child network = highest-information coordinates, ties to lower index."""
    scores = np.asarray(getattr(fisher, "scores", fisher), dtype=np.float64)
    p_d = _check_ratio(p_d)
    head = _as_index_array(head_index_set, scores.size)
    cand = _maskable_indices(scores.size, head)
    order = cand[np.lexsort((cand, -scores[cand]))]
    return _fixed_mask_from_order(order, scores.size, head, p_d, "fisher_d")


def lowest_fisher_mask(fisher, head_index_set, p_d: float) -> GradMask:
    """Ablation: child network from the lowest-information coordinates."""
    scores = np.asarray(getattr(fisher, "scores", fisher), dtype=np.float64)
    p_d = _check_ratio(p_d)
    head = _as_index_array(head_index_set, scores.size)
    cand = _maskable_indices(scores.size, head)
    order = cand[np.lexsort((cand, scores[cand]))]
    return _fixed_mask_from_order(order, scores.size, head, p_d, "lowest_d")


def random_fixed_mask(param_count: int, head_index_set, p_d: float,
                      rng: np.random.Generator) -> GradMask:
    """Ablation: a fixed child network chosen uniformly at random."""
    p_d = _check_ratio(p_d)
    head = _as_index_array(head_index_set, param_count)
    cand = _maskable_indices(param_count, head)
    order = rng.permutation(cand)
    return _fixed_mask_from_order(order, param_count, head, p_d, "random_d")


def topk_layer_mask(registry: ShapeRegistry, k_layers: int, head_index_set) -> GradMask:
    """Unfreeze the top k non-head layers plus the head."""
    head = _as_index_array(head_index_set, registry.size)
    head_layers = {e.layer for e in registry
                   if np.any((head >= e.start) & (head < e.end))}
    body_layers = [layer for layer in registry.layer_ids() if layer not in head_layers]
    depth = len(body_layers)
    if not 0 <= k_layers <= depth:
        raise ConfigError(f"k_layers must lie in 0..{depth}, got {k_layers}")
    chosen = body_layers[depth - k_layers:]
    scales = np.zeros(registry.size)
    scales[registry.indices_for_layers(chosen)] = 1.0
    scales[head] = 1.0
    p = scales.mean() if registry.size else 1.0
    return GradMask(scales, "topk_layers", float(p))


def ones_mask(param_count: int) -> GradMask:
    return GradMask(np.ones(param_count), "custom", 1.0)


def _check_aligned(n_a, n_b, what):
    if n_a != n_b:
        raise ShapeError(f"{what}: lengths {n_a} and {n_b} differ")


def apply_mask(grads: np.ndarray, mask: GradMask) -> np.ndarray:
    """Elementwise product of gradients with mask scales."""
    grads = np.asarray(grads, dtype=np.float64)
    _check_aligned(grads.size, len(mask), "apply_mask")
    return grads * mask.scales


def prune_params(params: ParamVector, mask: GradMask) -> ParamVector:
    """Zero every coordinate outside the mask's positive set."""
    _check_aligned(len(params), len(mask), "prune_params")
    return params.with_data(np.where(mask.scales > 0, params.data, 0.0))


def jaccard_indices(a: np.ndarray, b: np.ndarray) -> float:
    """|A n B| / |A u B| over two index sets."""
    set_a, set_b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    union = set_a | set_b
    if not union:
        raise UndefinedOverlapError("both index sets are empty")
    return len(set_a & set_b) / len(union)


def jaccard(mask_a: GradMask, mask_b: GradMask) -> float:
    """Jaccard similarity of the two masks' positive-index sets."""
    _check_aligned(len(mask_a), len(mask_b), "jaccard")
    return jaccard_indices(mask_a.positive_indices, mask_b.positive_indices)


def save_mask(path, mask: GradMask) -> None:
    record = {
        "format_version": MASK_FORMAT_VERSION,
        "kind": mask.kind,
        "p": mask.p,
        "param_count": len(mask),
        "positive_indices": mask.positive_indices.tolist(),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(record, fh)
    os.replace(tmp, path)


def load_mask(path) -> GradMask:
    with open(path) as fh:
        record = json.load(fh)
    if record.get("format_version") != MASK_FORMAT_VERSION:
        raise ConfigError(f"unsupported mask format {record.get('format_version')!r}")
    kind, p = record["kind"], float(record["p"])
    scales = np.zeros(int(record["param_count"]))
    value = 1.0 / p if kind == "bernoulli_f" else 1.0
    scales[np.asarray(record["positive_indices"], dtype=np.int64)] = value
    return GradMask(scales, kind, p)
