"""Diagonal of the empirical Fisher information matrix.

Each score is the dataset mean of the squared per-example gradient of
log p(y|x; w), taken at a fixed parameter vector with the gold labels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .models import ModelSpec
from .params import ParamVector
from .tensor_core import forward_backward, pairwise_sum

FISHER_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FisherDiag:
    scores: np.ndarray
    at_params_hash: str
    dataset_size: int

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1:
            raise ShapeError("fisher scores must be a flat vector")
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise NumericError("fisher scores must be finite and nonnegative")
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.scores.size


def empirical_fisher_diag(spec: ModelSpec, params: ParamVector, dataset) -> FisherDiag:
    """Mean squared per-example log-likelihood gradient, per coordinate.

    Examples are visited in dataset order; the reduction is a pairwise
    tree so results are bit-reproducible.
    """
    if len(dataset) == 0:
        raise ConfigError("fisher estimation needs a nonempty dataset")
    graph = spec.log_likelihood_graph()
    squares = np.empty((len(dataset), len(params)))
    for j in range(len(dataset)):
        example = dataset.take([j])
        try:
            _, g = forward_backward(graph, params, example)
        except NumericError as exc:
            raise NumericError(f"non-finite gradient at example {j}: {exc}") from exc
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at example {j}")
        squares[j] = g * g
    scores = pairwise_sum(squares, axis=0) / len(dataset)
    return FisherDiag(scores, params.content_hash(), len(dataset))


def save_fisher(path, fisher: FisherDiag) -> None:
    record = {
        "format_version": FISHER_FORMAT_VERSION,
        "scores": fisher.scores.tolist(),
        "at_params_hash": fisher.at_params_hash,
        "dataset_size": fisher.dataset_size,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(record, fh)
    os.replace(tmp, path)


def load_fisher(path) -> FisherDiag:
    with open(path) as fh:
        record = json.load(fh)
    if record.get("format_version") != FISHER_FORMAT_VERSION:
        raise ConfigError(f"unsupported fisher format {record.get('format_version')!r}")
    return FisherDiag(
        np.asarray(record["scores"], dtype=np.float64),
        record["at_params_hash"],
        int(record["dataset_size"]),
    )
