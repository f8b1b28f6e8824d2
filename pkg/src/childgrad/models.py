"""Small feed-forward models: specs, init, likelihoods, metrics, checkpoints."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .params import ParamVector, ShapeRegistry
from .tensor_core import (
    AddBias,
    Graph,
    LogLikelihood,
    MatMul,
    MeanSquaredError,
    Relu,
    SoftmaxCrossEntropy,
    Tanh,
    forward_backward,
    pairwise_sum,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a dense classifier or regressor.

    The final affine layer is the task head; every earlier layer is the
    backbone. `output` is "classifier" (softmax over `num_classes`) or
    "regressor" (single unit-variance Gaussian output).
    """

    input_dim: int
    hidden_dims: tuple = ()
    output: str = "classifier"
    num_classes: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("dimensions must be positive")
        if self.output not in ("classifier", "regressor"):
            raise ConfigError(f"unknown output type {self.output!r}")
        if self.output == "classifier" and self.num_classes < 2:
            raise ConfigError("classifier needs num_classes >= 2")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.output == "classifier" else 1

    @property
    def layer_dims(self):
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def head_param_names(self):
        last = self.n_layers - 1
        return {f"layer{last}.weight", f"layer{last}.bias"}

    def registry(self) -> ShapeRegistry:
        dims = self.layer_dims
        named = []
        for i in range(self.n_layers):
            named.append((f"layer{i}.weight", (dims[i], dims[i + 1]), i))
            named.append((f"layer{i}.bias", (dims[i + 1],), i))
        return ShapeRegistry.build(named)

    def head_indices(self, registry: ShapeRegistry | None = None) -> np.ndarray:
        reg = registry or self.registry()
        return reg.indices_for_names(sorted(self.head_param_names))

    def _feature_nodes(self):
        act = Tanh if self.activation == "tanh" else Relu
        nodes = []
        for i in range(self.n_layers):
            nodes.append(MatMul(f"layer{i}.weight"))
            nodes.append(AddBias(f"layer{i}.bias"))
            if i < self.n_layers - 1:
                nodes.append(act())
        return nodes

    def loss_graph(self) -> Graph:
        loss = SoftmaxCrossEntropy() if self.output == "classifier" else MeanSquaredError()
        return Graph([*self._feature_nodes(), loss])

    def log_likelihood_graph(self) -> Graph:
        return Graph([*self._feature_nodes(), LogLikelihood(self.output)])

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output": self.output,
            "num_classes": self.num_classes,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d.get("hidden_dims", ())),
            output=d.get("output", "classifier"),
            num_classes=int(d.get("num_classes", 2)),
            activation=d.get("activation", "tanh"),
        )


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, deterministic in `seed`."""
    rng = np.random.default_rng(int(seed))
    reg = spec.registry()
    data = np.zeros(reg.size)
    dims = spec.layer_dims
    for i in range(spec.n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        data[reg.slice(f"layer{i}.weight")] = w.reshape(-1)
        # biases stay exactly zero
    return ParamVector(reg, data)


def predict(spec: ModelSpec, params: ParamVector, features) -> np.ndarray:
    """Raw model outputs: logits for classifiers, means for regressors."""
    return spec.loss_graph().forward_activations(params, features)


def hidden_representation(spec: ModelSpec, params: ParamVector, features) -> np.ndarray:
    """Activation of the last hidden layer; raw features when depth is 0."""
    h = np.asarray(features, dtype=np.float64)
    if not spec.hidden_dims:
        return h
    # everything except the head's matmul + bias
    for node in spec._feature_nodes()[:-2]:
        if isinstance(node, (MatMul, AddBias)):
            h = node.forward(h, params.tensor(node.param_name).array)
        else:
            h = node.forward(h)
    return h


def log_likelihood_grad(spec: ModelSpec, params: ParamVector, example) -> np.ndarray:
    """Exact gradient of log p(y|x; w) for one example."""
    _, grads = forward_backward(spec.log_likelihood_graph(), params, example)
    return grads


def evaluate(spec: ModelSpec, params: ParamVector, dataset, metric: str) -> float:
    """Dataset-level metric: accuracy, mse, or mean_log_likelihood."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    if metric == "accuracy":
        if spec.output != "classifier":
            raise ConfigError("accuracy is only defined for classifiers")
        logits = predict(spec, params, dataset.features)
        pred = np.argmax(logits, axis=1)
        return float(np.mean(pred == np.asarray(dataset.labels)))
    if metric == "mse":
        if spec.output != "regressor":
            raise ConfigError("mse is only defined for regressors")
        out = predict(spec, params, dataset.features)
        y = np.asarray(dataset.labels, dtype=np.float64).reshape(out.shape)
        resid = out - y
        return float(pairwise_sum(np.sum(resid * resid, axis=1)) / len(dataset))
    if metric == "mean_log_likelihood":
        return float(spec.log_likelihood_graph().forward_loss(params, dataset))
    raise ConfigError(f"unknown metric {metric!r}")


def default_metric(spec: ModelSpec) -> str:
    return "accuracy" if spec.output == "classifier" else "mse"


def save_checkpoint(path, spec: ModelSpec, params: ParamVector,
                    optimizer_state=None) -> None:
    """Versioned JSON checkpoint; float64 values round-trip exactly."""
    record = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "tensors": {
            e.name: {"shape": list(e.shape), "data": params.data[e.start:e.end].tolist()}
            for e in params.registry
        },
    }
    if optimizer_state is not None:
        record["optimizer_state"] = {
            "m": optimizer_state.m.tolist(),
            "v": optimizer_state.v.tolist(),
            "t": int(optimizer_state.t),
        }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(record, fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (spec, params, optimizer_state_dict_or_None)."""
    with open(path) as fh:
        record = json.load(fh)
    if record.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format {record.get('format_version')!r}"
        )
    spec = ModelSpec.from_dict(record["spec"])
    reg = spec.registry()
    data = np.zeros(reg.size)
    for name, tensor in record["tensors"].items():
        e = reg.entry(name)
        values = np.asarray(tensor["data"], dtype=np.float64)
        if tuple(tensor["shape"]) != e.shape or values.size != e.end - e.start:
            raise ShapeError(f"checkpoint tensor {name!r} shape mismatch")
        data[e.start:e.end] = values
    return spec, ParamVector(reg, data), record.get("optimizer_state")
