"""Dense-tensor graphs with hand-rolled reverse-mode differentiation.

Models are expressed as a linear chain of primitive nodes (matmul,
add-bias, tanh, relu) ending in exactly one loss node (softmax
cross-entropy, mean squared error, or log-likelihood).  Everything is
64-bit and reductions over a batch use a fixed pairwise tree in
ascending example order, so repeated calls are bit-reproducible.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from .errors import NumericError, ShapeError

if TYPE_CHECKING:
    from .params import ParamVector

LOG_2PI = float(np.log(2.0 * np.pi))


def pairwise_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along `axis` with a pairwise tree in ascending index order.

    Adjacent pairs are combined repeatedly (an odd trailing element is
    carried to the next round), which pins the reduction order and keeps
    rounding error at O(log n).
    """
    arr = np.asarray(values, dtype=np.float64)
    arr = np.moveaxis(arr, axis, 0)
    if arr.shape[0] == 0:
        raise ShapeError("pairwise_sum of an empty axis")
    while arr.shape[0] > 1:
        even = (arr.shape[0] // 2) * 2
        folded = arr[0:even:2] + arr[1:even:2]
        if arr.shape[0] % 2:
            folded = np.concatenate([folded, arr[-1:]], axis=0)
        arr = folded
    return arr[0]


def pairwise_mean(values: np.ndarray, axis: int = 0) -> np.ndarray:
    n = np.asarray(values).shape[axis]
    return pairwise_sum(values, axis=axis) / n


class Tensor:
    """Flat row-major float64 storage with an explicit shape.

    Raises on construction if the flat length disagrees with the shape
    or any entry is non-finite.
    """

    __slots__ = ("shape", "data")

    def __init__(self, shape, data):
        self.shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in self.shape):
            raise ShapeError(f"non-positive dimension in shape {self.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float64).reshape(-1)
        expected = int(np.prod(self.shape))
        if self.data.size != expected:
            raise ShapeError(
                f"shape {self.shape} wants {expected} entries, got {self.data.size}"
            )
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor holds non-finite entries")

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Node:
    """One primitive in a chain graph."""

    op = "node"
    param_name: str | None = None

    @property
    def label(self) -> str:
        if self.param_name is not None:
            return f"{self.op}[{self.param_name}]"
        return self.op


class MatMul(Node):
    op = "matmul"

    def __init__(self, param_name: str):
        self.param_name = param_name

    def forward(self, x, w):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"{self.label}: input {x.shape} incompatible with weight {w.shape}"
            )
        return x @ w

    def backward(self, dout, x, w):
        # Parameter gradient reduces over examples: pin the order with a
        # pairwise tree instead of relying on BLAS accumulation.
        contrib = np.einsum("bi,bo->bio", x, dout)
        dw = pairwise_sum(contrib, axis=0)
        dx = dout @ w.T
        return dx, dw


class AddBias(Node):
    op = "add_bias"

    def __init__(self, param_name: str):
        self.param_name = param_name

    def forward(self, x, b):
        if b.ndim != 1 or x.shape[1] != b.shape[0]:
            raise ShapeError(
                f"{self.label}: input {x.shape} incompatible with bias {b.shape}"
            )
        return x + b

    def backward(self, dout):
        return dout, pairwise_sum(dout, axis=0)


class Tanh(Node):
    op = "tanh"

    def forward(self, x):
        return np.tanh(x)

    def backward(self, dout, out):
        return dout * (1.0 - out * out)


class Relu(Node):
    op = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, dout, x):
        return dout * (x > 0.0)


class LossNode(Node):
    """Scalar-producing tail node; yields per-example losses and their
    unscaled gradients with respect to the incoming activation."""

    def per_example(self, h, batch):
        raise NotImplementedError


def _check_labels(labels, num_classes, label):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(
            f"{label}: class index out of range for {num_classes} classes"
        )
    return labels.astype(np.int64)


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    return shifted - lse


class SoftmaxCrossEntropy(LossNode):
    op = "softmax_cross_entropy"

    def per_example(self, h, batch):
        y = _check_labels(batch.labels, h.shape[1], self.label)
        logp = _log_softmax(h)
        rows = np.arange(h.shape[0])
        losses = -logp[rows, y]
        dh = np.exp(logp)
        dh[rows, y] -= 1.0
        return losses, dh


class MeanSquaredError(LossNode):
    op = "mean_squared_error"

    def per_example(self, h, batch):
        y = np.asarray(batch.labels, dtype=np.float64).reshape(h.shape[0], -1)
        if y.shape != h.shape:
            raise ShapeError(
                f"{self.label}: predictions {h.shape} vs targets {y.shape}"
            )
        resid = h - y
        losses = np.sum(resid * resid, axis=1)
        return losses, 2.0 * resid


class LogLikelihood(LossNode):
    """Per-example log p(y | x).

    Classifier family reads h as logits of a softmax; regressor family
    treats h as the mean of a unit-variance Gaussian.
    """

    op = "log_likelihood"

    def __init__(self, family: str):
        if family not in ("classifier", "regressor"):
            raise ShapeError(f"unknown log-likelihood family {family!r}")
        self.family = family

    def per_example(self, h, batch):
        if self.family == "classifier":
            y = _check_labels(batch.labels, h.shape[1], self.label)
            logp = _log_softmax(h)
            rows = np.arange(h.shape[0])
            losses = logp[rows, y]
            dh = -np.exp(logp)
            dh[rows, y] += 1.0
            return losses, dh
        y = np.asarray(batch.labels, dtype=np.float64).reshape(h.shape[0], -1)
        if y.shape != h.shape:
            raise ShapeError(
                f"{self.label}: predictions {h.shape} vs targets {y.shape}"
            )
        resid = y - h
        losses = -0.5 * np.sum(resid * resid, axis=1) - 0.5 * h.shape[1] * LOG_2PI
        return losses, resid


_FEATURE_NODES = (MatMul, AddBias, Tanh, Relu)


class Graph:
    """A topologically ordered chain of feature nodes plus one loss node."""

    def __init__(self, nodes):
        nodes = list(nodes)
        if not nodes or not isinstance(nodes[-1], LossNode):
            raise ShapeError("graph must end in exactly one loss node")
        for node in nodes[:-1]:
            if not isinstance(node, _FEATURE_NODES):
                raise ShapeError(
                    f"{node.label}: loss node must be last in the graph"
                )
        self.nodes = nodes

    @property
    def feature_nodes(self):
        return self.nodes[:-1]

    @property
    def loss_node(self) -> LossNode:
        return self.nodes[-1]

    def param_names(self):
        return [n.param_name for n in self.feature_nodes if n.param_name]

    def validate_against(self, registry) -> None:
        for name in self.param_names():
            if name not in registry:
                raise ShapeError(f"graph parameter {name!r} missing from registry")

    def forward_activations(self, params: "ParamVector", features) -> np.ndarray:
        """Run the feature chain only, returning the pre-loss activation."""
        h = np.asarray(features, dtype=np.float64)
        if h.ndim != 2:
            raise ShapeError(f"features must be 2-d, got shape {h.shape}")
        for node in self.feature_nodes:
            if isinstance(node, MatMul):
                h = node.forward(h, params.tensor(node.param_name).array)
            elif isinstance(node, AddBias):
                h = node.forward(h, params.tensor(node.param_name).array)
            else:
                h = node.forward(h)
        return h

    def forward_loss(self, params: "ParamVector", batch) -> float:
        loss, _ = self._run(params, batch, need_grads=False)
        return loss

    def _run(self, params: "ParamVector", batch, need_grads: bool):
        if len(batch) == 0:
            raise ShapeError("empty batch")
        self.validate_against(params.registry)
        h = np.asarray(batch.features, dtype=np.float64)
        if h.ndim != 2:
            raise ShapeError(f"features must be 2-d, got shape {h.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            return self._run_checked(params, batch, need_grads, h)

    def _run_checked(self, params, batch, need_grads, h):

        caches = []
        for node in self.feature_nodes:
            if isinstance(node, MatMul):
                w = params.tensor(node.param_name).array
                out = node.forward(h, w)
                caches.append((node, (h, w)))
            elif isinstance(node, AddBias):
                b = params.tensor(node.param_name).array
                out = node.forward(h, b)
                caches.append((node, None))
            elif isinstance(node, Tanh):
                out = node.forward(h)
                caches.append((node, out))
            else:  # Relu
                out = node.forward(h)
                caches.append((node, h))
            h = out

        n = h.shape[0]
        losses, dh = self.loss_node.per_example(h, batch)
        loss = float(pairwise_sum(losses) / n)
        if not np.isfinite(loss):
            raise NumericError(
                f"non-finite loss at node {self.loss_node.label}"
            )
        if not need_grads:
            return loss, None

        grads = np.zeros(params.registry.size, dtype=np.float64)
        d = dh
        for node, cache in reversed(caches):
            if isinstance(node, MatMul):
                x, w = cache
                d, dw = node.backward(d, x, w)
                grads[params.registry.slice(node.param_name)] = dw.reshape(-1)
            elif isinstance(node, AddBias):
                d, db = node.backward(d)
                grads[params.registry.slice(node.param_name)] = db
            elif isinstance(node, Tanh):
                d = node.backward(d, cache)
            else:
                d = node.backward(d, cache)
        grads /= n
        if not np.all(np.isfinite(grads)):
            raise NumericError("non-finite gradient")
        return loss, grads


def forward_backward(graph: Graph, params: "ParamVector", batch):
    """Mean loss over the batch and its exact gradient, flat-aligned."""
    return graph._run(params, batch, need_grads=True)


def finite_diff_grad(graph: Graph, params: "ParamVector", batch, h=None) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time.

    `h` may be a positive scalar step; when None, the step adapts per
    coordinate as 1e-5 * (1 + |w_i|).
    """
    if h is not None and not h > 0:
        raise ShapeError("finite difference step must be positive")
    base = params.data
    grads = np.empty_like(base)
    work = base.copy()
    for i in range(base.size):
        step = h if h is not None else 1e-5 * (1.0 + abs(base[i]))
        work[i] = base[i] + step
        up = graph.forward_loss(params.with_data(work), batch)
        work[i] = base[i] - step
        down = graph.forward_loss(params.with_data(work), batch)
        work[i] = base[i]
        grads[i] = (up - down) / (2.0 * step)
    return grads
