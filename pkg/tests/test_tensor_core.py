import numpy as np
import pytest

from childgrad.errors import NumericError, ShapeError
from childgrad.models import ModelSpec, init_params
from childgrad.params import ParamVector, ShapeRegistry
from childgrad.tensor_core import (
    Graph,
    LogLikelihood,
    MatMul,
    MeanSquaredError,
    SoftmaxCrossEntropy,
    Tensor,
    finite_diff_grad,
    forward_backward,
    pairwise_sum,
)
from childgrad.datasets import Dataset


def scalar_linear_setup(w_value):
    registry = ShapeRegistry.build([("w", (1, 1), 0)])
    params = ParamVector(registry, np.array([w_value]))
    graph = Graph([MatMul("w"), MeanSquaredError()])
    return graph, params


def test_linear_mse_hand_value():
    graph, params = scalar_linear_setup(2.0)
    batch = Dataset(np.array([[1.0]]), np.array([0.0]))
    loss, grads = forward_backward(graph, params, batch)
    assert loss == 4.0
    assert grads[0] == 4.0


def test_exact_interpolation_gives_zero_loss_and_grads():
    spec = ModelSpec(input_dim=3, hidden_dims=(4,), output="regressor")
    params = init_params(spec, 0)
    X = np.random.default_rng(1).standard_normal((6, 3))
    preds = spec.loss_graph().forward_activations(params, X)
    batch = Dataset(X, preds.ravel())
    loss, grads = forward_backward(spec.loss_graph(), params, batch)
    assert loss == 0.0
    assert np.all(grads == 0.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mlp_gradient_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(input_dim=4, hidden_dims=(6, 5), output="classifier",
                     num_classes=3, activation="tanh")
    params = init_params(spec, seed)
    batch = Dataset(rng.standard_normal((8, 4)),
                    rng.integers(0, 3, size=8))
    _, grads = forward_backward(spec.loss_graph(), params, batch)
    fd = finite_diff_grad(spec.loss_graph(), params, batch)
    np.testing.assert_allclose(grads, fd, rtol=1e-5, atol=1e-8)


def test_finite_diff_on_quadratic():
    # loss(w) = (w * 1 - 0)^2 = w^2, derivative 2w
    graph, params = scalar_linear_setup(1.0)
    batch = Dataset(np.array([[1.0]]), np.array([0.0]))
    fd = finite_diff_grad(graph, params, batch, h=1e-4)
    assert abs(fd[0] - 2.0) < 1e-7


def test_finite_diff_on_constant_loss_is_zero():
    graph, params = scalar_linear_setup(3.0)
    batch = Dataset(np.array([[0.0]]), np.array([5.0]))
    fd = finite_diff_grad(graph, params, batch, h=1e-4)
    assert np.all(fd == 0.0)


def test_finite_diff_matches_logistic_model():
    rng = np.random.default_rng(7)
    spec = ModelSpec(input_dim=3, hidden_dims=(), output="classifier",
                     num_classes=2)
    params = init_params(spec, 7)
    batch = Dataset(rng.standard_normal((10, 3)), rng.integers(0, 2, size=10))
    _, grads = forward_backward(spec.loss_graph(), params, batch)
    fd = finite_diff_grad(spec.loss_graph(), params, batch)
    np.testing.assert_allclose(grads, fd, rtol=1e-5, atol=1e-8)


def test_finite_diff_rejects_nonpositive_step():
    graph, params = scalar_linear_setup(1.0)
    batch = Dataset(np.array([[1.0]]), np.array([0.0]))
    with pytest.raises(ShapeError):
        finite_diff_grad(graph, params, batch, h=0.0)


def test_forward_backward_is_bit_reproducible():
    rng = np.random.default_rng(3)
    spec = ModelSpec(input_dim=5, hidden_dims=(7,), output="classifier",
                     num_classes=2, activation="relu")
    params = init_params(spec, 3)
    batch = Dataset(rng.standard_normal((12, 5)), rng.integers(0, 2, size=12))
    loss_a, grads_a = forward_backward(spec.loss_graph(), params, batch)
    loss_b, grads_b = forward_backward(spec.loss_graph(), params, batch)
    assert loss_a == loss_b
    assert np.array_equal(grads_a, grads_b)


def test_batch_mean_linearity():
    rng = np.random.default_rng(11)
    spec = ModelSpec(input_dim=3, hidden_dims=(5,), output="classifier",
                     num_classes=2)
    params = init_params(spec, 11)
    batch = Dataset(rng.standard_normal((9, 3)), rng.integers(0, 2, size=9))
    _, batch_grads = forward_backward(spec.loss_graph(), params, batch)
    per_example = []
    for j in range(len(batch)):
        _, g = forward_backward(spec.loss_graph(), params, batch.take([j]))
        per_example.append(g)
    mean_grads = np.mean(per_example, axis=0)
    np.testing.assert_allclose(batch_grads, mean_grads, rtol=1e-12, atol=1e-14)


def test_shape_mismatch_names_offending_node():
    spec = ModelSpec(input_dim=4, hidden_dims=(3,), output="classifier")
    params = init_params(spec, 0)
    bad = Dataset(np.zeros((2, 5)), np.zeros(2, dtype=np.int64))
    with pytest.raises(ShapeError, match=r"matmul\[layer0.weight\]"):
        forward_backward(spec.loss_graph(), params, bad)


def test_nonfinite_loss_raises_numeric_error():
    graph, params = scalar_linear_setup(1e200)
    batch = Dataset(np.array([[1e200]]), np.array([0.0]))
    with pytest.raises(NumericError):
        forward_backward(graph, params, batch)


def test_label_out_of_range_is_rejected():
    spec = ModelSpec(input_dim=2, hidden_dims=(), output="classifier",
                     num_classes=2)
    params = init_params(spec, 0)
    batch = Dataset(np.zeros((1, 2)), np.array([2], dtype=np.int64))
    with pytest.raises(ShapeError):
        forward_backward(spec.loss_graph(), params, batch)


def test_tensor_validates_shape_and_finiteness():
    t = Tensor((2, 3), np.arange(6, dtype=float))
    assert t.array.shape == (2, 3)
    with pytest.raises(ShapeError):
        Tensor((2, 3), np.arange(5, dtype=float))
    with pytest.raises(NumericError):
        Tensor((2,), np.array([1.0, np.nan]))
    with pytest.raises(ShapeError):
        Tensor((0, 2), np.array([]))


def test_graph_requires_single_trailing_loss_node():
    with pytest.raises(ShapeError):
        Graph([MatMul("w")])
    with pytest.raises(ShapeError):
        Graph([SoftmaxCrossEntropy(), MatMul("w"), MeanSquaredError()])
    with pytest.raises(ShapeError):
        LogLikelihood("poisson")


def test_graph_rejects_unknown_parameter_names():
    graph = Graph([MatMul("missing"), MeanSquaredError()])
    registry = ShapeRegistry.build([("w", (1, 1), 0)])
    params = ParamVector(registry, np.array([1.0]))
    batch = Dataset(np.array([[1.0]]), np.array([0.0]))
    with pytest.raises(ShapeError, match="missing"):
        forward_backward(graph, params, batch)


def test_pairwise_sum_matches_exact_sums():
    rng = np.random.default_rng(0)
    for n in (1, 2, 3, 7, 64, 100):
        values = rng.standard_normal((n, 4))
        np.testing.assert_allclose(pairwise_sum(values, axis=0),
                                   values.sum(axis=0), rtol=1e-12)
    with pytest.raises(ShapeError):
        pairwise_sum(np.empty((0, 2)))


def test_empty_batch_is_rejected():
    graph, params = scalar_linear_setup(1.0)
    batch = Dataset(np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(ShapeError):
        forward_backward(graph, params, batch)
