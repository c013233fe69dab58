import math

import numpy as np
import pytest
import scipy.sparse as sp
from conftest import param, projected
from hypothesis import given, settings
from hypothesis import strategies as st

from weakpoint import numerics as nx

GRAD_TOL = 1e-4
SEEDS = range(5)


def test_matmul_hand_cases():
    eye = nx.Tensor([[1.0, 0.0], [0.0, 1.0]])
    m = nx.Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(nx.matmul(eye, m).data, m.data)
    assert nx.matmul(nx.Tensor([[1.0, 2.0]]), nx.Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(nx.Tensor(np.zeros((2, 3))), nx.Tensor(np.zeros((2, 3))))


def test_softmax_rows_cases():
    out = nx.softmax_rows(nx.Tensor([[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(out[0], [1 / 3] * 3, rtol=0, atol=1e-15)
    assert out[1, 0] == pytest.approx(1.0) and out[1, 1] == pytest.approx(0.0)
    assert np.all(np.isfinite(out))
    with pytest.raises(FloatingPointError):
        nx.softmax_rows(nx.Tensor([[np.nan, 0.0]]))


def test_sigmoid_bce_cases():
    assert float(nx.sigmoid_bce(nx.Tensor([[0.0]]), [[1]]).data) == pytest.approx(math.log(2), abs=1e-12)
    big = float(nx.sigmoid_bce(nx.Tensor([[50.0]]), [[1]]).data)
    assert 0.0 <= big < 1e-20
    assert math.isfinite(float(nx.sigmoid_bce(nx.Tensor([[-800.0]]), [[1]]).data))
    with pytest.raises(ValueError):
        nx.sigmoid_bce(nx.Tensor([[0.0]]), [[0.5]])


def test_global_average_pool_cases():
    np.testing.assert_array_equal(nx.global_average_pool(nx.Tensor([[2.0, 4.0], [4.0, 8.0]])).data, [[3.0, 6.0]])
    np.testing.assert_array_equal(nx.global_average_pool(nx.Tensor([[1.5, -2.0]])).data, [[1.5, -2.0]])
    with pytest.raises(ValueError):
        nx.global_average_pool(nx.Tensor(np.zeros((0, 2))))


def test_dropout_passthrough_and_statistics():
    a = nx.Tensor(np.random.default_rng(0).uniform(1, 2, size=(100, 100)))
    assert nx.dropout(a, 0.0, True, 1) is a
    assert nx.dropout(a, 0.5, False, 1) is a
    out = nx.dropout(a, 0.5, True, 7).data
    survivors = np.mean(out != 0)
    assert abs(survivors - 0.5) < 0.02
    assert abs(out.mean() - a.data.mean()) / a.data.mean() < 0.02
    with pytest.raises(ValueError):
        nx.dropout(a, 1.0, True, 0)


def test_gradients_accumulate_over_shared_parameters(rng):
    w = param(rng, 3, 2)
    x = nx.Tensor(rng.standard_normal((4, 3)))
    loss = nx.add(nx.sum_all(nx.matmul(x, w)), nx.sum_all(nx.matmul(x, w)))
    loss.backward()
    np.testing.assert_allclose(w.grad, 2 * x.data.sum(axis=0)[:, None].repeat(2, axis=1))


def test_backward_needs_scalar_seed(rng):
    with pytest.raises(nx.ShapeError):
        param(rng, 2, 2).backward()


def test_pool_max_padding_and_routing():
    a = nx.Tensor(np.array([[1.0, 5.0], [3.0, 2.0], [0.0, 9.0]]), requires_grad=True)
    index = np.array([[0, 1], [2, 3], [3, 3]])  # 3 is the pad row
    out = nx.pool_max(a, index)
    np.testing.assert_array_equal(out.data, [[3.0, 5.0], [0.0, 9.0], [0.0, 0.0]])
    nx.sum_all(out).backward()
    np.testing.assert_array_equal(a.grad, [[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])


def test_softmax_cross_entropy_ignores_minus_one(rng):
    logits = param(rng, 5, 3)
    labels = np.array([0, -1, 2, -1, 1])
    full = nx.softmax_cross_entropy(logits, labels)
    kept = nx.softmax_cross_entropy(nx.Tensor(logits.data[[0, 2, 4]]), labels[[0, 2, 4]])
    assert float(full.data) == pytest.approx(float(kept.data), abs=1e-14)
    full.backward()
    assert np.all(logits.grad[[1, 3]] == 0.0)


# ---------------------------------------------------------------------------
# finite-difference gradient checks, five seeded instances per op


def _unary_cases():
    sp_mat = sp.random(7, 5, density=0.5, random_state=3, format="csr")
    seg = [2, 3, 1]
    return {
        "add": lambda a, b: nx.add(a, b),
        "sub": lambda a, b: nx.sub(a, b),
        "mul": lambda a, b: nx.mul(a, b),
        "maximum": lambda a, b: nx.maximum(a, b),
        "scale": lambda a, b: nx.scale(a, -0.7),
        "transpose": lambda a, b: nx.transpose(a),
        "reshape": lambda a, b: nx.reshape(a, (3, 8)),
        "leaky_relu": lambda a, b: nx.leaky_relu(a),
        "concat": lambda a, b: nx.concat([a, b], axis=1),
        "concat_rows": lambda a, b: nx.concat([a, b], axis=0),
        "slice_rows": lambda a, b: nx.slice_rows(a, 1, 4),
        "gather_rows": lambda a, b: nx.gather_rows(a, np.array([0, 0, 5, 2, 3])),
        "sparse_matmul": lambda a, b: nx.sparse_matmul(sp_mat[:, :5], nx.slice_rows(a, 0, 5)),
        "pool_max": lambda a, b: nx.pool_max(a, np.array([[0, 1, 6], [2, 6, 6], [3, 4, 5]])),
        "global_average_pool": lambda a, b: nx.global_average_pool(a),
        "segment_mean": lambda a, b: nx.segment_mean(a, seg),
        "softmax_rows": lambda a, b: nx.softmax_rows(a),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_and_structural_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 6, 4), param(rng, 6, 4)
    fn = _unary_cases()[name]
    err = nx.gradient_error(lambda: projected(fn(a, b), seed), [a, b])
    assert err < GRAD_TOL, f"{name}: {err:.2e}"


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 4, 3), param(rng, 3, 2)
    assert nx.gradient_error(lambda: projected(nx.matmul(a, b), seed), [a, b]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_scale_gradient_wrt_factor(seed):
    rng = np.random.default_rng(seed)
    a, s = param(rng, 5, 3), param(rng, 1)
    assert nx.gradient_error(lambda: projected(nx.scale(a, s), seed), [a, s]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_bias_add_gradient(seed):
    rng = np.random.default_rng(seed)
    a, bias = param(rng, 5, 3), param(rng, 3)
    assert nx.gradient_error(lambda: projected(nx.bias_add(a, bias), seed), [a, bias]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_sigmoid_bce_gradient(seed):
    rng = np.random.default_rng(seed)
    z = param(rng, 3, 4, scale=2.0)
    t = rng.integers(0, 2, size=(3, 4))
    assert nx.gradient_error(lambda: nx.sigmoid_bce(z, t), [z]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    z = param(rng, 6, 4)
    y = rng.integers(-1, 4, size=6)
    y[0] = 1
    assert nx.gradient_error(lambda: nx.softmax_cross_entropy(z, y), [z]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout_gradient_fixed_mask(seed):
    rng = np.random.default_rng(seed)
    a = param(rng, 5, 4)
    assert nx.gradient_error(lambda: projected(nx.dropout(a, 0.5, True, seed), seed), [a]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_module_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = nx.Linear(4, 3, rng)
    layer.bias.data[:] = rng.standard_normal(3)
    x = param(rng, 5, 4)
    assert nx.gradient_error(lambda: projected(nx.leaky_relu(layer(x)), seed), [x, *layer.parameters()]) < GRAD_TOL


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_softmax_rows_are_distributions(rows, cols, seed):
    z = np.random.default_rng(seed).standard_normal((rows, cols)) * 30
    s = nx.softmax_rows(nx.Tensor(z)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_module_parameter_discovery(rng):
    class Two(nx.Module):
        def __init__(self):
            self.first = nx.Linear(2, 3, rng)
            self.heads = {"a": nx.Linear(3, 1, rng, bias=False)}
            self.stack = [nx.Linear(3, 3, rng)]
            self.frozen = nx.Tensor(np.zeros(2))

    names = [n for n, _ in Two().named_parameters()]
    assert names == ["first.weight", "first.bias", "heads.a.weight", "stack.0.weight", "stack.0.bias"]
