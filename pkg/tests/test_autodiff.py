import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gca_dti import autodiff as ad
from gca_dti.autodiff import Tensor
from gca_dti.exceptions import ConfigError, DataError, DimensionError, NumericError, SequenceIndexError
from gca_dti.gradcheck import CASES, KINK_MARGIN, draw_case, kink_margin, run_case


def _simplex_projection(z):
    lo, hi = z.min() - 1.0, z.max()
    for _ in range(200):
        tau = (lo + hi) / 2
        if np.maximum(z - tau, 0).sum() > 1:
            lo = tau
        else:
            hi = tau
    return np.maximum(z - (lo + hi) / 2, 0)


def test_matmul_example():
    a = Tensor([[1, 2], [3, 4]])
    b = Tensor([[5], [6]])
    assert_array_equal(ad.matmul(a, b).values, [[17], [39]])


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_broadcast_mul_and_relu():
    assert_array_equal(ad.mul(Tensor([1, 2, 3]), Tensor([2])).values, [2, 4, 6])
    assert_array_equal(ad.relu(Tensor([-1, 0, 2])).values, [0, 0, 2])
    with pytest.raises(DimensionError):
        ad.add(Tensor([1, 2, 3]), Tensor([1, 2]))


@pytest.mark.parametrize('row, expected', [
    ([0.0, 0.0], [0.5, 0.5]),
    ([math.log(1), math.log(3)], [0.25, 0.75]),
    ([1000.0, 0.0], [1.0, 0.0]),
])
def test_softmax_examples(row, expected):
    out = ad.softmax_rows(Tensor([row])).values
    assert np.all(np.isfinite(out))
    assert_allclose(out[0], expected, atol=1e-12)


def test_softmax_masked_entries_are_zero():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 5)))
    out = ad.softmax_rows(x, np.array([True, True, True, False, False])).values
    assert np.all(out[:, 3:] == 0.0)
    assert_allclose(out.sum(axis=1), 1.0)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        ad.softmax_rows(Tensor([[np.nan, 0.0]]))


def test_softmax_fully_masked_row():
    with pytest.raises(DataError):
        ad.softmax_rows(Tensor([[1.0, 2.0]]), np.array([False, False]))


@pytest.mark.parametrize('row, expected', [([0.0, 0.0], [0.5, 0.5]), ([2.0, 0.0], [1.0, 0.0])])
def test_sparsemax_examples(row, expected):
    assert_allclose(ad.sparsemax_rows(Tensor([row])).values[0], expected, atol=1e-12)


def test_sparsemax_matches_projection():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        z = rng.normal(scale=2.0, size=rng.integers(2, 65))
        out = ad.sparsemax_rows(Tensor([z])).values[0]
        assert_allclose(out, _simplex_projection(z), atol=1e-8)
        assert abs(out.sum() - 1.0) < 1e-12
        assert np.argmax(out) == np.argmax(z)


def test_sparsemax_produces_exact_zeros():
    rng = np.random.default_rng(2)
    trials = 200
    with_zeros = sum(
        np.any(ad.sparsemax_rows(Tensor([rng.normal(size=rng.integers(8, 65))])).values == 0.0)
        for _ in range(trials)
    )
    assert with_zeros / trials >= 0.3


def test_sparsemax_masked_entries_are_zero():
    x = Tensor([[5.0, 4.9, 100.0]])
    out = ad.sparsemax_rows(x, np.array([True, True, False])).values[0]
    assert out[2] == 0.0
    assert_allclose(out[:2], [0.55, 0.45])


def test_normalize_rows_unknown_kind():
    with pytest.raises(ConfigError):
        ad.normalize_rows(Tensor([[1.0]]), 'entmax')


def test_conv1d_identity_kernel():
    x = Tensor(np.random.default_rng(3).normal(size=(6, 3)))
    kernels = np.zeros((3, 3, 3))
    kernels[1] = np.eye(3)
    out = ad.conv1d(x, Tensor(kernels), Tensor(np.zeros(3)))
    assert_allclose(out.values, x.values)


def test_conv1d_averaging_kernel():
    x = Tensor(np.ones((5, 1)))
    out = ad.conv1d(x, Tensor(np.full((3, 1, 1), 1 / 3)), Tensor([0.0]))
    assert_allclose(out.values[:, 0], [2 / 3, 1, 1, 1, 2 / 3])


def test_conv1d_even_width():
    with pytest.raises(ConfigError):
        ad.conv1d(Tensor(np.ones((5, 1))), Tensor(np.ones((2, 1, 1))), Tensor([0.0]))


def test_pool_examples():
    x = Tensor([[1, 5], [3, 2]])
    assert_array_equal(ad.pool(x, 'max').values, [3, 5])
    assert_array_equal(ad.pool(x, 'mean').values, [2, 3.5])
    assert_array_equal(ad.pool(x, 'max', valid_len=1).values, [1, 5])


def test_layer_norm_examples():
    gain, bias = Tensor([1.0, 1.0]), Tensor([0.0, 0.0])
    assert_allclose(ad.layer_norm(Tensor([[1.0, 3.0]]), gain, bias).values, [[-1, 1]], atol=1e-4)
    assert_allclose(ad.layer_norm(Tensor([[2.0, 2.0]]), gain, bias).values, [[0, 0]], atol=1e-12)
    with pytest.raises(ConfigError):
        ad.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


def test_embedding_lookup_out_of_range():
    table = Tensor(np.eye(3))
    assert_array_equal(ad.embedding_lookup(table, np.array([2, 0])).values, [[0, 0, 1], [1, 0, 0]])
    with pytest.raises(SequenceIndexError):
        ad.embedding_lookup(table, np.array([3]))


def test_mse_examples():
    assert ad.mse_loss(Tensor([1, 2]), Tensor([1, 2])).item() == 0.0
    assert ad.mse_loss(Tensor([0, 0]), Tensor([1, 2])).item() == 2.5
    with pytest.raises(DimensionError):
        ad.mse_loss(Tensor([0, 0]), Tensor([1, 2, 3]))


def test_gradient_accumulates_over_reuse():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum_all(ad.add(x, x)))
    assert_array_equal(x.grad, [2.0, 2.0])


def test_graph_is_topologically_ordered():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.relu(ad.matmul(x, x))
    loss = ad.sum_all(ad.add(y, x))
    graph = ad.Graph.trace(loss)
    position = {id(node): i for i, node in enumerate(graph.nodes)}
    for node in graph.nodes:
        for parent in node.parents:
            assert position[id(parent)] < position[id(node)]
    assert graph.nodes[-1] is loss


def test_constants_do_not_record_parents():
    out = ad.add(Tensor([1.0]), Tensor([2.0]))
    assert out.parents == ()


def test_adam_zero_lr_is_noop():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.array([0.3, -0.1])
    ad.adam_step([p], ad.AdamState(), lr=0.0)
    assert_array_equal(p.values, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.array([0.3, -0.1])
    ad.adam_step([p], ad.AdamState(), lr=0.01)
    assert_allclose(p.values, [0.99, -1.99], rtol=1e-6)


def test_kink_margin_sees_relu_and_max_pool():
    x = Tensor([[0.5, -2e-4], [0.3, 0.9]], requires_grad=True)
    assert kink_margin(ad.sum_all(ad.relu(x))) == pytest.approx(2e-4)
    rows = Tensor([[1.0, 4.0], [1.0, 3.9995], [0.2, 0.0]], requires_grad=True)
    # the identical first column rows are not a kink
    assert kink_margin(ad.sum_all(ad.pool(rows, 'max'))) == pytest.approx(5e-4)
    assert kink_margin(ad.sum_all(x)) == math.inf


@pytest.mark.parametrize('name', ['model_none', 'model_gca', 'pool_max', 'relu'])
def test_drawn_cases_stay_clear_of_kinks(name):
    for seed in (0, 34):
        f, inputs = draw_case(name, seed)
        assert kink_margin(f(*inputs)) >= KINK_MARGIN


def test_draw_case_unknown_name():
    with pytest.raises(ConfigError):
        draw_case('conv2d', 0)


@pytest.mark.parametrize('name', sorted(CASES))
def test_finite_differences(name):
    for seed in range(50):
        report = run_case(name, seed)
        assert report.passed, f'{name}[seed={seed}]: {report.max_rel_error:.3e}'
        assert report.n_coords > 0


def _scaled_with_wrong_backward(factor, claimed):
    def f(x):
        return Tensor._result(x.values * factor, (x,), lambda g: (g * claimed,), 'wrong')
    return f


@pytest.mark.parametrize('factor, claimed, expected', [
    (1.0, 2.0, 0.5),
    (3.0, 3.3, 0.3 / 3.3),
    (1e-3, 2e-3, 1e-3),
    (0.0, 1e-6, 1e-6),
])
def test_finite_diff_error_metric(factor, claimed, expected):
    x = Tensor([0.7], requires_grad=True)
    report = ad.finite_diff_check(_scaled_with_wrong_backward(factor, claimed), [x])
    assert report.max_rel_error == pytest.approx(expected, rel=1e-6, abs=1e-12)
    assert report.passed == (expected < 1e-4)
