import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from equisfm import autodiff as ad
from equisfm.autodiff import Tape, Tensor


def grad_of(f, *values):
    xs = [Tensor(np.asarray(v, dtype=float), requires_grad=True) for v in values]
    with Tape() as tape:
        y = f(*xs)
    tape.backward(y)
    return y, [x.grad for x in xs]


def test_relu_forward():
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_masked_row_mean_skips_unobserved():
    a = Tensor(np.array([[[3.0], [99.0], [5.0]]]))
    out = ad.masked_row_mean(a, np.array([[True, False, True]]))
    assert out.data[0, 0] == pytest.approx(4.0)


def test_masked_means_of_empty_row_are_zero():
    a = Tensor(np.ones((2, 3, 1)))
    mask = np.array([[False] * 3, [True] * 3])
    assert np.array_equal(ad.masked_row_mean(a, mask).data, [[0.0], [1.0]])
    assert np.array_equal(ad.masked_col_mean(a, mask).data, np.ones((3, 1)))
    assert ad.masked_global_mean(a, mask).data[0] == 1.0


def test_sigmoid_at_zero():
    assert float(ad.sigmoid(Tensor(0.0))) == 0.5


def test_sigmoid_is_stable_for_large_inputs():
    out = ad.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0) and out[1] == pytest.approx(1.0)


def test_square_gradient():
    _, (g,) = grad_of(lambda x: x * x, 3.0)
    assert float(g) == 6.0


def test_mean_gradient():
    _, (g,) = grad_of(lambda x: ad.mean(x), np.arange(4.0))
    assert np.allclose(g, 0.25)


def test_gradient_accumulates_over_reuse():
    _, (g,) = grad_of(lambda x: x * x + 2.0 * x + ad.sum(x), 1.5)
    assert float(g) == pytest.approx(2 * 1.5 + 2 + 1)


def test_seed_scales_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = x * 3.0
    tape.backward(y, seed=np.array([1.0, 10.0]))
    assert np.array_equal(x.grad, [3.0, 30.0])


def test_seed_shape_mismatch_rejected():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y, seed=np.ones(3))


def test_operations_outside_tape_are_not_recorded():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    with Tape() as tape:
        z = y + 1.0
    tape.backward(z)
    assert x.grad is None


def test_incompatible_shapes_raise():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_sqrt_gradient_at_zero_is_finite():
    _, (g,) = grad_of(lambda x: ad.sum(ad.sqrt(x)), np.array([0.0, 4.0]))
    assert np.all(np.isfinite(g))
    assert g[1] == pytest.approx(0.25)


def test_bce_matches_closed_form():
    s = np.array([0.9, 0.2, 0.5])
    y = np.array([0.0, 0.0, 1.0])
    expected = -np.mean(y * np.log(s) + (1 - y) * np.log(1 - s))
    assert float(ad.bce(Tensor(s), y)) == pytest.approx(expected, rel=1e-14)


def test_segment_mean_of_empty_segment():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        y = ad.segment_mean(x, np.array([0, 0, 2]), 3)
    tape.backward(y)
    assert np.array_equal(y.data, [[1.0, 2.0], [0.0, 0.0], [4.0, 5.0]])
    assert np.allclose(x.grad, [[0.5, 0.5], [0.5, 0.5], [1.0, 1.0]])


def test_segment_mean_matches_dense_masked_mean():
    rng = np.random.default_rng(0)
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    dense = rng.normal(size=(4, 5, 3))
    cams, tracks = np.nonzero(mask)
    cells = Tensor(dense[cams, tracks])
    assert np.allclose(ad.segment_mean(cells, cams, 4).data, ad.masked_row_mean(Tensor(dense), mask).data)
    assert np.allclose(ad.segment_mean(cells, tracks, 5).data, ad.masked_col_mean(Tensor(dense), mask).data)


def test_grad_check_linear_function():
    w = np.array([1.5, -2.0, 0.25])
    err = ad.grad_check(lambda x: ad.sum(x * w), [Tensor(np.array([0.3, 0.1, -0.7]))])
    assert err < 1e-10


def test_grad_check_flags_relu_kink():
    # one-sided slopes 0 and 1 average to 0.5 at the kink
    err = ad.grad_check(lambda x: ad.sum(ad.relu(x)), [Tensor(np.array([0.0]))])
    assert err > 0.1


OPS = {
    "mul_div": lambda a, b: ad.sum(a * b / (1.5 + b * b)),
    "broadcast": lambda a, b: ad.sum((a[:, :1] - b) * b[0:1, :]),
    "matmul": lambda a, b: ad.sum(ad.sigmoid(a @ ad.transpose(b))),
    "log_sqrt": lambda a, b: ad.mean(ad.log(1.0 + ad.square(a)) + ad.sqrt(2.0 + b * b)),
    "gather": lambda a, b: ad.sum(ad.square(a[np.array([0, 2, 2, 1])] - b[np.array([1, 1, 0, 2])])),
    "concat_stack": lambda a, b: ad.sum(ad.concat([a, b], axis=1) * ad.stack([a[:, 0]] * 6, axis=1)),
    "reductions": lambda a, b: ad.sum(ad.mean(a, axis=0, keepdims=True) * ad.sum(b, axis=1, keepdims=True)),
    "normalize": lambda a, b: ad.sum(ad.square(ad.mean_subtract_normalize(a * b))),
    "bce": lambda a, b: ad.bce(ad.sigmoid(a), (b.data > 0).astype(float)),
    "where": lambda a, b: ad.sum(ad.where(a.data > 0, a * b, b)),
    "reshape": lambda a, b: ad.sum(ad.reshape(a, (-1,)) * ad.reshape(b, (-1,))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(sorted(OPS).index(name))
    a = Tensor(rng.normal(size=(3, 3)))
    b = Tensor(rng.normal(size=(3, 3)))
    assert ad.grad_check(OPS[name], [a, b]) < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-3, 3)))
def test_masked_global_mean_equals_numpy(values):
    mask = np.array([[1, 0, 1], [1, 1, 0], [0, 0, 0], [1, 1, 1]], dtype=bool)
    out = ad.masked_global_mean(Tensor(values[..., None]), mask).data
    assert out[0] == pytest.approx(values[mask].mean(), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-10, 10)))
def test_mean_subtract_leaves_zero_mean(values):
    out = ad.mean_subtract_normalize(Tensor(values)).data
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
