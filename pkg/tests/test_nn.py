import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modguide.errors import DimensionError, MissingGradientError, NumericError
from modguide.nn import Linear, OptimizerState, Tensor, adam_step, clip_grad_norm, grad_check, no_grad, shadow64
from modguide.nn import tensor as T
from modguide.nn.layers import MLP, MultiheadAttention, Parameter, multihead_attention

TOL = 1e-4


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def weighted(t: Tensor, seed=99) -> Tensor:
    """Scalar with a non-trivial upstream gradient."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return T.tsum(t * Tensor(w))


# -- gradient checks, one per differentiable op --------------------------------

ELEMENTWISE = {
    "add": lambda x: x + Tensor(rnd(3, 4, seed=1)),
    "sub": lambda x: Tensor(rnd(3, 4, seed=1)) - x,
    "mul": lambda x: x * Tensor(rnd(3, 4, seed=1)),
    "scale": lambda x: x * 2.5,
    "square": T.square,
    "silu": T.silu,
    "broadcast_add": lambda x: x + Tensor(rnd(4, seed=2)),
    "broadcast_mul": lambda x: x * Tensor(rnd(1, 4, seed=2)),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_grad_elementwise(name):
    assert grad_check(lambda x: weighted(ELEMENTWISE[name](x)), rnd(3, 4)) < TOL


@pytest.mark.parametrize("axis,keep", [(None, False), (0, False), (1, True)])
def test_grad_reductions(axis, keep):
    assert grad_check(lambda x: weighted(T.tsum(x, axis, keep) * 1.0 + T.tmean(x, axis, keep)), rnd(3, 4)) < TOL


def test_grad_shape_ops():
    f = lambda x: weighted(T.transpose(T.reshape(x, (2, 6)), (1, 0))[1:4])
    assert grad_check(f, rnd(3, 4)) < TOL


def test_grad_fancy_index_accumulates():
    idx = np.array([0, 2, 0])
    assert grad_check(lambda x: weighted(x[idx]), rnd(3, 4)) < TOL


def test_grad_concat_and_where_rows():
    other = Tensor(rnd(2, 4, seed=3))
    mask = np.array([[True], [False], [True]])
    null = Tensor(rnd(3, 4, seed=4))
    assert grad_check(lambda x: weighted(T.concat([x, other], axis=0)), rnd(3, 4)) < TOL
    assert grad_check(lambda x: weighted(T.where_rows(mask, x, null)), rnd(3, 4)) < TOL
    assert grad_check(lambda x: weighted(T.where_rows(mask, null, x)), rnd(3, 4)) < TOL


def test_grad_matmul_both_sides():
    w = rnd(4, 5, seed=5)
    a = rnd(2, 3, 4, seed=6)
    assert grad_check(lambda x: weighted(T.matmul(x, Tensor(w))), a) < TOL
    assert grad_check(lambda x: weighted(T.matmul(Tensor(a), x)), w) < TOL


def test_grad_softmax_and_layer_norm():
    assert grad_check(lambda x: weighted(T.softmax(x, -1)), rnd(3, 5)) < TOL
    assert grad_check(lambda x: weighted(T.layer_norm(x)), rnd(3, 6)) < TOL


def test_grad_attention_core():
    q, k, v = rnd(1, 2, 5, 4, seed=1), rnd(1, 2, 5, 4, seed=2), rnd(1, 2, 5, 4, seed=3)
    assert grad_check(lambda x: weighted(T.attention_core(x, Tensor(k), Tensor(v))[0]), q) < TOL
    assert grad_check(lambda x: weighted(T.attention_core(Tensor(q), x, Tensor(v))[0]), k) < TOL
    assert grad_check(lambda x: weighted(T.attention_core(Tensor(q), Tensor(k), x)[0]), v) < TOL


def test_grad_scale_shift_all_inputs():
    x, s, b = rnd(2, 5, 3, seed=1), rnd(2, 3, seed=2), rnd(2, 3, seed=3)
    assert grad_check(lambda t: weighted(T.scale_shift(t, Tensor(s), Tensor(b), start=2)), x) < TOL
    assert grad_check(lambda t: weighted(T.scale_shift(Tensor(x), t, Tensor(b), start=2)), s) < TOL
    assert grad_check(lambda t: weighted(T.scale_shift(Tensor(x), Tensor(s), t, start=2)), b) < TOL


def test_grad_mse():
    target = rnd(3, 4, seed=8)
    assert grad_check(lambda x: T.mse(x, target), rnd(3, 4)) < TOL


def test_grad_layers():
    rng = np.random.default_rng(0)
    with shadow64():
        mlp = MLP(4, 2, rng).astype(np.float64)
        attn = MultiheadAttention(4, 2, rng).astype(np.float64)
    assert grad_check(lambda x: weighted(mlp(x)), rnd(2, 3, 4)) < TOL
    assert grad_check(lambda x: weighted(multihead_attention(x, x, attn)[0]), rnd(2, 3, 4)) < TOL


# -- forward oracles ----------------------------------------------------------------

def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = rnd(4, 7) * 30
    p = T.softmax_np(x)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax_np(x + 1000.0), p, atol=1e-12)


def test_layer_norm_moments():
    y = T.layer_norm(Tensor(rnd(5, 16) * 3 + 2, dtype=np.float64)).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-4)


def test_attention_weights_are_returned_and_normalized():
    q = Tensor(rnd(2, 3, 6, 4))
    out, p = T.attention_core(q, q, q)
    assert out.shape == (2, 3, 6, 4)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-5)


def test_scale_shift_leaves_prefix_rows():
    x = Tensor(rnd(2, 5, 3))
    y = T.scale_shift(x, Tensor(np.full((2, 3), 2.0)), Tensor(np.ones((2, 3))), start=2).data
    np.testing.assert_array_equal(y[:, :2], x.data[:, :2])
    np.testing.assert_allclose(y[:, 2:], 2 * x.data[:, 2:] + 1, rtol=1e-6)


def test_float32_is_default_and_shadow64_switches():
    assert Tensor(rnd(2)).dtype == np.float32
    with shadow64():
        assert Tensor(rnd(2)).dtype == np.float64
    assert Tensor(rnd(2)).dtype == np.float32


def test_matmul_dimension_error():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(rnd(2, 3)), Tensor(rnd(4, 5)))


def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        T.mul(Tensor(np.array([np.inf, 1.0])), 0.0)


def test_grad_check_reports_non_finite_coordinate():
    def f(x):
        return T.tsum(T.square(x) * float(np.finfo(np.float64).max))  # overflows once perturbed upward
    with pytest.raises(NumericError, match="coordinate 0"):
        grad_check(f, np.array([1.0]))


def test_no_grad_builds_no_graph():
    x = Tensor(rnd(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert y._parents == () and not y.requires_grad


def test_gradients_accumulate_over_reuse():
    x = Tensor(rnd(3, seed=3), requires_grad=True, dtype=np.float64)
    (T.tsum(x * x) + T.tsum(x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


# -- optimizer ------------------------------------------------------------------------

def test_adam_first_step_moves_by_lr_times_sign():
    p = Parameter(np.array([1.0, -2.0, 3.0], np.float32))
    p.grad = np.array([0.5, -4.0, 1e-3], np.float32)
    adam_step({"p": p}, OptimizerState(lr=0.1))
    # bias-corrected first step: m_hat / sqrt(v_hat) = sign(g) up to eps
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-4)


def test_adam_missing_gradient_names_parameter():
    p = Parameter(np.zeros(2, np.float32))
    with pytest.raises(MissingGradientError, match="lonely"):
        adam_step({"lonely": p}, OptimizerState())


def test_adam_skips_frozen_parameters():
    p = Parameter(np.ones(2, np.float32), requires_grad=False)
    adam_step({"p": p}, OptimizerState())
    np.testing.assert_array_equal(p.data, 1.0)


def test_adam_minimizes_quadratic():
    p = Parameter(np.array([3.0, -2.0], np.float32))
    state = OptimizerState(lr=0.05)
    for _ in range(500):
        p.grad = 2 * p.data
        adam_step({"p": p}, state)
    assert np.abs(p.data).max() < 0.05


def test_clip_grad_norm():
    p = Parameter(np.zeros(2, np.float32))
    p.grad = np.array([3.0, 4.0], np.float32)
    assert clip_grad_norm({"p": p}, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-5)


def test_linear_shapes_and_zero_init():
    lin = Linear(4, 3, np.random.default_rng(0), zero=True)
    assert lin(Tensor(rnd(2, 4))).shape == (2, 3)
    assert not lin(Tensor(rnd(2, 4))).data.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.floats(-50, 50))
def test_softmax_property_shift(rows, cols, shift):
    x = np.random.default_rng(rows * 7 + cols).normal(size=(rows, cols))
    np.testing.assert_allclose(T.softmax_np(x + shift), T.softmax_np(x), atol=1e-9)
