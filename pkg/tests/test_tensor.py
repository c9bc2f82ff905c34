import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metst import tensor as tn
from metst.tensor import DimensionError, GraphStateError, Tensor, finite_diff_check

from helpers import P, op_cases, proj_loss


# forward examples -------------------------------------------------------------------

def test_linear_examples():
    x = Tensor(np.array([3.0, 4.0]))
    assert np.allclose(tn.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, [3, 4])
    assert np.allclose(tn.linear(x, Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([1.0]))).data, [12])
    b = np.array([0.5, -1.0])
    out = tn.linear(Tensor(np.zeros((3, 5))), Tensor(np.ones((2, 3))), Tensor(b))
    assert np.allclose(out.data, b[:, None])


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        tn.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 4))))


def test_conv1d_delta_kernel_identity_and_lengths():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 11))
    K = np.array([[[0.0, 1.0, 0.0]]])
    assert np.allclose(tn.conv1d(Tensor(x), Tensor(K), padding="same").data, x)
    assert tn.conv1d(Tensor(x), Tensor(K), padding="valid").shape == (1, 9)
    # floor((T + 2 pad - k) / stride) + 1
    assert tn.conv1d(Tensor(x), Tensor(K), stride=2, padding=1).shape == (1, 6)


def test_conv1d_empty_output():
    with pytest.raises(DimensionError):
        tn.conv1d(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 1, 5))), padding="valid")


@given(st.integers(1, 4), st.integers(1, 20), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_conv1d_delta_identity_property(C, T, seed):
    x = np.random.default_rng(seed).normal(size=(C, T))
    K = np.zeros((C, C, 3))
    K[np.arange(C), np.arange(C), 1] = 1.0
    assert np.array_equal(tn.conv1d(Tensor(x), Tensor(K)).data, x)


def test_batchnorm_examples():
    x = Tensor(np.array([[3.0, 3.0, 3.0]]))
    out = tn.batchnorm1d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)))
    assert np.allclose(out.data, 0)
    out = tn.batchnorm1d(Tensor(np.array([[1.0, 7.0]])), Tensor(np.zeros(1)), Tensor(np.array([5.0])))
    assert np.allclose(out.data, 5)
    out = tn.batchnorm1d(Tensor(np.array([[0.0, 2.0]])), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                         eps=1e-12)
    assert np.allclose(out.data, [[-1, 1]])


def test_batchnorm_train_statistics():
    x = np.random.default_rng(1).normal(3, 2, size=(4, 50))
    eps = 1e-5
    out = tn.batchnorm1d(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=eps).data
    assert np.abs(out.mean(axis=1)).max() < 1e-10
    expected = x.var(axis=1) / (x.var(axis=1) + eps)
    assert np.allclose(out.var(axis=1), expected, rtol=1e-12)


def test_batchnorm_eval_uses_running_stats():
    x = Tensor(np.array([[2.0, 4.0]]))
    out = tn.batchnorm1d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), "eval", 1e-12,
                         np.array([1.0]), np.array([4.0]))
    assert np.allclose(out.data, [[0.5, 1.5]])


def test_activation_examples():
    assert np.allclose(tn.relu(Tensor(np.array([-1.0, 2.0]))).data, [0, 2])
    assert tn.silu(Tensor(np.array([0.0]))).data[0] == 0
    assert abs(tn.silu(Tensor(np.array([1.0]))).data[0] - 0.73106) < 1e-5
    with pytest.raises(ValueError):
        tn.activation(Tensor(np.ones(1)), "tanhh")


def test_sigmoid_softplus_extremes_are_finite():
    x = Tensor(np.array([-800.0, 0.0, 800.0]))
    s = tn.sigmoid(x).data
    assert np.all(np.isfinite(s)) and s[0] == 0 and s[1] == 0.5 and s[2] == 1
    assert np.allclose(tn.softplus(x).data, [0.0, math.log(2), 800.0])


def test_softmax_examples():
    assert np.allclose(tn.softmax(Tensor(np.zeros(4))).data, 0.25)
    assert np.allclose(tn.softmax(Tensor(np.array([0.0, math.log(3)]))).data, [0.25, 0.75])
    x = np.random.default_rng(2).normal(size=(3, 5))
    assert np.allclose(tn.softmax(Tensor(x), axis=0).data, tn.softmax(Tensor(x + 7.5), axis=0).data)


@given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50), st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(n, k, shift, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(n, k)) + shift
    p = tn.softmax(Tensor(x), axis=1).data
    assert np.all((p >= 0) & (p <= 1))
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12


def test_mse_examples():
    t = np.array([0.0, 1.0])
    assert tn.mse_loss(Tensor(t.copy()), t).item() == 0
    assert tn.mse_loss(Tensor(np.array([1.0, 1.0])), t).item() == 0.5
    base = tn.mse_loss(Tensor(np.array([0.3, 0.1])), np.zeros(2)).item()
    assert math.isclose(tn.mse_loss(Tensor(np.array([0.6, 0.2])), np.zeros(2)).item(), 4 * base)
    with pytest.raises(DimensionError):
        tn.mse_loss(Tensor(np.ones(2)), np.ones(3))
    with pytest.raises(ValueError):
        tn.mse_loss(Tensor(np.ones(0)), np.ones(0))


def test_weighted_ce_examples():
    onehot = np.eye(3)[[0, 2, 1]]
    assert tn.weighted_ce_loss(Tensor(onehot), [0, 2, 1], np.array([1.0, 2.0, 3.0])).item() == 0
    uni = Tensor(np.full((1, 4), 0.25))
    assert math.isclose(tn.weighted_ce_loss(uni, [1], np.ones(4)).item(), math.log(4))
    # zero probability on the true class is floored, not an error
    v = tn.weighted_ce_loss(Tensor(np.array([[1.0, 0.0]])), [1], np.ones(2)).item()
    assert math.isclose(v, -math.log(tn.PROB_FLOOR))


def test_weighted_ce_neutral_zero_weight():
    probs = np.array([[0.7, 0.3], [0.1, 0.9], [0.2, 0.8]])
    w = np.array([1.0, 0.0])
    full = tn.weighted_ce_loss(Tensor(probs), [0, 1, 1], w).item()
    only = tn.weighted_ce_loss(Tensor(probs[:1]), [0], w).item()
    assert math.isclose(full, only)
    p = tn.parameter(probs)
    tn.weighted_ce_loss(p, [0, 1, 1], w).backward()
    assert np.all(p.grad[1:] == 0)


# backward ----------------------------------------------------------------------------

def test_backward_sum_of_squares():
    x = P([1.0, 2.0])
    tn.tsum(tn.mul(x, x)).backward()
    assert np.allclose(x.grad, [2, 4])


def test_detached_constant_gets_no_grad():
    x = P([1.0, 2.0])
    c = x.detach()
    tn.tsum(tn.mul(x, c)).backward()
    assert c.grad is None and np.allclose(x.grad, [1, 2])


def test_linear_weight_grad_is_outer_product():
    rng = np.random.default_rng(3)
    W, x = P(rng.normal(size=(2, 3))), rng.normal(size=3)
    r = rng.normal(size=2)
    proj_loss(tn.linear(Tensor(x), W), r).backward()
    assert np.allclose(W.grad, np.outer(r, x))


def test_backward_state_errors():
    x = P([1.0, 2.0])
    with pytest.raises(GraphStateError):
        tn.mul(x, x).backward()  # non-scalar without seed
    loss = tn.tsum(tn.mul(x, x))
    loss.backward()
    with pytest.raises(GraphStateError):
        loss.backward()  # graph already released
    with pytest.raises(GraphStateError):
        Tensor(np.array(1.0)).backward()


def test_gradient_accumulates_over_shared_use():
    x = P([3.0])
    tn.tsum(tn.add(tn.mul(x, 2.0), tn.mul(x, x))).backward()
    assert np.allclose(x.grad, [2 + 6])


# finite differences -----------------------------------------------------------------

def test_fd_zero_params_vacuous():
    assert finite_diff_check(lambda: Tensor(np.array(1.0)), []) == 0.0
    with pytest.raises(ValueError):
        finite_diff_check(lambda: Tensor(np.array(1.0)), [], h=0)


def test_fd_linear_is_roundoff_exact():
    rng = np.random.default_rng(4)
    x, W, b = P(rng.normal(size=(3, 6))), P(rng.normal(size=(2, 3))), P(rng.normal(size=2))
    r = rng.normal(size=(2, 6))
    assert finite_diff_check(lambda: proj_loss(tn.linear(x, W, b), r), [x, W, b]) < 1e-7


@pytest.mark.parametrize("name", sorted(op_cases(np.random.default_rng(0), 3, 8)))
@pytest.mark.parametrize("C,T", [(1, 4), (3, 9), (8, 32)])
def test_every_op_matches_finite_differences(name, C, T):
    fn, params = op_cases(np.random.default_rng(C * 100 + T), C, T)[name]
    assert finite_diff_check(fn, params) < 1e-4


# modules ------------------------------------------------------------------------------

def test_module_state_dict_roundtrip_and_dtype():
    rng = np.random.default_rng(5)
    lin = tn.Linear(3, 2, rng, dtype=np.float32)
    assert lin.W.data.dtype == np.float32
    sd = lin.state_dict()
    lin2 = tn.Linear(3, 2, np.random.default_rng(6), dtype=np.float32)
    lin2.load_state_dict(sd)
    assert all(np.array_equal(a, b) for a, b in zip(sd.values(), lin2.state_dict().values()))
    with pytest.raises((KeyError, ValueError)):
        lin2.load_state_dict({"W": np.zeros((2, 3))})


def test_batchnorm_module_running_stats():
    bn = tn.BatchNorm1d(2)
    x = np.array([[1.0, 3.0], [0.0, 0.0]])
    bn(Tensor(x))
    assert np.allclose(bn.running_mean, [0.2, 0.0])
    assert np.allclose(bn.running_var, [0.9 + 0.1 * 1.0, 0.9])
    bn.eval()
    before = bn.running_mean.copy()
    bn(Tensor(x))
    assert np.array_equal(before, bn.running_mean)


def test_float32_scalar_ops_keep_dtype():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert tn.mul(x, 0.5).dtype == np.float32
    assert tn.add(x, 1.0).dtype == np.float32
