import math

import numpy as np
import pytest

from metst import tensor as tn
from metst.ssm import (MambaBlock, MambaLayer, ScanState, SsmParams, apply_conv_form,
                       build_conv_kernel, discretize_zoh, mamba_block, mamba_layer,
                       scan_recurrent, selective_scan, selective_scan_op)
from metst.tensor import Tensor, finite_diff_check


def naive_selective(u, delta, A, B, C, D):
    """Step-by-step oracle written directly from the ZOH recurrence."""
    Dn, T = u.shape
    y = np.zeros((Dn, T))
    for d in range(Dn):
        h = np.zeros(A.shape[1])
        for t in range(T):
            Ab = np.exp(delta[d, t] * A[d])
            Bb = (Ab - 1.0) / A[d] * B[:, t]
            h = Ab * h + Bb * u[d, t]
            y[d, t] = C[:, t] @ h + D[d] * u[d, t]
    return y


def random_lti(rng, N=None):
    N = N or int(rng.integers(1, 9))
    return SsmParams(A=-rng.uniform(0.05, 3.0, N), B=rng.normal(size=N), C=rng.normal(size=N),
                     delta=float(rng.uniform(0.01, 1.0)))


def random_selective(rng, Dn=3, T=32, N=4):
    u = rng.normal(size=(Dn, T))
    delta = rng.uniform(0.01, 0.8, size=(Dn, T))
    A = -rng.uniform(0.1, 4.0, size=(Dn, N))
    B = rng.normal(size=(N, T))
    C = rng.normal(size=(N, T))
    D = rng.normal(size=Dn)
    return u, delta, A, B, C, D


# discretisation ----------------------------------------------------------------------

def test_zoh_example():
    Ab, Bb = discretize_zoh(-1.0, 1.0, math.log(2))
    assert math.isclose(Ab, 0.5, rel_tol=1e-14)
    assert math.isclose(Bb, 0.5, rel_tol=1e-14)


def test_zoh_limits():
    Ab, Bb = discretize_zoh(0.0, 3.0, 0.2)
    assert Ab == 1.0 and math.isclose(Bb, 0.6)
    Ab, Bb = discretize_zoh(-1e-12, 3.0, 0.2)
    assert math.isclose(Bb, 0.6, rel_tol=1e-10)
    Ab, Bb = discretize_zoh(-2.0, 1.0, 1e-12)
    assert math.isclose(Ab, 1.0, rel_tol=1e-10) and abs(Bb) < 1e-11
    with pytest.raises(ValueError):
        discretize_zoh(-1.0, 1.0, 0.0)


def test_params_validate_delta():
    with pytest.raises(ValueError):
        SsmParams(A=[-1.0], B=[1.0], C=[1.0], delta=-0.1)


# LTI kernels ----------------------------------------------------------------------------

def _unit_params():
    # A_bar = 0.5 and B_bar = 1: A = -ln 2 with delta = 1 gives B_bar = 0.5 / ln 2
    p = SsmParams(A=[-math.log(2)], B=[math.log(2) / 0.5], C=[1.0], delta=1.0)
    Ab, Bb = p.discretized()
    assert math.isclose(Ab[0], 0.5) and math.isclose(Bb[0], 1.0)
    return p


def test_recurrent_example():
    assert np.allclose(scan_recurrent(_unit_params(), [1, 0, 0]), [1, 0.5, 0.25])
    assert np.all(scan_recurrent(_unit_params(), np.zeros(5)) == 0)


def test_recurrent_time_invariance():
    rng = np.random.default_rng(0)
    p = random_lti(rng)
    x = np.zeros(20)
    x[0] = 1
    y0 = scan_recurrent(p, x)
    for k in (1, 5, 11):
        yk = scan_recurrent(p, np.roll(x, k))
        assert np.allclose(yk[k:], y0[:20 - k], atol=1e-15) and np.all(yk[:k] == 0)


def test_recurrent_state_carry():
    rng = np.random.default_rng(1)
    p = random_lti(rng)
    x = rng.normal(size=30)
    st = ScanState(h=np.zeros(len(p.A)))
    y = np.concatenate([scan_recurrent(p, x[:12], st), scan_recurrent(p, x[12:], st)])
    assert st.t == 30
    assert np.allclose(y, scan_recurrent(p, x), atol=1e-14)


def test_conv_kernel_examples():
    assert np.allclose(build_conv_kernel(_unit_params(), 3), [1, 0.5, 0.25])
    p = random_lti(np.random.default_rng(2))
    p.C[:] = 0
    assert np.all(build_conv_kernel(p, 7) == 0)
    p = random_lti(np.random.default_rng(3))
    Ab, Bb = p.discretized()
    assert math.isclose(build_conv_kernel(p, 4)[0], p.C @ Bb)


def test_conv_form_examples():
    assert np.allclose(apply_conv_form([1, 0.5, 0.25], [1, 0, 0]), [1, 0.5, 0.25])
    x = np.random.default_rng(4).normal(size=9)
    assert np.array_equal(apply_conv_form([1.0], x), x)


def test_conv_equals_recurrent_T64():
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = random_lti(rng)
        x = rng.normal(size=64)
        diff = np.abs(apply_conv_form(build_conv_kernel(p, 64), x) - scan_recurrent(p, x)).max()
        assert diff < 1e-10


def test_impulse_response_nonincreasing_for_stable_scalar():
    rng = np.random.default_rng(6)
    for _ in range(100):
        p = SsmParams(A=[-rng.uniform(0.01, 5)], B=[rng.normal()], C=[rng.normal()],
                      delta=float(rng.uniform(0.01, 2)))
        k = np.abs(build_conv_kernel(p, 64))
        assert np.all(np.diff(k) <= 1e-15)


def test_stable_discretisation():
    rng = np.random.default_rng(7)
    A = -rng.uniform(1e-6, 10, size=100)
    Ab, _ = discretize_zoh(A, np.ones(100), 0.3)
    assert np.all((Ab > 0) & (Ab < 1))


# selective scan ------------------------------------------------------------------------

def test_selective_constant_params_match_lti():
    rng = np.random.default_rng(8)
    for _ in range(20):
        p = random_lti(rng)
        T = 40
        x = rng.normal(size=T)
        y = selective_scan(x[None], np.full((1, T), p.delta), p.A[None],
                           np.repeat(p.B[:, None], T, 1), np.repeat(p.C[:, None], T, 1))
        assert np.abs(y[0] - scan_recurrent(p, x)).max() < 1e-10


def test_selective_matches_naive_loop():
    rng = np.random.default_rng(9)
    for _ in range(10):
        args = random_selective(rng)
        assert np.abs(selective_scan(*args) - naive_selective(*args)).max() < 1e-10


def test_selective_small_delta_a_series_branch():
    rng = np.random.default_rng(10)
    u, delta, A, B, C, D = random_selective(rng, T=16)
    delta[:] = 1e-5  # |delta * A| < 1e-3 everywhere
    assert np.abs(selective_scan(u, delta, A, B, C, D) - naive_selective(u, delta, A, B, C, D)).max() < 1e-12


def test_selective_zero_input_and_errors():
    rng = np.random.default_rng(11)
    u, delta, A, B, C, D = random_selective(rng)
    assert np.all(selective_scan(np.zeros_like(u), delta, A, B, C, D) == 0)
    bad = delta.copy()
    bad[0, 3] = 0
    with pytest.raises(ValueError):
        selective_scan(u, bad, A, B, C, D)
    with pytest.raises(tn.DimensionError):
        selective_scan(u, delta, A, B[:, :-1], C, D)


def test_selective_causality():
    rng = np.random.default_rng(12)
    u, delta, A, B, C, D = random_selective(rng, T=40)
    y = selective_scan(u, delta, A, B, C, D)
    for t0 in (0, 13, 39):
        u2, d2, B2, C2 = u.copy(), delta.copy(), B.copy(), C.copy()
        u2[:, t0:] += 1.0
        d2[:, t0:] *= 1.7
        B2[:, t0:] -= 0.3
        C2[:, t0:] += 0.5
        y2 = selective_scan(u2, d2, A, B2, C2, D)
        assert np.array_equal(y[:, :t0], y2[:, :t0])


def test_selective_float32_path():
    rng = np.random.default_rng(13)
    args = [a.astype(np.float32) for a in random_selective(rng)]
    y = selective_scan(*args)
    assert y.dtype == np.float32
    assert np.abs(y - naive_selective(*[a.astype(np.float64) for a in args])).max() < 1e-4


def test_selective_op_gradients():
    rng = np.random.default_rng(14)
    u, delta, A, B, C, D = random_selective(rng, Dn=2, T=10, N=3)
    params = [tn.parameter(a) for a in (u, delta, A, B, C, D)]
    r = rng.normal(size=u.shape)

    def loss():
        y = selective_scan_op(*params)
        return tn.tsum(tn.mul(y, Tensor(r)))
    assert finite_diff_check(loss, params) < 1e-6


# layers -----------------------------------------------------------------------------

def test_mamba_layer_shape_and_residual_passthrough():
    rng = np.random.default_rng(15)
    for C, T in [(2, 1), (4, 7), (8, 33)]:
        layer = MambaLayer(C, rng, d_state=4)
        x = Tensor(rng.normal(size=(C, T)))
        assert mamba_layer(x, layer).shape == (C, T)
        layer.out_proj.W.data[:] = 0
        assert np.array_equal(layer(x).data, x.data)


def test_mamba_layer_causal():
    rng = np.random.default_rng(16)
    layer = MambaLayer(4, rng, d_state=4)
    x = rng.normal(size=(4, 30))
    y = layer(Tensor(x)).data
    x2 = x.copy()
    x2[:, 17:] = rng.normal(size=(4, 13))
    y2 = layer(Tensor(x2)).data
    assert np.array_equal(y[:, :17], y2[:, :17])
    assert not np.allclose(y[:, 17:], y2[:, 17:])


def test_mamba_layer_gradients():
    rng = np.random.default_rng(17)
    layer = MambaLayer(4, rng, d_state=3)
    x = tn.parameter(rng.normal(size=(4, 9)))
    r = rng.normal(size=(4, 9))
    params = [x] + layer.parameters()
    assert finite_diff_check(lambda: tn.tsum(tn.mul(layer(x), Tensor(r))), params) < 1e-4


def test_mamba_layer_without_prenorm():
    rng = np.random.default_rng(18)
    layer = MambaLayer(4, rng, d_state=3, prenorm=False)
    assert layer.norm_w is None
    x = tn.parameter(rng.normal(size=(4, 9)))
    r = rng.normal(size=(4, 9))
    assert finite_diff_check(lambda: tn.tsum(tn.mul(layer(x), Tensor(r))), [x]) < 1e-4


def test_mamba_block_shape_identity_and_causality():
    rng = np.random.default_rng(19)
    block = MambaBlock(6, rng, n_layers=4, d_state=4)
    assert len(block.layers) == 4
    x = rng.normal(size=(6, 25))
    y = mamba_block(Tensor(x), block).data
    assert y.shape == x.shape
    x2 = x.copy()
    x2[:, 10:] += 1
    assert np.array_equal(block(Tensor(x2)).data[:, :10], y[:, :10])
    for layer in block.layers:
        layer.out_proj.W.data[:] = 0
    assert np.array_equal(block(Tensor(x)).data, x)


def test_mamba_init_ranges():
    layer = MambaLayer(16, np.random.default_rng(20), d_state=8)
    A = -np.exp(layer.A_log.data)
    assert np.all(A < 0)
    dt = np.logaddexp(0, layer.dt_proj.b.data)
    assert dt.min() >= 1e-3 - 1e-12 and dt.max() <= 1e-1 + 1e-12
    assert layer.dt_rank == 1 and layer.d_inner == 32
