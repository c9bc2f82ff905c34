"""State-space sequence kernels and the gated selective-SSM (Mamba) layer.

Two families live here:

* LTI reference kernels on plain arrays (``discretize_zoh``,
  ``scan_recurrent``, ``build_conv_kernel``, ``apply_conv_form``) used as
  oracles and for analysis.
* ``selective_scan`` with per-step, input-dependent ``delta``, ``B`` and ``C``.
  It has a compiled forward/backward pair and is exposed to the autodiff
  engine through :func:`selective_scan_op`.

The evolution matrix is diagonal throughout, stored per state dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from . import tensor as tn
from .tensor import Tensor

_SERIES_CUTOFF = 1e-8


@dataclass
class SsmParams:
    """Single-channel LTI parameters with diagonal ``A`` over ``N`` states."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float

    def __post_init__(self):
        self.A = np.atleast_1d(np.asarray(self.A, dtype=np.float64))
        self.B = np.broadcast_to(np.asarray(self.B, dtype=np.float64), self.A.shape).copy()
        self.C = np.broadcast_to(np.asarray(self.C, dtype=np.float64), self.A.shape).copy()
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")

    def discretized(self):
        return discretize_zoh(self.A, self.B, self.delta)


@dataclass
class ScanState:
    h: np.ndarray
    t: int = 0


def _zoh_coef(dA: np.ndarray, A: np.ndarray, delta) -> np.ndarray:
    """``(exp(delta*A) - 1) / A`` with the small-argument series branch."""
    small = np.abs(dA) < _SERIES_CUTOFF
    safeA = np.where(small, 1.0, A)
    exact = np.expm1(dA) / safeA
    series = delta * (1.0 + 0.5 * dA)
    return np.where(small, series, exact)


def discretize_zoh(A, B, delta):
    """Zero-order-hold discretisation for diagonal ``A``.

    Returns ``(A_bar, B_bar)`` with ``A_bar = exp(delta*A)`` and
    ``B_bar = A^-1 (exp(delta*A) - 1) B``; as ``A -> 0`` the second tends to
    ``delta*B``.
    """
    if np.any(np.asarray(delta) <= 0):
        raise ValueError("delta must be > 0")
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    dA = delta * A
    return np.exp(dA), _zoh_coef(dA, A, delta) * B


def scan_recurrent(params: SsmParams, x, state: ScanState | None = None) -> np.ndarray:
    """Sequential recurrence ``h_t = A_bar h_{t-1} + B_bar x_t``, ``y_t = C h_t``."""
    Ab, Bb = params.discretized()
    C = params.C
    x = np.asarray(x, dtype=np.float64)
    h = np.zeros_like(Ab) if state is None else state.h
    y = np.empty(len(x))
    for t, xt in enumerate(x):
        h = Ab * h + Bb * xt
        y[t] = C @ h
    if state is not None:
        state.h = h
        state.t += len(x)
    return y


def build_conv_kernel(params: SsmParams, T: int) -> np.ndarray:
    """``K[j] = C A_bar^j B_bar`` for ``j = 0..T-1``."""
    Ab, Bb = params.discretized()
    powers = Ab[None, :] ** np.arange(T)[:, None]
    return powers @ (params.C * Bb)


def apply_conv_form(K, x) -> np.ndarray:
    """Causal convolution ``y_t = sum_{j<=t} K[j] x[t-j]``."""
    x = np.asarray(x, dtype=np.float64)
    return np.convolve(x, np.asarray(K, dtype=np.float64))[: len(x)]


# selective scan ---------------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _zoh_step(dt, a, inv_a):
    """Return ``(exp(dt*a), (exp(dt*a) - 1) / a, d coef / d a)`` in float64."""
    da = dt * a
    ea = math.exp(da)
    if abs(da) < 1e-3:
        # 4-term series keeps the relative error near 1e-14 where exp(da)-1 cancels
        coef = dt * (1.0 + da * (0.5 + da * (1.0 / 6.0 + da * (1.0 / 24.0))))
        dcoef = dt * dt * (0.5 + da * (1.0 / 3.0 + da * (0.125 + da * (1.0 / 30.0))))
    else:
        coef = (ea - 1.0) * inv_a
        dcoef = (da * ea - (ea - 1.0)) * inv_a * inv_a
    return ea, coef, dcoef


@numba.njit(cache=True)
def _scan_fwd(u, delta, A, B, C, D, hs, store):
    Dn, T = u.shape
    N = A.shape[1]
    y = np.empty_like(u)
    h = np.zeros(N)
    a = np.empty(N)
    inv_a = np.empty(N)
    for d in range(Dn):
        for n in range(N):
            h[n] = 0.0
            a[n] = A[d, n]
            inv_a[n] = 1.0 / a[n] if a[n] != 0.0 else 0.0
        for t in range(T):
            dt = float(delta[d, t])
            ut = float(u[d, t])
            acc = 0.0
            for n in range(N):
                ea, coef, _ = _zoh_step(dt, a[n], inv_a[n])
                h[n] = ea * h[n] + coef * B[n, t] * ut
                acc += C[n, t] * h[n]
            if store:
                for n in range(N):
                    hs[d, t, n] = h[n]
            y[d, t] = acc + D[d] * ut
    return y


@numba.njit(cache=True)
def _scan_bwd(u, delta, A, B, C, D, hs, dy):
    Dn, T = u.shape
    N = A.shape[1]
    du = np.zeros_like(u)
    ddelta = np.zeros_like(u)
    dA = np.zeros(A.shape)
    dB = np.zeros(B.shape)
    dC = np.zeros(C.shape)
    dD = np.zeros(D.shape)
    dh = np.empty(N)
    a = np.empty(N)
    inv_a = np.empty(N)
    for d in range(Dn):
        for n in range(N):
            dh[n] = 0.0
            a[n] = A[d, n]
            inv_a[n] = 1.0 / a[n] if a[n] != 0.0 else 0.0
        for t in range(T - 1, -1, -1):
            dt = float(delta[d, t])
            ut = float(u[d, t])
            g = float(dy[d, t])
            dD[d] += g * ut
            du_acc = g * D[d]
            ddt_acc = 0.0
            for n in range(N):
                ea, coef, dcoef_da = _zoh_step(dt, a[n], inv_a[n])
                h_prev = hs[d, t - 1, n] if t > 0 else 0.0
                dC[n, t] += g * hs[d, t, n]
                dhn = dh[n] + g * C[n, t]
                # h_t = ea * h_{t-1} + coef * B * u
                dea = dhn * h_prev
                dcoef = dhn * B[n, t] * ut
                du_acc += dhn * coef * B[n, t]
                dB[n, t] += dhn * coef * ut
                ddt_acc += dea * a[n] * ea + dcoef * ea
                dA[d, n] += dea * dt * ea + dcoef * dcoef_da
                dh[n] = dhn * ea
            du[d, t] = du_acc
            ddelta[d, t] = ddt_acc
    return du, ddelta, dA, dB, dC, dD


_NO_STATES = np.empty((0, 0, 0))


def _check_scan_shapes(u, delta, A, B, C, D):
    Dn, T = u.shape
    N = A.shape[1]
    if delta.shape != (Dn, T) or A.shape[0] != Dn or B.shape != (N, T) or C.shape != (N, T):
        raise tn.DimensionError(
            f"selective_scan shapes: u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape}")
    if D.shape != (Dn,):
        raise tn.DimensionError(f"skip D{D.shape} vs channels {Dn}")


def selective_scan(u, delta, A, B, C, D=None) -> np.ndarray:
    """Input-dependent scan on arrays.

    ``u, delta``: ``(channels, T)``; ``A``: ``(channels, N)``; ``B, C``:
    ``(N, T)`` shared across channels; ``D``: optional per-channel skip.
    Each step is discretised with zero-order hold using its own ``delta``.
    """
    u = np.ascontiguousarray(u)
    dtype = u.dtype if u.dtype.kind == "f" else np.float64
    u = u.astype(dtype, copy=False)
    delta = np.ascontiguousarray(delta, dtype=dtype)
    A = np.ascontiguousarray(A, dtype=dtype)
    B = np.ascontiguousarray(B, dtype=dtype)
    C = np.ascontiguousarray(C, dtype=dtype)
    D = np.zeros(u.shape[0], dtype=dtype) if D is None else np.ascontiguousarray(D, dtype=dtype)
    _check_scan_shapes(u, delta, A, B, C, D)
    if np.any(delta <= 0):
        raise ValueError("delta must be > 0 at every step")
    return _scan_fwd(u, delta, A, B, C, D, _NO_STATES, False)


def selective_scan_op(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                      D: Tensor) -> Tensor:
    """Differentiable :func:`selective_scan`."""
    arrs = [np.ascontiguousarray(t.data) for t in (u, delta, A, B, C, D)]
    _check_scan_shapes(*arrs)
    parents = (u, delta, A, B, C, D)
    need_grad = any(p.requires_grad for p in parents)
    hs = np.empty((u.shape[0], u.shape[1], A.shape[1])) if need_grad else _NO_STATES
    out = _scan_fwd(*arrs, hs, need_grad)

    def bw(g):
        grads = _scan_bwd(*arrs, hs, np.ascontiguousarray(g))
        for p, gp in zip(parents, grads):
            if p.requires_grad:
                p._accum(gp.astype(p.dtype, copy=False))
    return tn._make(out, parents, bw)


# layers -------------------------------------------------------------------------

class MambaLayer(tn.Module):
    """Gated selective-SSM layer with a residual connection.

    ``x -> RMS norm -> in_proj -> (u, z)``; ``u -> causal depthwise conv ->
    SiLU -> selective scan``; the scan output is gated by ``SiLU(z)`` and
    projected back to ``d_model`` channels, then added to ``x``.

    The pre-norm keeps the layer input at unit scale per frame. Without it
    the multiplicative input dependence of the scan lets activations grow
    quickly during training. ``prenorm=False`` gives the bare layer.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, d_state: int = 16,
                 expand: int = 2, conv_width: int = 4, dt_rank: int | None = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1, out_scale: float = 1.0,
                 prenorm: bool = True, dtype=np.float64):
        super().__init__()
        E = expand * d_model
        self.norm_w = self.param(np.ones(d_model), dtype) if prenorm else None
        R = dt_rank or max(1, math.ceil(d_model / 16))
        self.d_model, self.d_inner, self.d_state, self.dt_rank = d_model, E, d_state, R
        self.in_proj = tn.Linear(d_model, 2 * E, rng, bias=False, dtype=dtype)
        self.conv_w = self.param(rng.uniform(-1, 1, (E, conv_width)) / math.sqrt(conv_width), dtype)
        self.conv_b = self.param(np.zeros(E), dtype)
        self.x_proj = tn.Linear(E, R + 2 * d_state, rng, bias=False, dtype=dtype)
        self.dt_proj = tn.Linear(R, E, rng, dtype=dtype)
        self.dt_proj.W.data[...] = rng.uniform(-1, 1, (E, R)) * R ** -0.5
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), E))
        self.dt_proj.b.data[...] = dt + np.log(-np.expm1(-dt))  # inverse softplus
        self.A_log = self.param(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (E, 1))), dtype)
        self.D = self.param(np.ones(E), dtype)
        self.out_proj = tn.Linear(E, d_model, rng, bias=False, dtype=dtype)
        self.out_proj.W.data *= out_scale

    def forward(self, x: Tensor) -> Tensor:
        E, N, R = self.d_inner, self.d_state, self.dt_rank
        h = tn.rms_norm(x, self.norm_w) if self.norm_w is not None else x
        xz = self.in_proj(h)
        u, z = xz[:E], xz[E:]
        u = tn.silu(tn.causal_depthwise_conv1d(u, self.conv_w, self.conv_b))
        dbc = self.x_proj(u)
        delta = tn.softplus(self.dt_proj(dbc[:R]))
        A = tn.mul(tn.exp(self.A_log), -1.0)
        y = selective_scan_op(u, delta, A, dbc[R:R + N], dbc[R + N:], self.D)
        y = tn.mul(y, tn.silu(z))
        return tn.add(x, self.out_proj(y))


class MambaBlock(tn.Module):
    """A stack of :class:`MambaLayer` applied in sequence."""

    def __init__(self, d_model: int, rng: np.random.Generator, n_layers: int = 4, **kw):
        super().__init__()
        self.layers = [MambaLayer(d_model, rng, **kw) for _ in range(n_layers)]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def mamba_layer(x: Tensor, layer: MambaLayer) -> Tensor:
    return layer(x)


def mamba_block(x: Tensor, block: MambaBlock) -> Tensor:
    return block(x)
