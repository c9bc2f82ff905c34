"""Small dense-tensor library with reverse-mode automatic differentiation.

Only the operations needed by the spotting/recognition networks are provided.
Feature maps use a channels-first ``(C, T)`` layout for a single video; there
is no batch axis and no general broadcasting.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphStateError(RuntimeError):
    """Raised when backward is requested on a graph that cannot run it."""


class Tensor:
    """An n-d array that records how it was computed.

    ``grad`` is populated by :meth:`backward` for every tensor in the graph
    that has ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_released")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor dims must be > 0, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name
        self._released = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Propagate adjoints from this tensor to every ancestor.

        The graph is released afterwards; calling again raises.
        """
        if grad is None:
            if self.data.size != 1:
                raise GraphStateError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        if self._released:
            raise GraphStateError("graph already released by an earlier backward()")
        if not self.requires_grad:
            raise GraphStateError("tensor does not require grad; nothing to differentiate")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node._backward(node.grad)
                node._backward = None
                node._parents = ()
                node._released = True

    # arithmetic sugar ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, _parents=tuple(parents) if rg else (),
                  _backward=backward if rg else None)


def _pass(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t._accum(g)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


# elementwise ----------------------------------------------------------------

def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # only trailing-axis scalar/row broadcasting is used internally
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def bw(g):
        _pass(a, _reduce_to(g, a.shape))
        _pass(b, _reduce_to(g, b.shape))
    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def bw(g):
        _pass(a, _reduce_to(g, a.shape))
        _pass(b, -_reduce_to(g, b.shape))
    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _scale(as_tensor(a), b)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g * a.data, b.shape))
    return _make(out, (a, b), bw)


def _scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def bw(g):
        a._accum(g * c)
    return _make(out, (a,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        x._accum(g * out)
    return _make(out, (x,), bw)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bw(g):
        x._accum(np.broadcast_to(g, x.shape))
    return _make(out, (x,), bw)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``relu``, ``silu``, ``sigmoid`` or ``softplus``."""
    v = x.data
    if kind == "relu":
        mask = v > 0
        out = v * mask

        def bw(g):
            x._accum(g * mask)
    elif kind == "sigmoid":
        out = _sigmoid(v)

        def bw(g):
            x._accum(g * out * (1.0 - out))
    elif kind == "silu":
        s = _sigmoid(v)
        out = v * s

        def bw(g):
            x._accum(g * (s * (1.0 + v * (1.0 - s))))
    elif kind == "softplus":
        out = np.logaddexp(0.0, v)

        def bw(g):
            x._accum(g * _sigmoid(v))
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _make(out.astype(v.dtype, copy=False), (x,), bw)


def relu(x):
    return activation(x, "relu")


def silu(x):
    return activation(x, "silu")


def sigmoid(x):
    return activation(x, "sigmoid")


def softplus(x):
    return activation(x, "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.data
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return _make(out, (x,), bw)


# shape plumbing ---------------------------------------------------------------

def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        x._accum(full)
    return _make(np.array(out, copy=True), (x,), bw)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                x._accum(g[tuple(sl)])
    return _make(out, xs, bw)


def transpose(x: Tensor) -> Tensor:
    out = x.data.T

    def bw(g):
        x._accum(g.T)
    return _make(np.ascontiguousarray(out), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        x._accum(g.reshape(x.shape))
    return _make(out, (x,), bw)


def pad_edge(x: Tensor, right: int) -> Tensor:
    """Right-pad the time axis of a ``(C, T)`` tensor by repeating the last frame."""
    if right == 0:
        return x
    out = np.concatenate([x.data, np.repeat(x.data[:, -1:], right, axis=1)], axis=1)

    def bw(g):
        gx = g[:, : x.shape[1]].copy()
        gx[:, -1] += g[:, x.shape[1]:].sum(axis=1)
        x._accum(gx)
    return _make(out, (x,), bw)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = np.repeat(x.data, factor, axis=1)

    def bw(g):
        c, t = x.shape
        x._accum(g.reshape(c, t, factor).sum(axis=2))
    return _make(out, (x,), bw)


# layers -----------------------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``W @ x + b`` with ``x`` of shape ``(Cin,)`` or ``(Cin, T)``."""
    x = as_tensor(x)
    if W.data.ndim != 2 or x.shape[0] != W.shape[1]:
        raise DimensionError(f"linear: W {W.shape} cannot act on x {x.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match W {W.shape}")
    out = W.data @ x.data
    if b is not None:
        out = out + (b.data[:, None] if x.data.ndim == 2 else b.data)
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        if W.requires_grad:
            W._accum(np.outer(g, x.data) if g.ndim == 1 else g @ x.data.T)
        if x.requires_grad:
            x._accum(W.data.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g if g.ndim == 1 else g.sum(axis=1))
    return _make(out, parents, bw)


def _resolve_padding(padding, k: int) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        left = (k - 1) // 2
        return left, k - 1 - left
    if isinstance(padding, (int, np.integer)):
        return int(padding), int(padding)
    if isinstance(padding, tuple) and len(padding) == 2:
        return int(padding[0]), int(padding[1])
    raise ValueError(f"bad padding {padding!r}")


def conv1d(x: Tensor, K: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding="same") -> Tensor:
    """Cross-correlation of ``x (Cin, T)`` with ``K (Cout, Cin, k)``.

    ``padding`` is ``"same"`` (symmetric zeros, length-preserving at stride 1),
    ``"valid"``, an int applied to both sides, or a ``(left, right)`` pair.
    """
    x = as_tensor(x)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    cout, cin, k = K.shape
    if x.data.ndim != 2 or x.shape[0] != cin:
        raise DimensionError(f"conv1d: kernel {K.shape} cannot act on x {x.shape}")
    left, right = _resolve_padding(padding, k)
    T = x.shape[1]
    tp = T + left + right
    tout = (tp - k) // stride + 1
    if tp < k or tout < 1:
        raise DimensionError(f"conv1d: empty output (T={T}, k={k}, pad={left + right})")
    xp = np.pad(x.data, ((0, 0), (left, right))) if left or right else x.data
    s0, s1 = xp.strides
    cols = np.lib.stride_tricks.as_strided(xp, (cin, k, tout), (s0, s1, s1 * stride))
    cols2 = cols.reshape(cin * k, tout)
    Km = K.data.reshape(cout, cin * k)
    out = Km @ cols2
    if bias is not None:
        out = out + bias.data[:, None]
    parents = (x, K) if bias is None else (x, K, bias)

    def bw(g):
        if K.requires_grad:
            K._accum((g @ cols2.T).reshape(K.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=1))
        if x.requires_grad:
            dcols = (Km.T @ g).reshape(cin, k, tout)
            dxp = np.zeros_like(xp)
            span = stride * (tout - 1) + 1
            for j in range(k):
                dxp[:, j:j + span:stride] += dcols[:, j, :]
            x._accum(dxp[:, left:left + T])
    return _make(out, parents, bw)


def causal_depthwise_conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel causal filter: ``y[c, t] = sum_j w[c, j] * x[c, t - k + 1 + j]``."""
    C, T = x.shape
    if w.shape[0] != C:
        raise DimensionError(f"depthwise conv: weights {w.shape} vs x {x.shape}")
    k = w.shape[1]
    xp = np.pad(x.data, ((0, 0), (k - 1, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += w.data[:, j:j + 1] * xp[:, j:j + T]
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        if w.requires_grad:
            w._accum(np.stack([(g * xp[:, j:j + T]).sum(axis=1) for j in range(k)], axis=1))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=1))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, j:j + T] += w.data[:, j:j + 1] * g
            x._accum(dxp[:, k - 1:])
    return _make(out, parents, bw)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
                eps: float = 1e-5, running_mean: np.ndarray | None = None,
                running_var: np.ndarray | None = None) -> Tensor:
    """Per-channel normalisation over the time axis of ``x (C, T)``.

    In eval mode the supplied running statistics are used instead of the
    batch statistics.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = x.data
    if mode == "train":
        mu = v.mean(axis=1, keepdims=True)
        var = v.var(axis=1, keepdims=True)
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("eval mode needs running statistics")
        mu = running_mean[:, None].astype(v.dtype)
        var = running_var[:, None].astype(v.dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=1))
        if beta.requires_grad:
            beta._accum(g.sum(axis=1))
        if x.requires_grad:
            gx = g * gamma.data[:, None]
            if mode == "train":
                n = v.shape[1]
                dx = inv / n * (n * gx - gx.sum(axis=1, keepdims=True)
                                - xhat * (gx * xhat).sum(axis=1, keepdims=True))
            else:
                dx = gx * inv
            x._accum(dx)
    return _make(out, (x, gamma, beta), bw)


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale each frame of ``x (C, T)`` to unit root-mean-square over channels."""
    v = x.data
    inv = 1.0 / np.sqrt((v * v).mean(axis=0, keepdims=True) + eps)
    xhat = v * inv
    out = gamma.data[:, None] * xhat

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=1))
        if x.requires_grad:
            gx = g * gamma.data[:, None]
            x._accum(inv * (gx - xhat * (gx * xhat).mean(axis=0, keepdims=True)))
    return _make(out, (x, gamma), bw)


# losses -----------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: pred {pred.shape} vs target {target.shape}")
    n = pred.data.size
    if n == 0:
        raise ValueError("mse over zero samples")
    r = pred.data - target
    out = np.asarray((r * r).sum() / n)

    def bw(g):
        pred._accum(g * 2.0 * r / n)
    return _make(out, (pred,), bw)


def weighted_ce_loss(probs: Tensor, labels, weights) -> Tensor:
    """Class-weighted negative log-likelihood of ``probs (N, C)``.

    Normalised by the summed weight of the true classes, so the weights
    rebalance classes without rescaling the step size. Returns 0 when every
    sample carries zero weight.
    """
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=probs.dtype)
    N, C = probs.shape
    if labels.shape != (N,):
        raise DimensionError(f"labels {labels.shape} vs probs {probs.shape}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError("label outside [0, C)")
    rows = np.arange(N)
    p = probs.data[rows, labels]
    wi = w[labels]
    denom = wi.sum()
    if denom <= 0:
        out = np.asarray(0.0, dtype=probs.dtype)

        def bw(g):
            pass
        return _make(out, (probs,), bw)
    pc = np.maximum(p, PROB_FLOOR)
    out = np.asarray(-(wi * np.log(pc)).sum() / denom)

    def bw(g):
        d = np.zeros_like(probs.data)
        d[rows, labels] = np.where(p > PROB_FLOOR, -wi / (pc * denom), 0.0)
        probs._accum(g * d)
    return _make(out, (probs,), bw)


# gradient checking ------------------------------------------------------------

def finite_diff_check(fn: Callable[[], Tensor], params: Iterable[Tensor],
                      h: float = 1e-5) -> float:
    """Largest relative gap between autodiff and central differences.

    ``fn`` must rebuild the graph from ``params`` on every call and return a
    scalar. The relative error of each entry is measured against the larger
    of the two gradient magnitudes, floored at ``1e-3`` times the largest
    gradient entry overall; entries far below that are dominated by the
    roundoff of the difference quotient and are compared in absolute terms.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    if not params:
        return 0.0
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = []
    for p in params:
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nf = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            nf[i] = (fp - fm) / (2 * h)
        numeric.append(num)
    scale = max(max(np.abs(a).max(), np.abs(n).max()) for a, n in zip(analytic, numeric))
    floor = max(scale * 1e-3, 1e-300)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


# parameter containers -----------------------------------------------------------

class Module:
    """Holds parameters as attributes; discovers them in definition order."""

    def __init__(self):
        self.training = True

    def param(self, value, dtype=np.float64) -> Tensor:
        return Tensor(np.asarray(value, dtype=dtype).copy(), requires_grad=True)

    def _children(self):
        for key, val in self.__dict__.items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, val in self.__dict__.items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key, val in self.__dict__.items():
            if isinstance(val, np.ndarray):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise DimensionError(f"{name}: stored {src.shape} vs model {arr.shape}")
            arr[...] = src

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float64):
        super().__init__()
        self.W = self.param(_uniform_init(rng, c_in, (c_out, c_in)), dtype)
        self.b = self.param(np.zeros(c_out), dtype) if bias else None

    def forward(self, x):
        return linear(x, self.W, self.b)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding="same", bias: bool = True, dtype=np.float64):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.K = self.param(_uniform_init(rng, c_in * k, (c_out, c_in, k)), dtype)
        self.b = self.param(np.zeros(c_out), dtype) if bias else None

    def forward(self, x):
        return conv1d(x, self.K, self.b, stride=self.stride, padding=self.padding)


class BatchNorm1d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float64):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = self.param(np.ones(channels), dtype)
        self.beta = self.param(np.zeros(channels), dtype)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            m = self.momentum
            self.running_mean *= 1 - m
            self.running_mean += m * x.data.mean(axis=1)
            self.running_var *= 1 - m
            self.running_var += m * x.data.var(axis=1)
            return batchnorm1d(x, self.gamma, self.beta, "train", self.eps)
        return batchnorm1d(x, self.gamma, self.beta, "eval", self.eps,
                           self.running_mean, self.running_var)
