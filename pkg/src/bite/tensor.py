"""Dense float64 tensors with a small tape-based reverse-mode autodiff.

Values are plain ``numpy.ndarray`` objects in float64. A :class:`Variable`
wraps a value and a gradient slot. Every differentiable op appends a
:class:`Node` to the active :class:`Graph`; ``backward`` walks the nodes in
reverse insertion order and dispatches on ``node.kind`` through
``BACKWARD_RULES``.

Convolution follows the ML convention (cross-correlation, no kernel flip).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# Graph and Variable
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple["Variable", ...]
    output: "Variable"
    saved: dict = field(default_factory=dict)


class Graph:
    """Append-only tape. Insertion order is forward execution order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(self, kind: str, inputs: Sequence["Variable"], output: "Variable", **saved) -> Node:
        node = Node(kind, tuple(inputs), output, saved)
        output.graph = self
        output.node_id = len(self.nodes)
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        _local().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local().stack.pop()


_tls = threading.local()


def _local():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
        _tls.default = Graph()
        _tls.grad_enabled = True
    return _tls


def current_graph() -> Graph:
    st = _local()
    return st.stack[-1] if st.stack else st.default


def is_grad_enabled() -> bool:
    return _local().grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    st = _local()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class Variable:
    """A value enrolled (optionally) in the differentiation graph."""

    __slots__ = ("value", "_grad", "requires_grad", "graph", "node_id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.graph: Graph | None = None
        self.node_id: int | None = None
        self.name = name
        self._grad = np.zeros_like(self.value) if requires_grad else None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ValueError(f"grad shape {g.shape} != value shape {self.value.shape}")
        self._grad = g.copy()

    @property
    def is_leaf(self) -> bool:
        return self.graph is None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def parameter(value, name: str | None = None) -> Variable:
    return Variable(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _make(value: np.ndarray, kind: str, inputs: Sequence[Variable], **saved) -> Variable:
    needs = is_grad_enabled() and any(v.requires_grad for v in inputs)
    out = Variable(value)
    if needs:
        out.requires_grad = True
        current_graph().record(kind, inputs, out, **saved)
    return out


BACKWARD_RULES: dict[str, Callable[[Node, np.ndarray], tuple]] = {}


def _rule(kind: str):
    def deco(fn):
        BACKWARD_RULES[kind] = fn
        return fn
    return deco


def backward(loss: Variable) -> None:
    """Accumulate d(loss)/d(v) into ``v.grad`` for every reachable leaf ``v``.

    Intermediate gradients are recomputed from scratch on every call, so two
    calls without ``zero_grad`` double the leaf gradients.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.graph is None:
        loss._grad = loss._grad + 1.0
        return
    nodes = loss.graph.nodes[: loss.node_id + 1]
    for node in nodes:
        node.output._grad = None
    loss._grad = np.ones_like(loss.value)
    for node in reversed(nodes):
        out = node.output
        if out._grad is None:
            continue
        grads = BACKWARD_RULES[node.kind](node, out._grad)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.value.shape:
                g = _unbroadcast(g, inp.value.shape)
            if inp.is_leaf:
                if inp._grad is None:
                    inp._grad = np.zeros_like(inp.value)
                inp._grad += g
            elif inp._grad is None:
                inp._grad = g
            else:
                inp._grad = inp._grad + g
    loss._grad = np.ones_like(loss.value)


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return _make(a.value + b.value, "add", (a, b))


@_rule("add")
def _add_bw(node, g):
    return g, g


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return _make(a.value - b.value, "sub", (a, b))


@_rule("sub")
def _sub_bw(node, g):
    return g, -g


def mul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return _make(a.value * b.value, "mul", (a, b))


@_rule("mul")
def _mul_bw(node, g):
    a, b = node.inputs
    return (g * b.value if a.requires_grad else None,
            g * a.value if b.requires_grad else None)


def sum(x) -> Variable:  # noqa: A001 - mirrors numpy naming
    x = as_variable(x)
    return _make(np.asarray(x.value.sum()), "sum", (x,))


@_rule("sum")
def _sum_bw(node, g):
    return (np.broadcast_to(g, node.inputs[0].shape),)


def mean(x) -> Variable:
    x = as_variable(x)
    return _make(np.asarray(x.value.mean()), "mean", (x,))


@_rule("mean")
def _mean_bw(node, g):
    x = node.inputs[0]
    return (np.broadcast_to(g / x.size, x.shape),)


def reshape(x, shape) -> Variable:
    x = as_variable(x)
    return _make(x.value.reshape(shape), "reshape", (x,))


@_rule("reshape")
def _reshape_bw(node, g):
    return (g.reshape(node.inputs[0].shape),)


def matmul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return _make(a.value @ b.value, "matmul", (a, b))


@_rule("matmul")
def _matmul_bw(node, g):
    a, b = node.inputs
    return (g @ b.value.T if a.requires_grad else None,
            a.value.T @ g if b.requires_grad else None)


def sigmoid(x) -> Variable:
    x = as_variable(x)
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, "sigmoid", (x,), y=y)


@_rule("sigmoid")
def _sigmoid_bw(node, g):
    y = node.saved["y"]
    return (g * y * (1.0 - y),)


def elu(x) -> Variable:
    """ELU with alpha = 1."""
    x = as_variable(x)
    neg = np.minimum(x.value, 0.0)
    y = np.maximum(x.value, 0.0) + np.expm1(neg)
    return _make(y, "elu", (x,), neg=neg)


@_rule("elu")
def _elu_bw(node, g):
    # d/dx is 1 for x > 0 and exp(x) otherwise, i.e. exp(min(x, 0))
    return (g * np.exp(node.saved["neg"]),)


def flip_last(x) -> Variable:
    x = as_variable(x)
    return _make(x.value[..., ::-1].copy(), "flip_last", (x,))


@_rule("flip_last")
def _flip_bw(node, g):
    return (g[..., ::-1],)


def concat_channels(xs: Sequence) -> Variable:
    xs = [as_variable(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.value.ndim != len(ref) or x.shape[:1] + x.shape[2:] != ref[:1] + ref[2:]:
            raise ConfigError(f"concat_channels: non-channel dims differ: {ref} vs {x.shape}")
    sizes = [x.shape[1] for x in xs]
    return _make(np.concatenate([x.value for x in xs], axis=1), "concat", xs, sizes=sizes)


@_rule("concat")
def _concat_bw(node, g):
    bounds = np.cumsum([0] + node.saved["sizes"])
    return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(node.inputs)))


def slice_channels(x, start: int, stop: int) -> Variable:
    x = as_variable(x)
    return _make(x.value[:, start:stop].copy(), "slice_channels", (x,), start=start, stop=stop)


@_rule("slice_channels")
def _slice_bw(node, g):
    x = node.inputs[0]
    out = np.zeros_like(x.value)
    out[:, node.saved["start"]:node.saved["stop"]] = g
    return (out,)


def take_last(x) -> Variable:
    """Select the final index of the last axis (dropping that axis)."""
    x = as_variable(x)
    return _make(x.value[..., -1].copy(), "take_last", (x,))


@_rule("take_last")
def _take_last_bw(node, g):
    out = np.zeros_like(node.inputs[0].value)
    out[..., -1] = g
    return (out,)


def mean_last(x) -> Variable:
    x = as_variable(x)
    return _make(x.value.mean(axis=-1), "mean_last", (x,))


@_rule("mean_last")
def _mean_last_bw(node, g):
    x = node.inputs[0]
    return (np.broadcast_to(g[..., None] / x.shape[-1], x.shape),)


def avg_pool_last(x, factor: int) -> Variable:
    """Non-overlapping mean over windows of ``factor`` along the last axis.

    A trailing remainder shorter than ``factor`` is discarded.
    """
    x = as_variable(x)
    if factor < 1:
        raise ConfigError(f"pooling factor must be >= 1, got {factor}")
    n = x.shape[-1] // factor
    if n < 1:
        raise ConfigError(f"pooling factor {factor} exceeds axis length {x.shape[-1]}")
    v = x.value[..., : n * factor].reshape(*x.shape[:-1], n, factor).mean(axis=-1)
    return _make(v, "avg_pool", (x,), factor=factor)


@_rule("avg_pool")
def _avg_pool_bw(node, g):
    x = node.inputs[0]
    p = node.saved["factor"]
    out = np.zeros_like(x.value)
    n = g.shape[-1]
    out[..., : n * p] = np.repeat(g / p, p, axis=-1)
    return (out,)


def softmax_last(x) -> Variable:
    x = as_variable(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, "softmax", (x,), y=y)


@_rule("softmax")
def _softmax_bw(node, g):
    y = node.saved["y"]
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def cross_entropy(logits, labels) -> Variable:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_variable(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    loss = np.asarray((lse - z[rows, labels]).mean())
    return _make(loss, "cross_entropy", (logits,), z=z, lse=lse, labels=labels)


@_rule("cross_entropy")
def _ce_bw(node, g):
    z, lse, labels = node.saved["z"], node.saved["lse"], node.saved["labels"]
    p = np.exp(z - lse[:, None])
    p[np.arange(labels.size), labels] -= 1.0
    return (g * p / labels.size,)


# ---------------------------------------------------------------------------
# Normalisation and regularisation
# ---------------------------------------------------------------------------

_SUBS = "defghijk"


def _channel_sum(a: np.ndarray) -> np.ndarray:
    sub = "bc" + _SUBS[: a.ndim - 2]
    return np.einsum(f"{sub}->c", a)


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sub = "bc" + _SUBS[: a.ndim - 2]
    return np.einsum(f"{sub},{sub}->c", a, b)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Variable:
    """Per-channel (axis 1) normalisation over batch and spatial axes.

    In training mode the running statistics are updated in place; the running
    variance uses the unbiased batch estimate.
    """
    x, gamma, beta = as_variable(x), as_variable(gamma), as_variable(beta)
    bshape = (1, -1) + (1,) * (x.value.ndim - 2)
    n = x.size // x.shape[1]
    if training:
        mu = _channel_sum(x.value) / n
        xc = x.value - mu.reshape(bshape)
        var = _channel_dot(xc, xc) / n
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        xc = x.value - running_mean.reshape(bshape)
        var = running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    y = xc * (inv_std * gamma.value).reshape(bshape) + beta.value.reshape(bshape)
    return _make(y, "batch_norm", (x, gamma, beta), xc=xc, inv_std=inv_std,
                 training=training, bshape=bshape, n=n)


@_rule("batch_norm")
def _bn_bw(node, g):
    x, gamma, _ = node.inputs
    s = node.saved
    bshape, xc, inv_std, n = s["bshape"], s["xc"], s["inv_std"], s["n"]
    g_xc = _channel_dot(g, xc)
    dgamma = g_xc * inv_std
    dbeta = _channel_sum(g)
    dx = None
    if x.requires_grad:
        scale = gamma.value * inv_std
        if s["training"]:
            # dx = gamma*inv_std * (g - mean(g) - xhat*mean(g*xhat))
            shift = dbeta / n
            slope = g_xc * inv_std ** 2 / n
            dx = (g - shift.reshape(bshape) - xc * slope.reshape(bshape)) * scale.reshape(bshape)
        else:
            dx = g * scale.reshape(bshape)
    return dx, dgamma, dbeta


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Variable:
    """Inverted dropout; identity in eval mode or at rate 0."""
    x = as_variable(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.value * mask, "dropout", (x,), mask=mask)


@_rule("dropout")
def _dropout_bw(node, g):
    return (g * node.saved["mask"],)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Padding:
    """Zero padding of the two spatial axes: (top, bottom, left, right)."""

    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0

    @classmethod
    def none(cls) -> "Padding":
        return cls()

    @classmethod
    def symmetric(cls, ph: int, pw: int) -> "Padding":
        return cls(ph, ph, pw, pw)

    @classmethod
    def causal_left(cls, pw: int) -> "Padding":
        return cls(0, 0, pw, 0)

    @classmethod
    def same_last(cls, kernel: int, dilation: int = 1) -> "Padding":
        """Length-preserving padding on the last axis.

        Odd kernels pad symmetrically; even kernels put the extra zero on the
        left, the same alignment as the centred STFT frames.
        """
        span = dilation * (kernel - 1)
        return cls(0, 0, span - span // 2, span // 2)


def conv2d(x, weight, bias=None, groups: int = 1, dilation: tuple[int, int] = (1, 1),
           padding: Padding = Padding()) -> Variable:
    """Grouped, dilated 2-D cross-correlation.

    ``x`` is [B, Cin, H, W] and ``weight`` is [Cout, Cin/groups, kH, kW].
    """
    x, weight = as_variable(x), as_variable(weight)
    if x.value.ndim != 4 or weight.value.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, cin, H, W = x.shape
    cout, cg, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups or cin // groups != cg:
        raise ConfigError(
            f"conv2d channel grouping mismatch: input {x.shape}, weight {weight.shape}, groups={groups}")
    dh, dw = dilation
    if dh < 1 or dw < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    pad = padding
    if pad.top or pad.bottom or pad.left or pad.right:
        xp = np.pad(x.value, ((0, 0), (0, 0), (pad.top, pad.bottom), (pad.left, pad.right)))
    else:
        xp = x.value
    hp, wp = xp.shape[2:]
    eh, ew = dh * (kh - 1) + 1, dw * (kw - 1) + 1
    ho, wo = hp - eh + 1, wp - ew + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d kernel {weight.shape} (dilation {dilation}) larger than padded input {xp.shape}")
    og = cout // groups
    if kw == 1 and ho == 1 and pad == Padding():
        # kernel spans the whole height: a batched matmul, no window copy
        xr = x.value.reshape(B, groups, cg * H, W)
        wm = weight.value.reshape(groups, og, cg * kh)
        out = np.matmul(wm, xr).reshape(B, cout, 1, W)
        y = _make(out, "conv2d_span", (x, weight), groups=groups)
        if bias is not None:
            y = add(y, reshape(bias, (1, -1, 1, 1)))
        return y
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))[..., ::dh, ::dw]
    cols = (win.reshape(B, groups, cg, ho, wo, kh, kw)
               .transpose(1, 0, 3, 4, 2, 5, 6)
               .reshape(groups, B * ho * wo, cg * kh * kw))
    wm = weight.value.reshape(groups, og, cg * kh * kw)
    out = np.matmul(cols, wm.transpose(0, 2, 1))
    out = out.reshape(groups, B, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(B, cout, ho, wo)
    y = _make(out, "conv2d", (x, weight), cols=cols, groups=groups, dilation=(dh, dw),
              padding=pad, padded_shape=xp.shape)
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1, 1)))
    return y


@_rule("conv2d")
def _conv2d_bw(node, g):
    x, weight = node.inputs
    s = node.saved
    cols, groups, (dh, dw), pad = s["cols"], s["groups"], s["dilation"], s["padding"]
    B, cin, _, _ = x.shape
    cout, cg, kh, kw = weight.shape
    og = cout // groups
    _, _, ho, wo = g.shape
    go = g.reshape(B, groups, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, B * ho * wo, og)
    gw = None
    if weight.requires_grad:
        gw = np.matmul(cols.transpose(0, 2, 1), go).transpose(0, 2, 1).reshape(weight.shape)
    gx = None
    if x.requires_grad:
        wm = weight.value.reshape(groups, og, cg * kh * kw)
        gcols = (np.matmul(go, wm)
                 .reshape(groups, B, ho, wo, cg, kh, kw)
                 .transpose(1, 0, 4, 2, 3, 5, 6)
                 .reshape(B, cin, ho, wo, kh, kw))
        gxp = np.zeros(s["padded_shape"])
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i * dh:i * dh + ho, j * dw:j * dw + wo] += gcols[..., i, j]
        hp, wp = gxp.shape[2:]
        gx = gxp[:, :, pad.top:hp - pad.bottom, pad.left:wp - pad.right]
    return gx, gw


@_rule("conv2d_span")
def _conv2d_span_bw(node, g):
    x, weight = node.inputs
    groups = node.saved["groups"]
    B, cin, H, W = x.shape
    cout, cg, kh, _ = weight.shape
    og = cout // groups
    gr = g.reshape(B, groups, og, W)
    wm = weight.value.reshape(groups, og, cg * kh)
    gw = gx = None
    if weight.requires_grad:
        xr = x.value.reshape(B, groups, cg * H, W)
        gw = np.einsum("bgow,bgkw->gok", gr, xr).reshape(weight.shape)
    if x.requires_grad:
        gx = np.matmul(wm.transpose(0, 2, 1), gr).reshape(x.shape)
    return gx, gw


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(f: Callable[[], Variable], x: Variable, eps: float = 1e-5,
                      tol: float = 1e-4) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``f`` w.r.t. ``x``.

    ``f`` takes no arguments and must read ``x`` itself; it has to be
    deterministic (dropout disabled). ``x.grad`` is left zeroed.
    """
    return check_gradients(f, [x], eps=eps, tol=tol)


def check_gradients(f: Callable[[], Variable], params: Sequence[Variable], eps: float = 1e-5,
                    tol: float = 1e-4) -> GradCheckReport:
    for p in params:
        # perturbation below writes through a flat view, which needs an owned contiguous array
        p.value = np.ascontiguousarray(p.value, dtype=np.float64)
        p.zero_grad()
    with Graph():
        loss = f()
        backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    worst, n = 0.0, 0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.value.reshape(-1)
            num = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().value)
                flat[i] = orig - eps
                fm = float(f().value)
                flat[i] = orig
                num[i] = (fp - fm) / (2 * eps)
            if flat.size:
                worst = max(worst, float(rel_error(a.reshape(-1), num).max()))
            n += flat.size
    return GradCheckReport(worst, worst < tol, n)
