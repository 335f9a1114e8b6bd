"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops run eagerly on numpy arrays. When a recording scope (``record()``) is
active, every op that touches a tracked tensor appends a node to the tape;
``backward(loss)`` walks the tape once in reverse, deposits gradients on
grad-enabled leaves, and clears the tape. Without an active scope the same
ops run as plain numpy with zero bookkeeping.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    GraphError,
    NumericError,
    OracleError,
    ShapeError,
    UsageError,
)

_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "graphs"):
        _state.graphs = []
    return _state.graphs


def active_graph() -> "Graph | None":
    s = _stack()
    return s[-1] if s else None


class Graph:
    """Tape of recorded op nodes, in execution (= topological) order."""

    __slots__ = ("nodes", "used")

    def __init__(self):
        self.nodes: list[Node] = []
        self.used = False


@contextmanager
def record():
    """Open a fresh tape; ops inside the scope are recorded onto it."""
    g = Graph()
    _stack().append(g)
    try:
        yield g
    finally:
        _stack().pop()


@contextmanager
def no_grad():
    """Suppress recording inside the scope (cheap inference / finite differences)."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


class Node:
    __slots__ = ("parents", "bwd", "grad", "leaf")

    def __init__(self, parents, bwd, leaf=None):
        self.parents = parents
        self.bwd = bwd
        self.grad = None
        self.leaf = leaf


class Tensor:
    """Immutable-by-convention dense array; the substrate for all model math."""

    __slots__ = ("data", "grad_enabled", "grad", "_node", "_graph")

    def __init__(self, data, grad_enabled: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite data")
        self.data = arr
        self.grad_enabled = grad_enabled
        self.grad = np.zeros_like(arr) if grad_enabled else None
        self._node = None
        self._graph = None

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no graph connection; gradients stop here."""
        return _make(self.data)

    def retain_grad(self) -> "Tensor":
        """Deposit this tensor's gradient on .grad at backward even if non-leaf."""
        self.grad_enabled = True
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        if self._node is not None:
            self._node.leaf = self
        return self

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad_enabled={self.grad_enabled})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            a, b = self.data, other.data
            out = a + b

            def bwd(g):
                return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

            return _apply(out, (self, other), bwd)
        c = np.asarray(other, dtype=np.float64)
        out = self.data + c
        shape = self.data.shape

        def bwd(g):
            return (_unbroadcast(g, shape),)

        return _apply(out, (self,), bwd)

    __radd__ = __add__

    def __neg__(self):
        return _apply(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            a, b = self.data, other.data
            out = a * b

            def bwd(g):
                return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

            return _apply(out, (self, other), bwd)
        c = np.asarray(other, dtype=np.float64)
        a = self.data
        out = a * c

        def bwd(g):
            return (_unbroadcast(g * c, a.shape),)

        return _apply(out, (self,), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            a, b = self.data, other.data
            out = a / b

            def bwd(g):
                return (
                    _unbroadcast(g / b, a.shape),
                    _unbroadcast(-g * a / (b * b), b.shape),
                )

            return _apply(out, (self, other), bwd)
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        c = np.asarray(other, dtype=np.float64)
        a = self.data
        out = c / a

        def bwd(g):
            return (_unbroadcast(-g * c / (a * a), a.shape),)

        return _apply(out, (self,), bwd)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- pointwise functions ----------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return _apply(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return _apply(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _apply(out, (self,), lambda g: (g / (2.0 * out),))

    def relu(self):
        a = self.data
        return _apply(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0.0),))

    def gelu(self):
        # tanh form; smooth everywhere, which keeps finite-difference checks clean
        a = self.data
        k = math.sqrt(2.0 / math.pi)
        inner = k * (a + 0.044715 * a**3)
        t = np.tanh(inner)
        out = 0.5 * a * (1.0 + t)

        def bwd(g):
            d = 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * k * (1.0 + 3 * 0.044715 * a * a)
            return (g * d,)

        return _apply(out, (self,), bwd)

    def clamp(self, lo: float, hi: float):
        """Clip to [lo, hi]; gradient passes through on the closed interval."""
        a = self.data
        out = np.clip(a, lo, hi)
        mask = (a >= lo) & (a <= hi)
        return _apply(out, (self,), lambda g: (g * mask,))

    # -- reductions and reshaping ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self.data
        out = a.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            return (_spread(g, a.shape, axis, keepdims),)

        return _apply(np.asarray(out), (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        a = self.data
        out = a.mean(axis=axis, keepdims=keepdims)
        n = a.size if axis is None else np.prod([a.shape[i] for i in _norm_axes(axis, a.ndim)])

        def bwd(g):
            return (_spread(g, a.shape, axis, keepdims) / n,)

        return _apply(np.asarray(out), (self,), bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self.data
        return _apply(a.reshape(shape), (self,), lambda g: (g.reshape(a.shape),))

    def transpose(self, axes=None):
        a = self.data
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return _apply(np.transpose(a, axes), (self,), lambda g: (np.transpose(g, inv),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        a = self.data
        out = np.ascontiguousarray(a[idx])

        def bwd(g):
            full = np.zeros_like(a)
            full[idx] = g
            return (full,)

        return _apply(out, (self,), bwd)


# -- graph plumbing -------------------------------------------------------------


def _make(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad_enabled = False
    t.grad = None
    t._node = None
    t._graph = None
    return t


def _apply(out_data: np.ndarray, inputs: tuple, bwd: Callable) -> Tensor:
    out = _make(out_data)
    g = active_graph()
    if g is None:
        return out
    parents = []
    tracked = False
    for t in inputs:
        node = t._node if t._graph is g else None
        if node is None and t.grad_enabled:
            if g.used:
                raise GraphError("graph already consumed by backward; open a fresh record() scope")
            node = Node((), None, leaf=t)
            g.nodes.append(node)
            t._node, t._graph = node, g
        if node is not None:
            tracked = True
        parents.append(node)
    if tracked:
        if g.used:
            raise GraphError("graph already consumed by backward; open a fresh record() scope")
        node = Node(tuple(parents), bwd)
        g.nodes.append(node)
        out._node, out._graph = node, g
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over broadcast dimensions back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spread(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back to the unreduced shape."""
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        for a in sorted(_norm_axes(axis, len(shape))):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; deposits gradients on tracked leaves.

    The consumed graph is cleared; calling backward twice on the same
    recording is rejected. Gradients accumulate across separate recordings
    until the leaves are zeroed.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    g = loss._graph
    node = loss._node
    if g is None or node is None:
        raise GraphError("loss is not connected to a recorded graph")
    if g.used:
        raise GraphError("backward already ran on this graph; re-record before calling again")
    g.used = True
    node.grad = np.ones_like(loss.data)
    for n in reversed(g.nodes):
        gr = n.grad
        if gr is None:
            continue
        if n.leaf is not None:
            leaf = n.leaf
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad = leaf.grad + gr
        if n.bwd is not None:
            for p, ig in zip(n.parents, n.bwd(gr)):
                if p is None or ig is None:
                    continue
                p.grad = ig if p.grad is None else p.grad + ig
        n.grad = None
    g.nodes.clear()


class Parameter:
    """Named learnable tensor; its gradient is zeroed between optimizer steps."""

    __slots__ = ("tensor", "name", "clamp_min")

    def __init__(self, data, name: str, clamp_min: float | None = None):
        self.tensor = Tensor(data, grad_enabled=True)
        self.name = name
        self.clamp_min = clamp_min

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    @property
    def shape(self) -> tuple:
        return self.tensor.data.shape

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


# -- linear algebra and NN ops ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with gradients for both operands."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _apply(out, (a, b), bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along `axis`; outputs are positive and sum to one."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.data.shape}")
    a = x.data
    m = a.max(axis=axis, keepdims=True)
    e = np.exp(a - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _apply(s, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    a, gd, bd = x.data, gamma.data, beta.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gd * xhat + bd
    lead = tuple(range(a.ndim - 1))

    def bwd(g):
        dgamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbeta = g.sum(axis=lead) if lead else g
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _apply(out, (x, gamma, beta), bwd)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of a CxHxW input with an OxCxKhxKw kernel."""
    if stride < 1:
        raise ConfigError("conv2d stride must be >= 1")
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects CxHxW input and OxCxKhxKw weight, got {x.data.shape} and {weight.data.shape}")
    cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin_w != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # cin, ho, wo, kh, kw
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    wm = weight.data.reshape(cout, cin * kh * kw)
    out = wm @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(cout, ho, wo)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gm = g.reshape(cout, ho * wo)
        dw = (gm @ cols.T).reshape(weight.data.shape)
        dcols = (wm.T @ gm).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros((cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        dx = dxp[:, padding : padding + h, padding : padding + w] if padding else dxp
        if bias is None:
            return dx, dw
        return dx, dw, gm.sum(axis=1)

    return _apply(out, inputs, bwd)


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row-interpolation matrix for align-corners-false bilinear upsampling."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear x2 or x4 upsampling (align-corners-false) of a CxHxW tensor."""
    if factor not in (2, 4):
        raise ConfigError(f"unsupported upsampling factor {factor}; expected 2 or 4")
    if x.data.ndim != 3:
        raise ShapeError(f"upsample_bilinear expects CxHxW, got {x.data.shape}")
    _, h, w = x.data.shape
    rm = _interp_matrix(h, factor)
    cm = _interp_matrix(w, factor)
    out = np.matmul(np.matmul(rm, x.data), cm.T)

    def bwd(g):
        return (np.matmul(np.matmul(rm.T, g), cm),)

    return _apply(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis` with gradient split back to each operand."""
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _apply(out, tuple(tensors), bwd)


# -- gradient oracle ------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable,
    eps: float = 1e-5,
) -> float:
    """Central-difference check of reverse-mode gradients.

    `f` evaluates the scalar objective from the current values of `params`
    (Tensors or Parameters). Returns the max over coordinates of
    |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ConfigError("finite_diff_check eps must be positive")
    tensors = [p.tensor if isinstance(p, Parameter) else p for p in params]
    for t in tensors:
        t.grad_enabled = True
        t.grad = np.zeros_like(t.data)

    with no_grad():
        a = float(f().data)
        b = float(f().data)
    if abs(a - b) > 1e-12:
        raise OracleError(f"objective is not deterministic: {a!r} vs {b!r}")

    with record():
        loss = f()
        backward(loss)
    analytic = [t.grad.reshape(-1).copy() for t in tensors]

    max_rel = 0.0
    with no_grad():
        for t, an in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                rel = abs(an[i] - num) / max(1.0, abs(num))
                if rel > max_rel:
                    max_rel = rel
    return max_rel
