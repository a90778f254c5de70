"""Dense float64 tensors with reverse-mode automatic differentiation.

A dynamic tape is built as a side effect of every operation: each result
tensor keeps references to its parents and a closure that routes its
gradient to them. ``backward()`` on a scalar loss walks the graph in
reverse topological order and accumulates gradients by summation at
fan-in points.

Broadcasting is deliberately restricted: binary operands must have equal
rank, with size-1 axes stretching, except that 0-d scalars combine with
anything. Shape bugs surface immediately instead of silently promoting.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "tensor",
    "zeros",
    "ones",
    "concat",
    "take",
    "rearrange",
    "conv2d",
    "upsample2x",
    "attention",
    "make_node",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / data prep)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """N-d float64 array plus optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    # make ndarray <op> Tensor dispatch to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.shape}")

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # -- autodiff machinery --------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(g, self.data.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operators -----------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # method aliases used throughout the pipeline
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return tabs(self)

    def softplus(self):
        return softplus(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# -- graph construction helpers -----------------------------------------------


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def make_node(data, parents, backward) -> Tensor:
    """Register a custom differentiable op: ``backward(grad)`` must
    accumulate into the parents itself (via ``Tensor._accumulate``)."""
    return _make(np.asarray(data, dtype=np.float64), tuple(parents), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # ranks are equal by the broadcast contract; reduce size-1 axes
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == () or sb == ():
        return
    if len(sa) != len(sb):
        raise ValueError(f"rank mismatch {sa} vs {sb}; broadcasting never promotes rank")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"incompatible shapes {sa} vs {sb}")


# -- elementwise binary ops ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(g) if a.requires_grad else None
        b._accumulate(g) if b.requires_grad else None

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * a.data / (b.data * b.data))

    return _make(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _coerce(a)

    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def power(a, p: float) -> Tensor:
    a = _coerce(a)
    p = float(p)
    out_data = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


# -- elementwise unary ops -------------------------------------------------------


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _coerce(a)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _coerce(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    # tanh form is overflow-free on both tails
    out_data = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _coerce(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def tabs(a) -> Tensor:
    a = _coerce(a)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def softplus(a) -> Tensor:
    a = _coerce(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        a._accumulate(g * 0.5 * (np.tanh(0.5 * a.data) + 1.0))

    return _make(out_data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient passes only strictly inside the interval."""
    a = _coerce(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        a._accumulate(g * ((a.data > lo) & (a.data < hi)))

    return _make(out_data, (a,), backward)


# -- reductions -------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- softmax family ------------------------------------------------------------------


def softmax(a, axis=-1) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        a._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward)


# -- linear algebra ---------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast, trailing two contract."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimension mismatch {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), backward)


# -- data movement ----------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def getitem(a, key) -> Tensor:
    a = _coerce(a)
    out_data = np.array(a.data[key])  # copy; 0-d results stay 0-d

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        a._accumulate(buf)

    return _make(out_data, (a,), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather rows by integer index; scatter-adds gradients back."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.intp)
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (slice(None),) * axis + (idx,), g)
        a._accumulate(buf)

    return _make(out_data, (a,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = (slice(None),) * axis + (slice(lo, hi),)
                p._accumulate(g[sl])

    return _make(out_data, tuple(parts), backward)


# -- rearrange -----------------------------------------------------------------------------


def _parse_side(side: str) -> list[list[str]]:
    groups: list[list[str]] = []
    depth = 0
    current: list[str] = []
    for token in side.replace("(", " ( ").replace(")", " ) ").split():
        if token == "(":
            if depth:
                raise ValueError(f"nested parentheses in pattern: {side!r}")
            depth = 1
            current = []
        elif token == ")":
            if not depth:
                raise ValueError(f"unbalanced parentheses in pattern: {side!r}")
            depth = 0
            groups.append(current)
        elif depth:
            current.append(token)
        else:
            groups.append([token])
    if depth:
        raise ValueError(f"unbalanced parentheses in pattern: {side!r}")
    return groups


def rearrange(x, pattern: str, **sizes: int) -> Tensor:
    """einops-style axis split/permute/merge, e.g. ``"b (e c) w h -> (b e) c w h"``.

    Pure data movement: composing a pattern with its inverse is the identity.
    """
    x = _coerce(x)
    lhs, rhs = (s.strip() for s in pattern.split("->"))
    lg, rg = _parse_side(lhs), _parse_side(rhs)
    l_atoms = [n for grp in lg for n in grp]
    r_atoms = [n for grp in rg for n in grp]
    if sorted(l_atoms) != sorted(r_atoms) or len(set(l_atoms)) != len(l_atoms):
        raise ValueError(f"pattern sides must use the same distinct names: {pattern!r}")
    if len(lg) != x.ndim:
        raise ValueError(f"pattern {pattern!r} expects rank {len(lg)}, tensor has rank {x.ndim}")

    extent: dict[str, int] = dict(sizes)
    for grp, dim in zip(lg, x.shape):
        known = 1
        unknown = None
        for name in grp:
            if name in extent:
                known *= extent[name]
            elif unknown is None:
                unknown = name
            else:
                raise ValueError(f"cannot infer two unknown extents in group {grp}")
        if unknown is None:
            if known != dim:
                raise ValueError(f"group {grp} product {known} != axis extent {dim}")
        else:
            if dim % known:
                raise ValueError(f"axis extent {dim} not divisible by {known} in group {grp}")
            extent[unknown] = dim // known

    split = x.reshape(tuple(extent[name] for name in l_atoms))
    perm = tuple(l_atoms.index(name) for name in r_atoms)
    moved = split.transpose(perm)
    out_shape = tuple(int(np.prod([extent[n] for n in grp], dtype=np.int64)) for grp in rg)
    return moved.reshape(out_shape)


# -- convolution & resampling ------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    hout = (h + 2 * ph - kh) // sh + 1
    wout = (w + 2 * pw - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # [B, C, Hout, Wout, kh, kw]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * hout * wout, c * kh * kw)
    return np.ascontiguousarray(col), hout, wout


def conv2d(x, w, bias=None, stride=1, padding=0) -> Tensor:
    """2-d cross-correlation over [B, C, H, W] with an [Cout, Cin, kh, kw] kernel."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    b, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise ValueError(f"channel mismatch: input {c}, kernel expects {cin}")
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ValueError(f"kernel {kh}x{kw} does not fit padded input {h + 2 * ph}x{wd + 2 * pw}")
    col, hout, wout = _im2col(x.data, kh, kw, sh, sw, ph, pw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out_data = (col @ wmat.T).reshape(b, hout, wout, cout).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)
    if bias is not None:
        bias = _coerce(bias)
        out_data = out_data + bias.data.reshape(1, cout, 1, 1)

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * hout * wout, cout)
        if w.requires_grad:
            # recompute col rather than hold it for the node's lifetime
            col2, _, _ = _im2col(x.data, kh, kw, sh, sw, ph, pw)
            w._accumulate((gmat.T @ col2).reshape(w.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0).reshape(bias.data.shape))
        if x.requires_grad:
            dcol = (gmat @ wmat).reshape(b, hout, wout, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros((b, c, h + 2 * ph, wd + 2 * pw))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * hout : sh, j : j + sw * wout : sw] += dcol[:, :, i, j]
            x._accumulate(dxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else dxp)

    return _make(out_data, parents, backward)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour x2 upsampling of [B, C, H, W]."""
    x = _coerce(x)
    if x.ndim != 4:
        raise ValueError(f"upsample2x expects 4-d input, got {x.shape}")
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        b, c, h2, w2 = g.shape
        x._accumulate(g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


# -- attention ------------------------------------------------------------------------------------


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention over [S, D] token matrices."""
    q, k, v = _coerce(q), _coerce(k), _coerce(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention expects 2-d q, k, v")
    s, d = q.shape
    if d == 0:
        raise ValueError("attention with zero feature dimension")
    if k.shape != (s, d) or v.shape != (s, d):
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)
