"""Dense tensors with reverse-mode automatic differentiation.

numpy holds the data; the recorded graph is the tape. Every non-leaf
tensor keeps edges to the inputs that require gradients together with a
closure that maps the output gradient to that input's gradient.
``backward`` walks the graph once in reverse topological order and then
consumes it, so a fresh forward pass is needed per backward pass.

Float32 is the working precision; gradient checks run the same code at
float64 via ``default_dtype``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

_DEFAULT_DTYPE = np.float32

RMS_EPS = 1e-6  # shared by rms_norm and qk normalization


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default floating dtype (used by grad checks)."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_edges")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._edges: list = []

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, edges: Iterable[tuple["Tensor", Callable]]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        # Inputs that do not require gradients never land on the tape.
        out._edges = [(t, fn) for (t, fn) in edges if t.requires_grad]
        out.requires_grad = bool(out._edges)
        return out

    # -- basic protocol -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def rms_norm(self, gain: "Tensor | None" = None, eps: float = RMS_EPS) -> "Tensor":
        return rms_norm(self, gain, eps)

    def swish(self) -> "Tensor":
        return swish(self)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def absolute(self) -> "Tensor":
        return absolute(self)

    def log(self) -> "Tensor":
        return log(self)

    def expm1(self) -> "Tensor":
        return expm1(self)

    def clip(self, lo: float, hi: float) -> "Tensor":
        return clip(self, lo, hi)

    # -- reverse pass ----------------------------------------------------------

    def backward(self) -> dict:
        """Run reverse-mode AD from this scalar.

        Returns a map from leaf tensor to gradient array and accumulates
        into each leaf's ``.grad``. The recorded graph is consumed.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, _ in node._edges:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._edges:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                    leaf_grads[node] = node.grad
                continue
            for parent, fn in node._edges:
                pg = fn(g)
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
            node._edges = []  # tape entry consumed
        return leaf_grads


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", _DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    data = a.data + b.data
    return Tensor._node(
        data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def sub(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", _DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    data = a.data - b.data
    return Tensor._node(
        data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", _DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    data = a.data * b.data
    ad, bd = a.data, b.data
    return Tensor._node(
        data,
        [
            (a, lambda g: _unbroadcast(g * bd, ad.shape)),
            (b, lambda g: _unbroadcast(g * ad, bd.shape)),
        ],
    )


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant scalar exponent."""
    data = a.data ** p
    ad = a.data
    return Tensor._node(data, [(a, lambda g: g * (p * ad ** (p - 1.0)))])


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return Tensor._node(data, [(a, lambda g: g * data)])


def expm1(a: Tensor) -> Tensor:
    data = np.expm1(a.data)
    return Tensor._node(data, [(a, lambda g: g * (data + 1.0))])


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._node(np.log(ad), [(a, lambda g: g / ad)])


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._node(data, [(a, lambda g: g * data * (1.0 - data))])


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x), beta fixed at 1."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s
    ad = a.data
    return Tensor._node(data, [(a, lambda g: g * (s * (1.0 + ad * (1.0 - s))))])


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._node(np.abs(ad), [(a, lambda g: g * np.sign(ad))])


def maximum(a: Tensor, c: float) -> Tensor:
    """Elementwise max against a constant; gradient is zero at the clamp."""
    mask = a.data > c
    data = np.maximum(a.data, c)
    return Tensor._node(data, [(a, lambda g: g * mask)])


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    data = np.clip(a.data, lo, hi)
    return Tensor._node(data, [(a, lambda g: g * mask)])


# -- shape manipulation -----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    data = a.data.reshape(shape)
    return Tensor._node(data, [(a, lambda g: g.reshape(old))])


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._node(np.transpose(a.data, axes), [(a, lambda g: np.transpose(g, inv))])


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]
    if isinstance(data, np.ndarray):
        data = data.copy()
    shape = a.data.shape

    def back(g, key=key, shape=shape):
        out = np.zeros(shape, dtype=g.dtype)
        out[key] += g
        return out

    return Tensor._node(np.asarray(data), [(a, back)])


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    edges = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def back(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        edges.append((t, back))
    return Tensor._node(data, edges)


# -- reductions --------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Tensor._node(np.asarray(data), [(a, back)])


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    n = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n).astype(g.dtype)

    return Tensor._node(np.asarray(data), [(a, back)])


# -- linear algebra ------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", _DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data
    return Tensor._node(
        data,
        [
            (a, lambda g: _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)),
            (b, lambda g: _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)),
        ],
    )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the row max is treated as a constant."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (g - (g * y).sum(axis=axis, keepdims=True)) * y

    return Tensor._node(y, [(a, back)])


def rms_norm(x: Tensor, gain: Tensor | None = None, eps: float = RMS_EPS) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    if gain is not None and gain.data.shape[-1] != x.data.shape[-1]:
        raise ShapeError(
            f"rms_norm gain length {gain.data.shape} does not match input {x.data.shape}"
        )
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    inv = power(add(ms, eps), -0.5)
    out = mul(x, inv)
    if gain is not None:
        out = mul(out, gain)
    return out


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """SwiGLU feed-forward: (swish(x @ w_gate) * (x @ w_up)) @ w_down."""
    return matmul(mul(swish(matmul(x, w_gate)), matmul(x, w_up)), w_down)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    qk_normalize: bool = False,
    q_gain: Tensor | None = None,
    k_gain: Tensor | None = None,
) -> Tensor:
    """Scaled dot-product attention over (heads, tokens, head_dim) stacks.

    Supports cross-attention: q may hold a different token count than
    k/v. When ``qk_normalize`` is set, q and k rows are RMS-normalized
    per token (optionally gained) before the dot product.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.data.ndim != 3:
            raise ShapeError(f"attention {name} must be 3-d, got {t.data.shape}")
    if q.data.shape[0] != k.data.shape[0] or k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(
            f"attention head counts differ: {q.data.shape}, {k.data.shape}, {v.data.shape}"
        )
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(f"attention q/k dims differ: {q.data.shape} vs {k.data.shape}")
    if k.data.shape[1] != v.data.shape[1]:
        raise ShapeError(f"attention k/v token counts differ: {k.data.shape} vs {v.data.shape}")
    if qk_normalize:
        q = rms_norm(q, q_gain)
        k = rms_norm(k, k_gain)
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), scale)
    return matmul(softmax(scores, axis=-1), v)


# -- structured image ops (used by the dense decoder) ---------------------------------


def conv3x3(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding, no bias.

    x: (H, W, Cin), w: (3, 3, Cin, Cout) -> (H, W, Cout).
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or w.data.shape[:2] != (3, 3):
        raise ShapeError(f"conv3x3 expects (H,W,Cin) and (3,3,Cin,Cout), got {x.data.shape} and {w.data.shape}")
    if x.data.shape[-1] != w.data.shape[2]:
        raise ShapeError(f"conv3x3 channel mismatch: {x.data.shape} vs {w.data.shape}")
    H, W, ci = x.data.shape
    co = w.data.shape[3]
    xp = np.zeros((H + 2, W + 2, ci), dtype=x.data.dtype)
    xp[1 : H + 1, 1 : W + 1] = x.data
    out = np.zeros((H * W, co), dtype=x.data.dtype)
    for ki in range(3):
        for kj in range(3):
            out += xp[ki : ki + H, kj : kj + W].reshape(H * W, ci) @ w.data[ki, kj]
    out = out.reshape(H, W, co)

    wd = w.data

    def back_x(g):
        gp = np.zeros((H + 2, W + 2, ci), dtype=g.dtype)
        gf = g.reshape(H * W, co)
        for ki in range(3):
            for kj in range(3):
                gp[ki : ki + H, kj : kj + W] += (gf @ wd[ki, kj].T).reshape(H, W, ci)
        return gp[1 : H + 1, 1 : W + 1]

    def back_w(g):
        gw = np.zeros_like(wd)
        gf = g.reshape(H * W, co)
        for ki in range(3):
            for kj in range(3):
                gw[ki, kj] = xp[ki : ki + H, kj : kj + W].reshape(H * W, ci).T @ gf
        return gw

    return Tensor._node(out, [(x, back_x), (w, back_w)])


_UPSAMPLE_CACHE: dict = {}


def _upsample_axis_plan(n: int):
    """Index/weight pairs for 2x bilinear upsampling along one axis."""
    plan = _UPSAMPLE_CACHE.get(n)
    if plan is None:
        s = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
        i0 = np.clip(np.floor(s).astype(np.int64), 0, n - 1)
        i1 = np.clip(i0 + 1, 0, n - 1)
        frac = np.clip(s - np.floor(s), 0.0, 1.0)
        w1 = np.where(s < 0, 0.0, np.where(s > n - 1, 0.0, frac))
        w0 = 1.0 - w1
        plan = (i0, i1, w0, w1)
        _UPSAMPLE_CACHE[n] = plan
    return plan


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of an (H, W, C) grid, half-pixel aligned."""
    if x.data.ndim != 3:
        raise ShapeError(f"upsample2x expects (H,W,C), got {x.data.shape}")
    H, W, _ = x.data.shape
    ri0, ri1, rw0, rw1 = _upsample_axis_plan(H)
    ci0, ci1, cw0, cw1 = _upsample_axis_plan(W)
    dt = x.data.dtype
    rows = x.data[ri0] * rw0[:, None, None].astype(dt) + x.data[ri1] * rw1[:, None, None].astype(dt)
    out = rows[:, ci0] * cw0[None, :, None].astype(dt) + rows[:, ci1] * cw1[None, :, None].astype(dt)

    def back(g):
        gt = np.zeros((2 * H, W, g.shape[2]), dtype=g.dtype)
        np.add.at(gt, (slice(None), ci0), g * cw0[None, :, None].astype(g.dtype))
        np.add.at(gt, (slice(None), ci1), g * cw1[None, :, None].astype(g.dtype))
        gx = np.zeros((H, W, g.shape[2]), dtype=g.dtype)
        np.add.at(gx, ri0, gt * rw0[:, None, None].astype(g.dtype))
        np.add.at(gx, ri1, gt * rw1[:, None, None].astype(g.dtype))
        return gx

    return Tensor._node(out, [(x, back)])


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 average pooling of an (H, W, C) grid; H and W must be even."""
    H, W, _ = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2x needs even extents, got {x.data.shape}")
    r = reshape(x, (H // 2, 2, W // 2, 2, x.data.shape[2]))
    return tmean(r, axis=(1, 3))
