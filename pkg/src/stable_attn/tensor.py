"""Dense float64 tensors with a small reverse-mode gradient engine.

Only the operations the decoder and its plugins need are provided. Every op
builds a node holding its parents and a closure mapping the output gradient to
one gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order; leaf tensors accumulate into ``.grad``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, ShapeError

_GRAD_ENABLED = True
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), fn)
    return Tensor(data)


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar ``loss``.

    Leaf tensors add into their existing ``.grad``; call ``zero_grad`` between
    independent passes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    q = a.data / b.data
    return _node(q, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * q / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


# 1 - 2**-52: large enough that 1 +/- this value stays strictly inside (0, 2)
_BELOW_ONE = 1.0 - 2.0**-52


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1)."""
    y = 0.5 * (1.0 + np.clip(np.tanh(0.5 * x.data), -_BELOW_ONE, _BELOW_ONE))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def scaled_tanh(x: Tensor, s_p: float) -> Tensor:
    """``s_p * tanh(x)``; keeps offsets strictly inside ``(-s_p, s_p)``."""
    if not s_p > 0:
        raise ConfigError(f"scale must be positive, got {s_p}")
    # tanh saturates to exactly 1.0 in float64 past |x| ~ 19
    t = np.tanh(x.data)
    lim = np.nextafter(s_p, 0.0)
    return _node(np.clip(s_p * t, -lim, lim), (x,), lambda g: (g * s_p * (1.0 - t * t),))


# shape plumbing --------------------------------------------------------------

def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.data.T.copy(), (x,), lambda g: (g.T,))


def index(x: Tensor, idx) -> Tensor:
    def fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)
    return _node(np.array(x.data[idx]), (x,), fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node(np.concatenate([p.data for p in parts], axis=axis), parts,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)
    return _node(np.asarray(x.data.sum(axis=axis)), (x,), fn)


def mean(x: Tensor) -> Tensor:
    n = x.size
    src = x.shape
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(src, g / n),))


def patchify(x: Tensor, k: int) -> Tensor:
    """Space-to-depth: ``H x W x C`` -> ``H/k x W/k x (k*k*C)``."""
    H, W, C = x.shape
    if H % k or W % k:
        raise ShapeError(f"patchify stride {k} does not divide spatial shape {(H, W)}")
    y = x.data.reshape(H // k, k, W // k, k, C).transpose(0, 2, 1, 3, 4).reshape(H // k, W // k, k * k * C)
    def fn(g):
        return (g.reshape(H // k, W // k, k, k, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C),)
    return _node(y, (x,), fn)


# linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last (channel) axis, then apply ``gamma``/``beta``."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: channel axis {C} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def fn(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), fn)


def conv_1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-position linear map ``H x W x Cin -> H x W x Cout``."""
    H, W, Cin = x.shape
    if w.ndim != 2 or w.shape[0] != Cin or b.shape != (w.shape[1],):
        raise ShapeError(f"conv_1x1: input {x.shape}, weight {w.shape}, bias {b.shape}")
    flat = x.data.reshape(H * W, Cin)

    def fn(g):
        g2 = g.reshape(H * W, -1)
        return (g2 @ w.data.T).reshape(H, W, Cin), flat.T @ g2, g2.sum(axis=0)
    return _node((flat @ w.data + b.data).reshape(H, W, -1), (x, w, b), fn)


def depthwise_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Channelwise ``k x k`` convolution with zero 'same' padding (k odd)."""
    H, W, C = x.shape
    k = w.shape[0]
    if w.shape != (k, k, C) or k % 2 == 0 or b.shape != (C,):
        raise ShapeError(f"depthwise_conv: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    r = k // 2
    xp = np.pad(x.data, ((r, r), (r, r), (0, 0)))
    out = np.broadcast_to(b.data, (H, W, C)).copy()
    for i in range(k):
        for j in range(k):
            out += xp[i:i + H, j:j + W] * w.data[i, j]

    def fn(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for i in range(k):
            for j in range(k):
                gxp[i:i + H, j:j + W] += g * w.data[i, j]
                gw[i, j] = (xp[i:i + H, j:j + W] * g).sum(axis=(0, 1))
        return gxp[r:r + H, r:r + W], gw, g.sum(axis=(0, 1))
    return _node(out, (x, w, b), fn)


def depthwise_conv5x5(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if w.shape[:2] != (5, 5):
        raise ShapeError(f"depthwise_conv5x5 needs a 5x5 kernel, got {w.shape}")
    return depthwise_conv(x, w, b)


def identity_grid(H: int, W: int) -> np.ndarray:
    """Normalised ``H x W x 2`` grid, (x, y) order, -1 and +1 on the corner pixels."""
    xs = np.linspace(-1.0, 1.0, W) if W > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, H) if H > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def _axis_weights(u: np.ndarray, n: int):
    pos = (u + 1.0) * 0.5 * (n - 1)
    inside = (pos >= 0.0) & (pos <= n - 1)
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, pos - i0, inside


def grid_sample_bilinear(x: Tensor, loc: Tensor) -> Tensor:
    """Bilinear sampling of ``x`` (H x W x C) at normalised ``loc`` (H' x W' x 2).

    ``loc[..., 0]`` is the column coordinate and ``loc[..., 1]`` the row,
    both with -1/+1 on the first/last pixel. Out-of-range points clamp to the
    border (zero gradient w.r.t. ``loc`` there).
    """
    H, W, C = x.shape
    if loc.ndim != 3 or loc.shape[-1] != 2:
        raise ShapeError(f"grid_sample: locations must be H' x W' x 2, got {loc.shape}")
    x0, x1, wx, in_x = _axis_weights(loc.data[..., 0], W)
    y0, y1, wy, in_y = _axis_weights(loc.data[..., 1], H)
    v00, v01 = x.data[y0, x0], x.data[y0, x1]
    v10, v11 = x.data[y1, x0], x.data[y1, x1]
    wx_, wy_ = wx[..., None], wy[..., None]
    out = (1 - wy_) * ((1 - wx_) * v00 + wx_ * v01) + wy_ * ((1 - wx_) * v10 + wx_ * v11)

    def fn(g):
        gx = np.zeros_like(x.data)
        for yy, xx, wgt in ((y0, x0, (1 - wy_) * (1 - wx_)), (y0, x1, (1 - wy_) * wx_),
                            (y1, x0, wy_ * (1 - wx_)), (y1, x1, wy_ * wx_)):
            np.add.at(gx, (yy, xx), g * wgt)
        dwx = ((1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)) * g
        dwy = ((1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)) * g
        gloc = np.stack([dwx.sum(-1) * 0.5 * (W - 1) * in_x,
                         dwy.sum(-1) * 0.5 * (H - 1) * in_y], axis=-1)
        return gx, gloc
    return _node(out, (x, loc), fn)


# losses ----------------------------------------------------------------------

def bce_with_logits(z: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross entropy computed from logits."""
    y = np.asarray(target, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"bce: logits {z.shape} vs target {y.shape}")
    zd = z.data
    val = (np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))).mean()
    n = zd.size
    return _node(np.asarray(val), (z,), lambda g: (g * (0.5 * (1.0 + np.tanh(0.5 * zd)) - y) / n,))
