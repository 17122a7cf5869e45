"""Dense NCHW tensor core with reverse-mode differentiation.

Only the operations the detector actually uses are provided. Convolution is
im2col + BLAS matmul; pooling pads with -inf so padding never wins a window.
Gradient accumulation is additive: calling backward() twice without zeroing
doubles every gradient. All ops are deterministic for fixed inputs and dtype.

Precision is a process-global mode (float64 for oracle/gradient work, float32
for training runs); tensors are created in the current mode.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UnsupportedOpError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}, expected one of {sorted(_DTYPES)}")
    global _default_dtype
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global precision mode."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved


class Tensor:
    """Numeric value node. Leaves may carry requires_grad; non-leaves record
    their parents and a vector-Jacobian product for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, _prev=(), _vjp=None, _op=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data if data.dtype == _default_dtype else data.astype(_default_dtype)
        else:
            self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev = tuple(_prev)
        self._vjp = _vjp
        self._op = _op

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Populate .grad on every requires_grad tensor reachable from this
        scalar. Contributions add into existing gradients."""
        if self.size != 1:
            raise ValueError("backward() requires a scalar loss")
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
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))

        local: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = local.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if not node._prev:
                continue
            if node._vjp is None:
                raise UnsupportedOpError(
                    f"no registered derivative for op {node._op!r}")
            for parent, pg in zip(node._prev, node._vjp(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                acc = local.get(id(parent))
                if acc is None:
                    # copy: vjp outputs may alias each other or the upstream array
                    local[id(parent)] = pg.copy()
                else:
                    acc += pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._prev)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.data.dtype), like.shape).copy())


def _make(data, prev, vjp, op) -> Tensor:
    req = any(_needs_grad(p) for p in prev)
    if not req:
        return Tensor(data, _op=op)
    return Tensor(data, _prev=prev, _vjp=vjp, _op=op)


def param(data, requires_grad: bool = True) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# -- elementwise arithmetic ------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "smul")
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b),
                 lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    if a.shape != b.shape:
        raise ShapeError(f"div shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data / b.data, (a, b),
                 lambda g: (g / b.data, -g * a.data / (b.data * b.data)), "div")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / np.maximum(out, 1e-12),), "sqrt")


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def atan(a: Tensor) -> Tensor:
    return _make(np.arctan(a.data), (a,),
                 lambda g: (g / (1.0 + a.data * a.data),), "atan")


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    b = _as_tensor(b, a)
    take_a = a.data >= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (g * take_a, g * ~take_a), "maximum")


def minimum(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    take_a = a.data <= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (g * take_a, g * ~take_a), "minimum")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


# -- activations -----------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); derivative s + x*s*(1-s)."""
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,),
                 lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(_softplus(a.data), (a,), lambda g: (g * s,), "softplus")


# -- reductions --------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")


# -- indexing / layout -------------------------------------------------------

def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return _make(out.copy(), (a,), vjp, "getitem")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),), "reshape")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; all inputs must share n, h, w."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0]
    for i, t in enumerate(inputs[1:], start=1):
        n0, _, h0, w0 = ref.shape
        n, _, h, w = t.shape
        if (n, h, w) != (n0, h0, w0):
            raise ShapeError(
                f"concat_channels: input {i} has n/h/w {(n, h, w)}, "
                f"input 0 has {(n0, h0, w0)}")
    if len(inputs) == 1:
        t = inputs[0]
        return _make(t.data.copy(), (t,), lambda g: (g,), "concat")
    widths = [t.shape[1] for t in inputs]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(inputs)))

    return _make(np.concatenate([t.data for t in inputs], axis=1),
                 tuple(inputs), vjp, "concat")


def upsample_nearest2x(a: Tensor) -> Tensor:
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (a,), vjp, "upsample2x")


def space_to_depth(a: Tensor, scale: int = 2, layer: str | None = None) -> Tensor:
    """Move each scale x scale spatial block into scale^2 channel groups.

    Output channel block (i*scale+j)*c .. holds the input pixels at spatial
    offsets (row = i, col = j) mod scale. Bijective on elements.
    """
    n, c, h, w = a.shape
    if h % scale or w % scale:
        where = f" in layer {layer}" if layer else ""
        raise ShapeError(
            f"space_to_depth{where}: spatial dims {h}x{w} not divisible by {scale}")
    parts = [a.data[:, :, i::scale, j::scale]
             for i in range(scale) for j in range(scale)]
    out = np.concatenate(parts, axis=1)

    def vjp(g):
        z = np.zeros_like(a.data)
        for b, (i, j) in enumerate((i, j) for i in range(scale) for j in range(scale)):
            z[:, :, i::scale, j::scale] = g[:, b * c:(b + 1) * c]
        return (z,)

    return _make(out, (a,), vjp, "space_to_depth")


def depth_to_space(a: Tensor, scale: int = 2) -> Tensor:
    """Inverse of space_to_depth under the same block ordering."""
    n, c4, h, w = a.shape
    if c4 % (scale * scale):
        raise ShapeError(f"depth_to_space: {c4} channels not divisible by {scale * scale}")
    c = c4 // (scale * scale)
    out = np.zeros((n, c, h * scale, w * scale), dtype=a.data.dtype)
    for b, (i, j) in enumerate((i, j) for i in range(scale) for j in range(scale)):
        out[:, :, i::scale, j::scale] = a.data[:, b * c:(b + 1) * c]

    def vjp(g):
        parts = [g[:, :, i::scale, j::scale]
                 for i in range(scale) for j in range(scale)]
        return (np.concatenate(parts, axis=1),)

    return _make(out, (a,), vjp, "depth_to_space")


# -- convolution / pooling ---------------------------------------------------

def _unfold(xp: np.ndarray, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    """(n,c,H,W) zero/inf-padded input -> (n,c,k,k,oh,ow) window stack."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return cols


def _fold_add(dxp: np.ndarray, dcols: np.ndarray, k: int, s: int, oh: int, ow: int) -> None:
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]


def conv_out_hw(h: int, w: int, k: int, s: int, p: int) -> tuple[int, int]:
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, layer: str | None = None) -> Tensor:
    """Cross-correlation with zero padding. weight is (oc, ic, k, k)."""
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    where = f" in layer {layer}" if layer else ""
    if kh != kw:
        raise ConfigError(f"conv2d{where}: non-square kernel {kh}x{kw}")
    if c != ic:
        raise ConfigError(
            f"conv2d{where}: input has {c} channels, weight expects {ic}")
    k, s, p = kh, stride, padding
    oh, ow = conv_out_hw(h, w, k, s, p)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d{where}: non-positive output {oh}x{ow} "
            f"from input {h}x{w} (k={k}, s={s}, p={p})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _unfold(xp, k, s, oh, ow).reshape(n, c * k * k, oh * ow)
    w2 = weight.data.reshape(oc, c * k * k)
    out = np.matmul(w2, cols).reshape(n, oc, oh, ow)
    if bias is not None:
        out += bias.data.reshape(1, oc, 1, 1)

    def vjp(g):
        g2 = g.reshape(n, oc, oh * ow)
        dw = np.einsum("nol,ncl->oc", g2, cols, optimize=True).reshape(weight.shape) \
            if _needs_grad(weight) else None
        dx = None
        if _needs_grad(x):
            dcols = np.matmul(w2.T, g2).reshape(n, c, k, k, oh, ow)
            dxp = np.zeros_like(xp)
            _fold_add(dxp, dcols, k, s, oh, ow)
            dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        db = g.sum(axis=(0, 2, 3)) if bias is not None and _needs_grad(bias) else None
        return (dx, dw) if bias is None else (dx, dw, db)

    prev = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, prev, vjp, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Max over k x k windows; padding positions hold -inf and never win."""
    if k < 1:
        raise ShapeError(f"maxpool2d: kernel {k} < 1")
    if padding >= k:
        raise ShapeError(f"maxpool2d: padding {padding} >= kernel {k}")
    n, c, h, w = x.shape
    s, p = stride, padding
    oh, ow = conv_out_hw(h, w, k, s, p)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"maxpool2d: non-positive output {oh}x{ow}")
    if p:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = _unfold(xp, k, s, oh, ow).reshape(n, c, k * k, oh, ow)
    idx = win.argmax(axis=2)
    out = np.take_along_axis(win, idx[:, :, None], axis=2)[:, :, 0]

    def vjp(g):
        dxp = np.zeros_like(xp)
        for pos in range(k * k):
            i, j = divmod(pos, k)
            dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += g * (idx == pos)
        return (dxp[:, :, p:p + h, p:p + w] if p else dxp,)

    return _make(out, (x,), vjp, "maxpool2d")


# -- batch normalization -----------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                eps: float = 1e-5, momentum: float = 0.1,
                training: bool = False) -> Tensor:
    """Per-channel normalization. Training mode normalizes by batch statistics
    (biased variance) and updates the running buffers in place with the given
    momentum (unbiased variance, matching common detector practice)."""
    n, c, h, w = x.shape
    if gamma.size != c or beta.size != c:
        raise ConfigError(
            f"batchnorm2d: parameter length {gamma.size}/{beta.size} != channels {c}")
    if running_mean.size != c or running_var.size != c:
        raise ConfigError("batchnorm2d: running statistic length mismatch")
    m = n * h * w
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if _needs_grad(gamma) else None
        dbeta = g.sum(axis=(0, 2, 3)) if _needs_grad(beta) else None
        dx = None
        if _needs_grad(x):
            gi = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                # batch statistics depend on x
                mean_gi = gi.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gi * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = inv.reshape(1, c, 1, 1) * (gi - mean_gi - xhat * mean_gx)
            else:
                dx = gi * inv.reshape(1, c, 1, 1)
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), vjp, "batchnorm2d")


# -- gather / loss helpers ---------------------------------------------------

def select_cells(x: Tensor, b_idx: np.ndarray, y_idx: np.ndarray,
                 x_idx: np.ndarray) -> Tensor:
    """Gather full channel vectors at grid cells -> (npos, channels)."""
    n, c, h, w = x.shape
    out = x.data[b_idx, :, y_idx, x_idx]

    def vjp(g):
        z = np.zeros_like(x.data)
        np.add.at(z, (b_idx[:, None], np.arange(c)[None, :],
                      y_idx[:, None], x_idx[:, None]), g)
        return (z,)

    return _make(out, (x,), vjp, "select_cells")


def bce_with_logits_sum(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Sum of binary cross-entropy with logits against constant targets.

    Stable form max(x,0) - x*y + log1p(exp(-|x|)); gradient sigmoid(x) - y.
    """
    x = logits.data
    if targets.shape != x.shape:
        raise ShapeError(f"bce targets shape {targets.shape} != logits {x.shape}")
    y = targets.astype(x.dtype, copy=False)
    val = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return (g * (_sigmoid(x) - y),)

    return _make(np.asarray(val.sum()), (logits,), vjp, "bce_with_logits_sum")
