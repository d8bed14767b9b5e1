"""Dense f64 tensors with reverse-mode automatic differentiation.

The operator set is exactly what the decoder, losses and attack code need:
convolution, affine maps, a small family of pointwise functions, pooling,
bilinear resizing, reductions, restricted-broadcast arithmetic, concat /
reshape, channel softmax and a fused softmax cross-entropy.

Differentiation is tape based.  While a :class:`Tape` is active, every op
whose inputs require gradients appends a backward closure to it; calling
``tape.backward(root)`` replays the closures in strict reverse execution
order and accumulates gradients into the participating tensors.  A tape can
be consumed exactly once.  With no active tape the ops run gradient-free,
which is what evaluation-mode code does.

Everything is float64.  Forward passes are deterministic: repeated execution
on identical inputs produces bit-identical outputs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, GeometryError, ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "conv2d",
    "linear",
    "pointwise",
    "relu",
    "sigmoid",
    "log",
    "neg",
    "add_const",
    "mul_const",
    "gap",
    "resize_bilinear",
    "adaptive_avg_pool2d",
    "reduce",
    "mean",
    "var",
    "tsum",
    "add",
    "sub",
    "mul",
    "div",
    "concat",
    "reshape",
    "softmax",
    "softmax_cross_entropy",
    "grad_check",
]


class Tensor:
    """Dense N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _scalar_err(t: Tensor):
    raise ShapeError(f"expected scalar tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed ops for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the scalar root.  Records run in reverse execution
    order, which is a valid topological order because an op is always
    recorded after the ops that produced its inputs.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, fn: Callable[[], None]) -> None:
        self._records.append(fn)

    def backward(self, root: Tensor) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from root."""
        if root.data.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {root.shape}")
        if self._consumed:
            raise TapeError("tape already consumed; run a new forward pass")
        if not self._records:
            raise TapeError("empty tape: no recorded forward ops")
        self._consumed = True
        root.grad = np.ones_like(root.data)
        for fn in reversed(self._records):
            fn()
        self._records.clear()


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _track(*tensors: Tensor) -> bool:
    """True when the result should participate in differentiation."""
    return _active_tape() is not None and any(t.requires_grad for t in tensors)


def _record(fn: Callable[[], None]) -> None:
    _TAPE_STACK[-1].record(fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Arithmetic with restricted broadcasting
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, requires_grad=_track(a, b))
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad, b.shape))
        _record(bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, requires_grad=_track(a, b))
    if out.requires_grad:
        a_data, b_data = a.data, b.data
        def bwd():
            if out.grad is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad * b_data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad * a_data, b.shape))
        _record(bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data, requires_grad=_track(a, b))
    if out.requires_grad:
        a_data, b_data = a.data, b.data
        def bwd():
            if out.grad is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad / b_data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-out.grad * a_data / (b_data * b_data), b.shape))
        _record(bwd)
    return out


# ---------------------------------------------------------------------------
# Pointwise ops
# ---------------------------------------------------------------------------

_POINTWISE_KINDS = ("relu", "sigmoid", "log", "neg", "add-const", "mul-const")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pointwise(x: Tensor, kind: str, const: float | None = None) -> Tensor:
    """Elementwise map.  `kind` is one of relu | sigmoid | log | neg |
    add-const | mul-const; the *-const kinds require `const`."""
    if kind not in _POINTWISE_KINDS:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    if kind in ("add-const", "mul-const"):
        if const is None:
            raise ValueError(f"pointwise kind {kind!r} requires const")
        c = float(const)

    if kind == "relu":
        out_data = np.maximum(x.data, 0.0)
    elif kind == "sigmoid":
        out_data = _stable_sigmoid(x.data)
    elif kind == "log":
        if np.any(x.data <= 0.0):
            raise DomainError("log requires strictly positive inputs")
        out_data = np.log(x.data)
    elif kind == "neg":
        out_data = -x.data
    elif kind == "add-const":
        out_data = x.data + c
    else:  # mul-const
        out_data = x.data * c

    out = Tensor(out_data, requires_grad=_track(x))
    if out.requires_grad:
        x_data = x.data
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            if kind == "relu":
                _accum(x, g * (x_data > 0.0))
            elif kind == "sigmoid":
                s = out.data
                _accum(x, g * s * (1.0 - s))
            elif kind == "log":
                _accum(x, g / x_data)
            elif kind == "neg":
                _accum(x, -g)
            elif kind == "add-const":
                _accum(x, g)
            else:
                _accum(x, g * c)
        _record(bwd)
    return out


def relu(x: Tensor) -> Tensor:
    return pointwise(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return pointwise(x, "sigmoid")


def log(x: Tensor) -> Tensor:
    return pointwise(x, "log")


def neg(x: Tensor) -> Tensor:
    return pointwise(x, "neg")


def add_const(x: Tensor, c: float) -> Tensor:
    return pointwise(x, "add-const", c)


def mul_const(x: Tensor, c: float) -> Tensor:
    return pointwise(x, "mul-const", c)


# ---------------------------------------------------------------------------
# Linear algebra layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: [B, Din] x [Dout, Din] + [Dout] -> [B, Dout]."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"linear expects 2d/2d/1d, got {x.shape}/{w.shape}/{b.shape}")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} x {w.shape} + {b.shape}")
    out = Tensor(x.data @ w.data.T + b.data, requires_grad=_track(x, w, b))
    if out.requires_grad:
        x_data, w_data = x.data, w.data
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            if x.requires_grad:
                _accum(x, g @ w_data)
            if w.requires_grad:
                _accum(w, g.T @ x_data)
            if b.requires_grad:
                _accum(b, g.sum(axis=0))
        _record(bwd)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw] plus bias."""
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d expects 4d/4d/1d, got {x.shape}/{w.shape}/{b.shape}")
    B, cin, H, W = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w or b.shape[0] != cout:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cin_w}, bias {b.shape[0]}")
    if kh != kw or kh % 2 == 0:
        raise GeometryError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride {stride} / padding {padding}")
    h_num = H + 2 * padding - kh
    w_num = W + 2 * padding - kw
    if h_num < 0 or w_num < 0 or h_num % stride or w_num % stride:
        raise GeometryError(
            f"non-integral output extent for input {H}x{W}, kernel {kh}, "
            f"stride {stride}, padding {padding}"
        )
    h_out = h_num // stride + 1
    w_out = w_num // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    out_data += b.data[None, :, None, None]
    out = Tensor(out_data, requires_grad=_track(x, w, b))

    if out.requires_grad:
        w_data = w.data
        hp, wp = H + 2 * padding, W + 2 * padding
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            if b.requires_grad:
                _accum(b, g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                _accum(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
            if x.requires_grad:
                # Scatter via full correlation with the flipped kernel; the
                # dilation buffer absorbs stride and right-edge shortfall.
                gd = np.zeros((B, cout, hp - kh + 1, wp - kw + 1))
                gd[:, :, ::stride, ::stride] = g
                gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                wf = w_data[:, :, ::-1, ::-1]
                win2 = sliding_window_view(gp, (kh, kw), axis=(2, 3))
                gx = np.tensordot(win2, wf, axes=([1, 4, 5], [0, 2, 3]))
                gx = gx.transpose(0, 3, 1, 2)[:, :, padding:padding + H, padding:padding + W]
                _accum(x, np.ascontiguousarray(gx))
        _record(bwd)
    assert out.shape == (B, cout, h_out, w_out)
    return out


# ---------------------------------------------------------------------------
# Pooling and resizing
# ---------------------------------------------------------------------------


def gap(x: Tensor) -> Tensor:
    """Global average pooling: [B,C,H,W] -> [B,C]."""
    if x.ndim != 4:
        raise ShapeError(f"gap expects 4d input, got {x.shape}")
    B, C, H, W = x.shape
    if H < 1 or W < 1:
        raise ShapeError("gap requires H,W >= 1")
    out = Tensor(x.data.mean(axis=(2, 3)), requires_grad=_track(x))
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _accum(x, np.broadcast_to(out.grad[:, :, None, None] / (H * W), x.shape))
        _record(bwd)
    return out


def _bilinear_axis(in_size: int, out_size: int):
    """Half-pixel-center source coordinates for one axis."""
    dst = np.arange(out_size, dtype=np.float64)
    src = (dst + 0.5) * (in_size / out_size) - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f, 0, in_size - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, in_size - 1).astype(np.intp)
    return i0, i1, frac


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers; identity when sizes match."""
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear expects 4d input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise GeometryError("output extents must be >= 1")
    B, C, H, W = x.shape
    iy0, iy1, fy = _bilinear_axis(H, out_h)
    ix0, ix1, fx = _bilinear_axis(W, out_w)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]

    d = x.data
    out_data = (
        d[:, :, iy0[:, None], ix0[None, :]] * (wy0 * wx0)
        + d[:, :, iy0[:, None], ix1[None, :]] * (wy0 * wx1)
        + d[:, :, iy1[:, None], ix0[None, :]] * (wy1 * wx0)
        + d[:, :, iy1[:, None], ix1[None, :]] * (wy1 * wx1)
    )
    out = Tensor(out_data, requires_grad=_track(x))
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            g = out.grad.reshape(B * C, out_h, out_w)
            gx = np.zeros((B * C, H, W))
            n = np.arange(B * C)[:, None, None]
            for iy, wy in ((iy0, wy0), (iy1, wy1)):
                for ix, wx in ((ix0, wx0), (ix1, wx1)):
                    np.add.at(gx, (n, iy[None, :, None], ix[None, None, :]), g * (wy * wx))
            _accum(x, gx.reshape(B, C, H, W))
        _record(bwd)
    return out


def _pool_bins(in_size: int, out_size: int):
    return [
        (math.floor(i * in_size / out_size), math.ceil((i + 1) * in_size / out_size))
        for i in range(out_size)
    ]


def adaptive_avg_pool2d(x: Tensor, out_size: int) -> Tensor:
    """Average pooling to an out_size x out_size grid (floor/ceil bins)."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d expects 4d input, got {x.shape}")
    if out_size < 1:
        raise GeometryError("output size must be >= 1")
    B, C, H, W = x.shape
    ybins = _pool_bins(H, out_size)
    xbins = _pool_bins(W, out_size)
    out_data = np.empty((B, C, out_size, out_size))
    for i, (y0, y1) in enumerate(ybins):
        for j, (x0, x1) in enumerate(xbins):
            out_data[:, :, i, j] = x.data[:, :, y0:y1, x0:x1].mean(axis=(2, 3))
    out = Tensor(out_data, requires_grad=_track(x))
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            gx = np.zeros_like(x.data)
            for i, (y0, y1) in enumerate(ybins):
                for j, (x0, x1) in enumerate(xbins):
                    area = (y1 - y0) * (x1 - x0)
                    gx[:, :, y0:y1, x0:x1] += out.grad[:, :, i, j][:, :, None, None] / area
            _accum(x, gx)
        _record(bwd)
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

_REDUCE_KINDS = ("mean", "var", "sum")


def reduce(x: Tensor, kind: str, axes: Sequence[int] | int | None = None) -> Tensor:
    """Differentiable mean | var | sum.  `var` is the population variance."""
    if kind not in _REDUCE_KINDS:
        raise ValueError(f"unknown reduce kind {kind!r}")
    if axes is None:
        ax: tuple[int, ...] = tuple(range(x.ndim))
    elif isinstance(axes, int):
        ax = (axes,)
    else:
        ax = tuple(int(a) for a in axes)
    for a in ax:
        if not -x.ndim <= a < x.ndim:
            raise ShapeError(f"axis {a} out of range for shape {x.shape}")
    ax = tuple(sorted(a % x.ndim for a in ax))
    n = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    if n == 0:
        raise ShapeError("reduction over an empty axis")

    if kind == "sum":
        out_data = x.data.sum(axis=ax)
    elif kind == "mean":
        out_data = x.data.mean(axis=ax)
    else:
        out_data = x.data.var(axis=ax)  # population convention (ddof=0)

    out = Tensor(out_data, requires_grad=_track(x))
    if out.requires_grad:
        x_data = x.data
        keep_shape = tuple(1 if a in ax else s for a, s in enumerate(x.shape))
        def bwd():
            if out.grad is None:
                return
            g = out.grad.reshape(keep_shape)
            if kind == "sum":
                _accum(x, np.broadcast_to(g, x.shape).copy())
            elif kind == "mean":
                _accum(x, np.broadcast_to(g / n, x.shape).copy())
            else:
                mu = x_data.mean(axis=ax, keepdims=True)
                _accum(x, g * 2.0 * (x_data - mu) / n)
        _record(bwd)
    return out


def mean(x: Tensor, axes=None) -> Tensor:
    return reduce(x, "mean", axes)


def var(x: Tensor, axes=None) -> Tensor:
    return reduce(x, "var", axes)


def tsum(x: Tensor, axes=None) -> Tensor:
    return reduce(x, "sum", axes)


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_track(*tensors))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd():
            if out.grad is None:
                return
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * out.ndim
                    idx[axis] = slice(int(lo), int(hi))
                    _accum(t, out.grad[tuple(idx)])
        _record(bwd)
    return out


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape), requires_grad=_track(x))
    if out.requires_grad:
        in_shape = x.shape
        def bwd():
            if out.grad is None:
                return
            _accum(x, out.grad.reshape(in_shape))
        _record(bwd)
    return out


# ---------------------------------------------------------------------------
# Softmax family (fused; the public pointwise set has no exp)
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, requires_grad=_track(x))
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(x, s * (g - dot))
        _record(bwd)
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over all pixels of -log softmax(logits) at the integer label.

    logits: [B,K,H,W]; labels: integer [B,H,W] in [0,K).
    """
    if logits.ndim != 4:
        raise ShapeError(f"softmax_cross_entropy expects [B,K,H,W], got {logits.shape}")
    labels = np.asarray(labels)
    B, K, H, W = logits.shape
    if labels.shape != (B, H, W):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise DomainError(f"labels must lie in [0,{K}), got range "
                          f"[{labels.min()},{labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    z_true = np.take_along_axis(z, labels[:, None, :, :], axis=1)[:, 0]
    npix = B * H * W
    out = Tensor((lse - z_true).sum() / npix, requires_grad=_track(logits))
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            e = np.exp(z)
            p = e / e.sum(axis=1, keepdims=True)
            np.subtract.at(p, (np.arange(B)[:, None, None],
                               labels,
                               np.arange(H)[None, :, None],
                               np.arange(W)[None, None, :]), 1.0)
            _accum(logits, out.grad * p / npix)
        _record(bwd)
    return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic scalar-valued function of `inputs`; any
    stochastic masks must be baked into `f` as fixed tensors.  The error for
    each coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)

    max_err = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*inputs).data)
            flat[i] = orig - eps
            fm = float(f(*inputs).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)
        err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
        max_err = max(max_err, float(err.max()))
    return max_err
