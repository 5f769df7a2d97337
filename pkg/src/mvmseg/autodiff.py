"""Minimal reverse-mode differentiation for the segmentation networks.

Image tensors are indexed as ``[B, C, H, W]``.  Buffers produced by the
image ops are stored channel-last in memory and exposed as transposed views,
so ``x.data[b, c, i, j]`` always means what it says while the convolution
kernels get contiguous ``(B*H*W, C)`` panels for free.  Nothing outside this
module needs to care about the memory order.

Usage::

    with Tape() as tape:
        logits = conv2d(x, w, b)
        loss = softmax_ce(logits, labels)
    tape.backward(loss)
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "Adam",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "precision",
    "get_dtype",
    "conv2d",
    "maxpool2",
    "upsample_nn2",
    "concat_channels",
    "relu",
    "sigmoid",
    "mul",
    "sum_all",
    "softmax_ce",
    "backward",
    "adam_step",
    "check_finite",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with an op's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class TapeError(RuntimeError):
    """Misuse of the tape (non-scalar root, double backward, ...)."""


_DTYPE = np.float32
_TAPES: list["Tape"] = []


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the working float type (``float32`` or ``float64``).

    Training runs in float32; gradient checks switch to float64 for headroom.
    """
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    old = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = old


class Tensor:
    """Numeric array taking part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return np.ascontiguousarray(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of executed ops; replayed in reverse by :meth:`backward`."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(out_arr: np.ndarray, inputs: tuple[Tensor, ...], make_backward) -> Tensor:
    """Wrap an op result; log it on the active tape when gradients are needed.

    ``make_backward`` is only called when recording, so ops can defer saving
    activations until it is clear they are needed.
    """
    tape = _active_tape()
    needs = tuple(t.requires_grad for t in inputs)
    if tape is None or not any(needs):
        return Tensor._wrap(out_arr, False)
    out = Tensor._wrap(out_arr, True)
    tape.records.append(_Record(out, inputs, make_backward(needs)))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf tensor on ``tape``.

    Intermediate tensors get their gradient assigned as well.  A tape can be
    replayed once; run the forward pass again for another backward.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise TapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed; re-run the forward pass first")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor requiring grad")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.out) for r in tape.records}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        rec.out.grad = g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.pop(key)
        if t.grad is None or t.grad.shape != t.data.shape:
            t.grad = np.zeros_like(t.data)
        t.grad += g.reshape(t.data.shape)
    tape.records.clear()


def check_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    arr = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN/Inf")


# ---------------------------------------------------------------------------
# layout helpers


def _nhwc(a: np.ndarray) -> np.ndarray:
    """Channel-last contiguous buffer of a logical [B,C,H,W] array (free if already so)."""
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _bchw(buf: np.ndarray) -> np.ndarray:
    return buf.transpose(0, 3, 1, 2)


_NEGLIGIBLE = 2.0**-60


def _flush_subnormal(a: np.ndarray) -> np.ndarray:
    """Zero entries below the smallest normal float.  Saturated sigmoids and softmax
    gradients otherwise seed subnormals, which slow every later GEMM many times over."""
    a[np.abs(a) < np.finfo(a.dtype).tiny] = 0
    return a


def _require_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a rank-4 [B,C,H,W] tensor, got shape {x.shape}")


def _im2col3(xl: np.ndarray) -> np.ndarray:
    """(B,H,W,C) -> (B*H*W, 9*C) patches of the zero-padded input, (u, v, c) order."""
    B, H, W, C = xl.shape
    xp = np.zeros((B, H + 2, W + 2, C), xl.dtype)
    xp[:, 1:-1, 1:-1, :] = xl
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # B,H,W,C,3,3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, 9 * C)


# ---------------------------------------------------------------------------
# ops


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 'same' convolution with a 3x3 (zero padding 1) or 1x1 kernel.

    ``y[n,o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] * x_pad[n,c,i+u,j+v]``
    """
    _require_rank4(x, "conv2d")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [Cout,Cin,k,k], got shape {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if (kh, kw) not in ((3, 3), (1, 1)):
        raise ShapeError(f"conv2d: kernel must be 3x3 or 1x1, got {kh}x{kw}")
    if Cw != C:
        raise ShapeError(f"conv2d: input channels (dim 1) = {C} but weight expects Cin = {Cw}")
    if b.shape != (O,):
        raise ShapeError(f"conv2d: bias must have shape ({O},), got {b.shape}")

    k = kh
    # weight as a (k*k*Cin, Cout) panel in (u, v, c) row order
    wm = w.data.transpose(2, 3, 1, 0).reshape(k * k * C, O)
    xl = _nhwc(x.data)
    cols = _im2col3(xl) if k == 3 else xl.reshape(B * H * W, C)
    y = cols @ wm
    y += b.data
    out = _bchw(y.reshape(B, H, W, O))

    def make_backward(needs):
        def bwd(g):
            gm = _nhwc(g).reshape(B * H * W, O)
            gx = gw = gb = None
            if needs[0]:
                if k == 3:
                    # transposed conv: correlate the padded output grad with the flipped kernel
                    wf = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(9 * O, C)
                    gxm = _im2col3(gm.reshape(B, H, W, O)) @ wf
                else:
                    gxm = gm @ wm.T
                gx = _bchw(gxm.reshape(B, H, W, C))
            if needs[1]:
                gw = (gm.T @ cols).reshape(O, k, k, C).transpose(0, 3, 1, 2)
            if needs[2]:
                # a GEMV is far faster than a reduction over the long axis
                gb = np.ones(B * H * W, gm.dtype) @ gm
            return gx, gw, gb

        return bwd

    return _record(out, (x, w, b), make_backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties route to the first window element in scan order."""
    _require_rank4(x, "maxpool2")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2: spatial extent must be even, got H={H}, W={W}")
    H2, W2 = H // 2, W // 2
    xl = _nhwc(x.data)
    # the four window elements in scan order, as strided views
    quads = [xl[:, u::2, v::2, :] for u in (0, 1) for v in (0, 1)]
    outl = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    out = _bchw(outl)

    def make_backward(needs):
        def bwd(g):
            gl = _nhwc(g)
            gxl = np.zeros((B, H, W, C), g.dtype)
            taken = np.zeros(outl.shape, bool)
            for (u, v), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), quads):
                # first winner in scan order takes the gradient
                win = (q == outl) & ~taken
                taken |= win
                gxl[:, u::2, v::2, :] = gl * win
            return (_bchw(gxl),)

        return bwd

    return _record(out, (x,), make_backward)


def upsample_nn2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling: every pixel becomes a 2x2 block."""
    _require_rank4(x, "upsample_nn2")
    B, C, H, W = x.shape
    xl = _nhwc(x.data)
    outl = np.broadcast_to(xl[:, :, None, :, None, :], (B, H, 2, W, 2, C)).reshape(B, 2 * H, 2 * W, C)
    out = _bchw(outl)

    def make_backward(needs):
        def bwd(g):
            gl = _nhwc(g)
            gxl = gl[:, 0::2, 0::2] + gl[:, 0::2, 1::2]
            gxl += gl[:, 1::2, 0::2]
            gxl += gl[:, 1::2, 1::2]
            return (_bchw(gxl),)

        return bwd

    return _record(out, (x,), make_backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a``'s channels before ``b``'s."""
    _require_rank4(a, "concat_channels")
    _require_rank4(b, "concat_channels")
    Ba, Ca, Ha, Wa = a.shape
    Bb, Cb, Hb, Wb = b.shape
    for dim, (p, q) in (("batch (dim 0)", (Ba, Bb)), ("height (dim 2)", (Ha, Hb)), ("width (dim 3)", (Wa, Wb))):
        if p != q:
            raise ShapeError(f"concat_channels: {dim} mismatch {p} vs {q}")
    outl = np.concatenate([_nhwc(a.data), _nhwc(b.data)], axis=3)
    out = _bchw(outl)

    def make_backward(needs):
        def bwd(g):
            return g[:, :Ca], g[:, Ca:]

        return bwd

    return _record(out, (a, b), make_backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def make_backward(needs):
        mask = x.data > 0

        def bwd(g):
            return (g * mask,)

        return bwd

    return _record(out, (x,), make_backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = _flush_subnormal(np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False))
    if z.ndim == 4:
        out = _bchw(_nhwc(out))

    def make_backward(needs):
        def bwd(g):
            return (g * out * (1 - out),)

        return bwd

    return _record(out, (x,), make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.  ``b`` may be ``[B,1,H,W]`` against ``a`` = ``[B,C,H,W]``;
    no other broadcasting is supported."""
    channel_bcast = False
    if a.shape != b.shape:
        if a.data.ndim == 4 and b.data.ndim == 4 and b.shape[1] == 1 and (
            a.shape[0],
            a.shape[2],
            a.shape[3],
        ) == (b.shape[0], b.shape[2], b.shape[3]):
            channel_bcast = True
        else:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are not compatible")
    if channel_bcast:
        out = _bchw(_nhwc(a.data) * _nhwc(b.data))
    else:
        out = a.data * b.data

    def make_backward(needs):
        def bwd(g):
            ga = gb = None
            if needs[0]:
                ga = g * b.data
            if needs[1]:
                gb = g * a.data
                if channel_bcast:
                    gb = gb.sum(axis=1, keepdims=True)
            return ga, gb

        return bwd

    return _record(out, (a, b), make_backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def make_backward(needs):
        def bwd(g):
            return (np.broadcast_to(g, x.shape),)

        return bwd

    return _record(out, (x,), make_backward)


def softmax_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Two-class softmax cross-entropy averaged over every pixel of the batch."""
    _require_rank4(logits, "softmax_ce")
    B, K, H, W = logits.shape
    if K != 2:
        raise ShapeError(f"softmax_ce: expected 2 class channels (dim 1), got {K}")
    labels = np.asarray(labels)
    if labels.shape != (B, H, W):
        raise ShapeError(f"softmax_ce: labels shape {labels.shape} != {(B, H, W)}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("softmax_ce: labels must be 0 (background) or 1 (myocardium)")
    on = labels.astype(bool)
    z0 = logits.data[:, 0]
    z1 = logits.data[:, 1]
    diff = z1 - z0
    # log-sum-exp minus the label logit, with the max subtracted
    margin = np.where(on, diff, -diff)
    per_px = np.maximum(-margin, 0) + np.log1p(np.exp(-np.abs(margin)))
    n = B * H * W
    loss = np.asarray(per_px.sum(dtype=np.float64) / n, dtype=logits.data.dtype)

    def make_backward(needs):
        def bwd(g):
            # softmax p1 = sigmoid(z1 - z0); d/dz1 = p1 - y, d/dz0 = -(p1 - y)
            e = np.exp(-np.abs(diff))
            p1 = np.where(diff >= 0, 1 / (1 + e), e / (1 + e))
            err = p1 - on
            # residuals this small cannot move any float32 sum; dropping them keeps
            # every downstream gradient clear of the subnormal range
            err[np.abs(err) < _NEGLIGIBLE] = 0
            r = err * (g / n)
            return (np.stack([-r, r], axis=1).astype(logits.data.dtype, copy=False),)

        return bwd

    return _record(loss, (logits,), make_backward)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state are not aligned")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {i} shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            name = p.name or f"#{i}"
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name}; update rejected")
    t = state.t + 1
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)
    state.t = t


@dataclass
class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self) -> None:
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.beta1, self.beta2, self.eps)
