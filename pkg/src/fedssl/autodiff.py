"""Dense float64 tensors with taped reverse-mode differentiation.

The engine is deliberately small: row-major 64-bit arrays, a handful of
primitives sufficient for a small convolutional encoder and the losses built
on top of it, and an explicit :class:`Tape` recording every primitive
application. Gradients are produced by walking the tape backwards; replaying
it forwards reproduces the recorded outputs bit-exactly, which the test
suite uses as a structural invariant.

Primitives compute eagerly with numpy. When a tape is active (``with
Tape():``) each application is recorded together with a backward closure and
a forward recompute closure. Without an active tape the same functions run
in plain inference mode at no extra cost.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_TENSOR_IDS = itertools.count()

# Module-global tracing target; a Tape installs itself here on __enter__.
_ACTIVE_TAPE: Optional["Tape"] = None


class Tensor:
    """A dense n-dimensional float64 array with a stable identity.

    ``data`` is always C-contiguous (row-major) float64. ``is_param`` marks
    leaves whose gradients :func:`backward` reports; all other leaves are
    skipped.
    """

    __slots__ = ("data", "tid", "is_param", "name", "requires_grad")

    def __init__(self, data, *, is_param: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.tid = next(_TENSOR_IDS)
        self.is_param = is_param
        self.name = name
        # Leaves require grad iff they are parameters; op outputs inherit
        # from their inputs when recorded (see _record).
        self.requires_grad = is_param

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # backward: upstream gradient -> per-input gradient contributions
    # (None for inputs that do not receive gradient).
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    # forward: input arrays -> recomputed output array, for bit-exact replay.
    forward: Callable[..., np.ndarray]


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, so inputs of every entry were
    produced (or existed as leaves) before it: the record is topologically
    sorted by construction.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def replay_max_diff(self) -> float:
        """Recompute every entry from leaf values; return max abs deviation.

        With unchanged leaves the recomputation runs the identical numpy
        calls, so the expected return value is exactly 0.0.
        """
        values: dict[int, np.ndarray] = {}
        worst = 0.0
        for entry in self.entries:
            args = [values.get(t.tid, t.data) for t in entry.inputs]
            out = entry.forward(*args)
            values[entry.output.tid] = out
            diff = float(np.max(np.abs(out - entry.output.data))) if out.size else 0.0
            worst = max(worst, diff)
        return worst


def _record(op, inputs, output, backward_fn, forward_fn):
    output.requires_grad = any(t.requires_grad for t in inputs)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(TapeEntry(op, tuple(inputs), output, backward_fn, forward_fn))
    return output


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter recorded on the tape.

    Returns a mapping from tensor id to gradient array. Leaves that are not
    parameters are skipped; parameters that never entered the graph are
    absent from the result.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    param_ids: set[int] = set()
    for entry in reversed(tape.entries):
        out_grad = grads.get(entry.output.tid)
        if out_grad is None:
            continue
        contribs = entry.backward(out_grad)
        for inp, contrib in zip(entry.inputs, contribs):
            if contrib is None:
                continue
            if inp.is_param:
                param_ids.add(inp.tid)
            if inp.tid in grads:
                grads[inp.tid] = grads[inp.tid] + contrib
            else:
                grads[inp.tid] = contrib
    return {tid: grads[tid] for tid in param_ids if tid in grads}


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def constant(data) -> Tensor:
    """A leaf that carries values but never receives a gradient report."""
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, is_param=True, name=name)


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _record("add", (a, b), out, bwd, lambda x, y: x + y)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return _record("sub", (a, b), out, bwd, lambda x, y: x - y)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))
    return _record("mul", (a, b), out, bwd, lambda x, y: x * y)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _record("div", (a, b), out, bwd, lambda x, y: x / y)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record("neg", (a,), out, lambda g: (-g,), lambda x: -x)


def scale(a: Tensor, k: float) -> Tensor:
    """Multiply by a Python constant (not a graph input)."""
    kf = float(k)
    out = Tensor(a.data * kf)
    return _record("scale", (a,), out, lambda g: (g * kf,), lambda x: x * kf)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    def bwd(g):
        return (g * out.data,)
    return _record("exp", (a,), out, bwd, np.exp)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    def bwd(g):
        return (g / a.data,)
    return _record("log", (a,), out, bwd, np.log)


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    def bwd(g):
        return (g * 0.5 / out.data,)
    return _record("sqrt", (a,), out, bwd, np.sqrt)


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken to be 0."""
    out = Tensor(np.maximum(a.data, 0.0))
    def bwd(g):
        return (g * (a.data > 0.0),)
    return _record("relu", (a,), out, bwd, lambda x: np.maximum(x, 0.0))


def sigmoid(a: Tensor) -> Tensor:
    def fwd(x):
        # Split by sign for stability on large |x|.
        pos = x >= 0
        out = np.empty_like(x)
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    out = Tensor(fwd(a.data))
    def bwd(g):
        return (g * out.data * (1.0 - out.data),)
    return _record("sigmoid", (a,), out, bwd, fwd)


def clamp(a: Tensor, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    out = Tensor(np.clip(a.data, lo, hi))
    def bwd(g):
        return (g * ((a.data > lo) & (a.data < hi)),)
    return _record("clamp", (a,), out, bwd, lambda x: np.clip(x, lo, hi))


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data))
    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)
    return _record("sum", (a,), out, bwd, np.sum)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.sum(a.data) / n)
    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)
    return _record("mean", (a,), out, bwd, lambda x: np.sum(x) / n)


def sum_axis(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)
    return _record("sum_axis", (a,), out, bwd,
                   lambda x: np.sum(x, axis=axis, keepdims=keepdims))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    def bwd(g):
        return (g.reshape(a.data.shape),)
    return _record("reshape", (a,), out, bwd, lambda x: x.reshape(shape))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    def bwd(g):
        return g @ b.data.T, a.data.T @ g
    return _record("matmul", (a, b), out, bwd, lambda x, y: x @ y)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T)
    def bwd(g):
        return (np.ascontiguousarray(g.T),)
    return _record("transpose", (a,), out, bwd,
                   lambda x: np.ascontiguousarray(x.T))


# ---------------------------------------------------------------------------
# Convolution and pooling (3x3, stride 1, zero padding 1)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """[B, C, h+2, w+2] padded input -> [B, C*9, h*w] patch matrix."""
    b, c = xp.shape[0], xp.shape[1]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # windows: [B, C, h, w, 3, 3] view; reorder to [B, C, 3, 3, h, w].
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(b, c * 9, h * w)


def _conv2d_fwd_cols(x: np.ndarray, k: np.ndarray, bias: np.ndarray,
                     ) -> tuple[np.ndarray, np.ndarray]:
    b, c, h, w = x.shape
    o = k.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, w)
    out = np.matmul(k.reshape(o, c * 9), cols)          # [B, O, h*w]
    out = out.reshape(b, o, h, w) + bias[None, :, None, None]
    return out, cols


def _conv2d_fwd(x: np.ndarray, k: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return _conv2d_fwd_cols(x, k, bias)[0]


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1, per-channel bias.

    ``x`` may be a single image ``[c, h, w]`` or a batch ``[B, c, h, w]``;
    the output spatial size equals the input's.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    if kernels.data.ndim != 4 or kernels.data.shape[2:] != (3, 3):
        raise DimensionError(
            f"conv2d kernels must be [out, in, 3, 3], got {kernels.shape}")
    if xd.shape[1] != kernels.data.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if bias.data.shape != (kernels.data.shape[0],):
        raise DimensionError(
            f"conv2d bias must be [out_channels], got {bias.shape}")

    bsz, c, h, w = xd.shape
    o = kernels.data.shape[0]
    outd, cols = _conv2d_fwd_cols(xd, kernels.data, bias.data)
    out = Tensor(outd[0] if squeeze else outd)

    def bwd(g):
        # Reuses the forward's im2col patches; BLAS handles the transposed
        # operand without a copy. The input gradient is skipped entirely
        # when nothing upstream of x needs it (e.g. the raw image batch).
        gd = g[None] if squeeze else g
        g2 = gd.reshape(bsz, o, h * w)
        dk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, 3, 3)
        db = gd.sum(axis=(0, 2, 3))
        if not x.requires_grad:
            return None, dk, db
        k2 = kernels.data.reshape(o, c * 9)
        dcols = np.matmul(k2.T, g2).reshape(bsz, c, 3, 3, h, w)
        dxp = np.zeros((bsz, c, h + 2, w + 2))
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki:ki + h, kj:kj + w] += dcols[:, :, ki, kj]
        dx = dxp[:, :, 1:-1, 1:-1]
        return (dx[0] if squeeze else dx), dk, db

    def fwd(xa, ka, ba):
        res = _conv2d_fwd(xa[None] if squeeze else xa, ka, ba)
        return res[0] if squeeze else res

    return _record("conv2d", (x, kernels, bias), out, bwd, fwd)


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling; spatial extents must be even."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial extents, got {x.shape}")

    def fwd(xa):
        xa4 = xa[None] if squeeze else xa
        r = xa4.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        return r[0] if squeeze else r

    out = Tensor(fwd(x.data))

    def bwd(g):
        gd = g[None] if squeeze else g
        up = np.broadcast_to(gd[:, :, :, None, :, None] * 0.25,
                             (b, c, h // 2, 2, w // 2, 2)).reshape(b, c, h, w)
        return (up[0] if squeeze else up,)

    return _record("avg_pool2", (x,), out, bwd, fwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [c,h,w] -> [c] or [B,c,h,w] -> [B,c]."""
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool input must be 3-D or 4-D, got {x.shape}")
    h, w = x.data.shape[-2:]
    out = Tensor(x.data.mean(axis=(-2, -1)))
    def bwd(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.data.shape).copy(),)
    return _record("global_avg_pool", (x,), out, bwd,
                   lambda xa: xa.mean(axis=(-2, -1)))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

L2_EPSILON = 1e-12


def l2_normalize(v: Tensor) -> Tensor:
    """v / max(||v||, 1e-12) along the last axis.

    Accepts a vector [d] or a row matrix [B, d]; zero rows come back as
    zero rows (the epsilon guard avoids 0/0).
    """
    if v.data.ndim not in (1, 2):
        raise DimensionError(f"l2_normalize expects 1-D or 2-D input, got {v.shape}")
    sq = mul(v, v)
    ss = sum_axis(sq, axis=v.data.ndim - 1, keepdims=True)
    norm = sqrt(ss)
    denom = clamp(norm, lo=L2_EPSILON)
    return div(v, denom)


# ---------------------------------------------------------------------------
# SGD with momentum
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Velocity buffers plus hyperparameters for momentum SGD.

    Weight decay enters as an L2 term added to the gradient before the
    momentum update (classical coupling); setting it to 0 switches it off.
    """

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocities: list[np.ndarray] | None = field(default=None)

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("optimizer hyperparameters must be nonnegative")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
             state: OptimizerState) -> tuple[Sequence[Tensor], OptimizerState]:
    """One in-place update: v <- m*v + (g + wd*p);  p <- p - lr*v."""
    if len(params) != len(grads):
        raise DimensionError(
            f"sgd_step got {len(params)} params but {len(grads)} grads")
    if state.velocities is None:
        state.velocities = [np.zeros_like(p.data) for p in params]
    if len(state.velocities) != len(params):
        raise DimensionError(
            f"optimizer state holds {len(state.velocities)} velocities "
            f"for {len(params)} params")
    for p, g, v in zip(params, grads, state.velocities):
        if g.shape != p.data.shape or v.shape != p.data.shape:
            raise DimensionError(
                f"sgd_step shape mismatch on {p.name or p.tid}: "
                f"param {p.data.shape}, grad {g.shape}, velocity {v.shape}")
        v *= state.momentum
        v += g + state.weight_decay * p.data
        p.data = p.data - state.lr * v
    return params, state


def check_finite(value: np.ndarray | float, what: str) -> None:
    if not np.all(np.isfinite(value)):
        from .errors import NumericError
        raise NumericError(f"non-finite value encountered in {what}")
