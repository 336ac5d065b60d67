"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations executed while a :class:`GradTape` is active are appended to it
together with a closure computing input gradients from the output gradient.
Replaying the tape backwards is a valid reverse topological order because an
op can only be recorded after all of its inputs exist.

Usage::

    w = DiffArray(np.ones((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = ops.sum(ops.matmul(x, w))
    grads = backward(loss, tape)
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DimensionError, GraphError, NumericError

_ids = itertools.count()
_active: list["GradTape"] = []


class DiffArray:
    """Immutable float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "DiffArray":
        # skips the defensive copy for arrays freshly produced by an op
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.node_id = next(_ids)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "DiffArray":
        return DiffArray._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "DiffArray":
        return transpose(self)


@dataclass
class _Entry:
    output: DiffArray
    inputs: tuple[DiffArray, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Append-only record of the ops executed during one forward pass."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self._outputs: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: _Entry) -> None:
        if self.consumed:
            raise GraphError("cannot record on a tape that has already been replayed")
        self.entries.append(entry)
        self._outputs.add(entry.output.node_id)

    def produced(self, x: DiffArray) -> bool:
        return x.node_id in self._outputs

    def backward(self, loss: DiffArray) -> dict[int, np.ndarray]:
        return backward(loss, self)


def active_tape() -> GradTape | None:
    return _active[-1] if _active else None


def apply(out: np.ndarray, inputs: Sequence[DiffArray], grad_fn) -> DiffArray:
    """Wrap ``out`` as the result of a differentiable op.

    ``grad_fn(g)`` must return one gradient (or None) per input, each shaped
    like that input. Nothing is recorded when no tape is active or no input
    requires a gradient.
    """
    tape = active_tape()
    needs = tape is not None and any(x.requires_grad for x in inputs)
    result = DiffArray._wrap(out, needs)
    if needs:
        tape.record(_Entry(result, tuple(inputs), grad_fn))
    return result


def backward(loss: DiffArray, tape: GradTape) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape``; returns ``{leaf node_id: grad}``.

    Leaf gradients are also accumulated into ``leaf.grad``. The tape is
    consumed and cannot be replayed again.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise GraphError("tape already consumed by an earlier backward call")
    if not tape.produced(loss):
        raise GraphError("loss was not produced on this tape (detached or foreign graph)")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaves: dict[int, DiffArray] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output.node_id, None)
        if g is None:
            continue
        for x, gx in zip(entry.inputs, entry.backward(g)):
            if gx is None or not x.requires_grad:
                continue
            prev = grads.get(x.node_id)
            grads[x.node_id] = gx if prev is None else prev + gx
            if not tape.produced(x):
                leaves[x.node_id] = x
    out = {}
    for nid, leaf in leaves.items():
        g = grads[nid]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[nid] = g
    tape.entries.clear()
    return out


def _lift(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray._wrap(np.asarray(x, dtype=np.float64), False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise ------------------------------------------------------------

def add(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    return apply(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    return apply(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    return apply(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return apply(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def square(x: DiffArray) -> DiffArray:
    return apply(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x: DiffArray) -> DiffArray:
    out = np.exp(x.data)
    return apply(out, (x,), lambda g: (g * out,))


def log(x: DiffArray) -> DiffArray:
    return apply(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: DiffArray) -> DiffArray:
    s = _sigmoid(x.data)
    return apply(s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: DiffArray) -> DiffArray:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    return apply(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def glu(x: DiffArray) -> DiffArray:
    """First half of the last axis gated by the sigmoid of the second half."""
    n = x.shape[-1]
    if n % 2:
        raise DimensionError(f"glu needs an even last extent, got shape {x.shape}")
    h = n // 2
    a, b = x.data[..., :h], x.data[..., h:]
    s = _sigmoid(b)

    def grad(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return apply(a * s, (x,), grad)


def dropout(x: DiffArray, rate: float, rng: np.random.Generator | None, training: bool) -> DiffArray:
    """Inverted dropout; identity when not training, rate is 0 or no rng is given."""
    if not training or rate <= 0.0 or rng is None:
        return x
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return apply(x.data * mask, (x,), lambda g: (g * mask,))


# --- shape ------------------------------------------------------------------

def reshape(x: DiffArray, shape) -> DiffArray:
    return apply(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: DiffArray, axes=None) -> DiffArray:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return apply(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def index(x: DiffArray, key) -> DiffArray:
    """``x[key]`` for basic or advanced numpy indexing."""
    out = x.data[key]
    basic = _basic_key(key)

    def grad(g):
        gx = np.zeros(x.shape)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return apply(out, (x,), grad)


def concat(xs: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    xs = [_lift(x) for x in xs]
    ax = axis % xs[0].ndim
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return apply(np.concatenate([x.data for x in xs], axis=ax), xs,
                 lambda g: np.split(g, splits, axis=ax))


# --- reductions -------------------------------------------------------------

def sum(x: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply(out, (x,), grad)


def mean(x: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --- linear algebra -----------------------------------------------------------

def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return apply(out, (a, b), grad)


def linear(x: DiffArray, weight: DiffArray, bias: DiffArray | None = None) -> DiffArray:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --- normalisation ------------------------------------------------------------

def softmax_lastdim(x: DiffArray, scale: float = 1.0) -> DiffArray:
    """softmax(x / scale) along the last axis, max-subtracted."""
    if scale <= 0:
        raise ConfigError(f"softmax scale must be positive, got {scale}")
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    z = x.data / scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return ((y * (g - (g * y).sum(axis=-1, keepdims=True))) / scale,)

    return apply(y, (x,), grad)


def log_softmax_lastdim(x: DiffArray) -> DiffArray:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax input contains non-finite values")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return apply(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: DiffArray, gain: DiffArray, bias: DiffArray, eps: float = 1e-5) -> DiffArray:
    n = x.shape[-1]
    if n == 0:
        raise DimensionError("layer_norm over a zero-length last axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm gain/bias {gain.shape}/{bias.shape} vs last extent {n}")
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply(out, (x, gain, bias), grad)


def time_norm(x: DiffArray, gain: DiffArray, bias: DiffArray, eps: float = 1e-5) -> DiffArray:
    """Per-channel standardisation over the time axis of a T x C map.

    This is batch normalisation with the frames of one sequence as the batch.
    """
    xt = transpose(x)
    return transpose(layer_norm(xt, DiffArray(np.ones(x.shape[0])), DiffArray(np.zeros(x.shape[0])), eps)) \
        * gain + bias


# --- temporal convolutions --------------------------------------------------

def depthwise_conv1d(x: DiffArray, kernel: DiffArray, bias: DiffArray | None = None) -> DiffArray:
    """Per-channel cross-correlation of a T x C map, zero 'same' padding."""
    K, C = kernel.shape
    if K % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {K}")
    if x.ndim != 2 or x.shape[1] != C:
        raise DimensionError(f"depthwise_conv1d channels disagree: x {x.shape}, kernel {kernel.shape}")
    T = x.shape[0]
    p = K // 2
    xp = np.pad(x.data, ((p, p), (0, 0)))
    win = sliding_window_view(xp, K, axis=0)  # T x C x K
    out = np.einsum("tck,kc->tc", win, kernel.data)
    if bias is not None:
        out = out + bias.data

    def grad(g):
        gk = np.einsum("tck,tc->kc", win, g)
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[k:k + T] += g * kernel.data[k]
        gb = g.sum(axis=0) if bias is not None else None
        return (gxp[p:p + T], gk) + ((gb,) if bias is not None else ())

    inputs = (x, kernel) + ((bias,) if bias is not None else ())
    return apply(out, inputs, grad)


def conv1d(x: DiffArray, weight: DiffArray, bias: DiffArray | None = None, stride: int = 1,
           padding: str = "zeros") -> DiffArray:
    """Dense temporal convolution: x (T x Cin), weight (K x Cin x Cout).

    Pads K//2 frames on both sides, with zeros or (``padding="edge"``) copies of
    the boundary frames; output length is ceil(T / stride).
    """
    K, cin, cout = weight.shape
    if K % 2 == 0:
        raise ConfigError(f"conv kernel size must be odd, got {K}")
    if x.ndim != 2 or x.shape[1] != cin:
        raise DimensionError(f"conv1d channels disagree: x {x.shape}, weight {weight.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding not in ("zeros", "edge"):
        raise ConfigError(f"unknown padding {padding!r}")
    T = x.shape[0]
    p = K // 2
    xp = np.pad(x.data, ((p, p), (0, 0)), mode="constant" if padding == "zeros" else "edge")
    cols = sliding_window_view(xp, K, axis=0)[::stride]  # To x Cin x K
    t_out = cols.shape[0]
    wmat = np.transpose(weight.data, (1, 0, 2)).reshape(cin * K, cout)
    flat = cols.reshape(t_out, cin * K)
    out = flat @ wmat
    if bias is not None:
        out = out + bias.data

    def grad(g):
        gw = np.transpose((flat.T @ g).reshape(cin, K, cout), (1, 0, 2))
        gcols = (g @ wmat.T).reshape(t_out, cin, K)
        gxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for k in range(K):
            gxp[k:k + span:stride] += gcols[:, :, k]
        gx = gxp[p:p + T].copy()
        if padding == "edge" and p:
            gx[0] += gxp[:p].sum(axis=0)
            gx[-1] += gxp[p + T:].sum(axis=0)
        res = (gx, gw)
        return res + ((g.sum(axis=0),) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return apply(out, inputs, grad)


def avg_pool1d(x: DiffArray, stride: int) -> DiffArray:
    """Non-overlapping temporal mean pooling; a ragged final window averages what it has."""
    T = x.shape[0]
    if stride == 1:
        return x
    t_out = -(-T // stride)
    counts = np.minimum(stride, T - stride * np.arange(t_out)).astype(np.float64)
    pad = t_out * stride - T
    xp = np.pad(x.data, ((0, pad),) + ((0, 0),) * (x.ndim - 1))
    summed = xp.reshape((t_out, stride) + x.shape[1:]).sum(axis=1)
    cshape = (t_out,) + (1,) * (x.ndim - 1)
    out = summed / counts.reshape(cshape)

    def grad(g):
        gs = g / counts.reshape(cshape)
        return (np.repeat(gs, stride, axis=0)[:T],)

    return apply(out, (x,), grad)


# --- gradient oracle ----------------------------------------------------------

def finite_difference_gradient(f: Callable[[DiffArray], DiffArray | float], x: DiffArray,
                               step: float = 1e-4) -> np.ndarray:
    """Central-difference estimate of d f / d x, one coordinate at a time."""
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr):
        v = f(DiffArray(arr))
        return v.item() if isinstance(v, DiffArray) else float(v)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = value(base)
        flat[i] = orig - step
        lo = value(base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """||a - b|| / max(||a||, ||b||, floor).

    The floor keeps gradients that vanish analytically (where the numeric
    estimate is pure round-off) from reading as 100% error.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)
