"""Dense tensors and a minimal reverse-mode tape.

The op set is closed over exactly what the model needs: matmul, elementwise
arithmetic, relu, row softmax, rms_norm, reductions, reshape/transpose and
embedding lookup. Tensors are immutable values; parameters are rebound (never
mutated) by the optimizer between tapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Tensor", "Parameter", "GradTape", "ShapeError", "ContractError",
    "InputError", "ConfigError", "NumericError", "backward",
    "set_debug_checks", "matmul", "add", "sub", "mul", "div", "relu",
    "softmax_rows", "rms_norm", "tsum", "tmean", "transpose", "reshape",
    "embed", "mse", "numerical_grad",
]

RMS_NORM_EPS = 1e-6

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class InputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


_debug = threading.local()


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output (off by default)."""
    _debug.enabled = bool(enabled)


def _debug_enabled() -> bool:
    return getattr(_debug, "enabled", False)


class Tensor:
    """Immutable dense array, float32 or float64."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        if _debug_enabled() and not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Named trainable tensor. The optimizer rebinds .data between tapes."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name

    def assign(self, data: np.ndarray) -> None:
        arr = np.asarray(data, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != {self.data.shape}")
        self.data = arr

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


_tape_stack = threading.local()


def _active_tape():
    stack = getattr(_tape_stack, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records primitives applied under it; exclusive to one forward/backward."""

    def __init__(self):
        self._records: list[tuple] = []
        self._used = False

    def __enter__(self):
        if self._used:
            raise ContractError("a GradTape cannot be reused")
        self._used = True
        stack = getattr(_tape_stack, "stack", None)
        if stack is None:
            stack = []
            _tape_stack.stack = stack
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.stack.pop()
        return False

    def _record(self, out: Tensor, inputs: tuple, bwd: Callable, ctx) -> None:
        self._records.append((out, inputs, bwd, ctx))

    @property
    def n_ops(self) -> int:
        return len(self._records)


def backward(tape: GradTape, loss: Tensor, params: Iterable[Parameter]) -> dict:
    """Replay the tape in reverse; returns {parameter: gradient Tensor}.

    Parameters that never entered the tape get zero gradients.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, bwd, ctx in reversed(tape._records):
        g = adj.get(id(out))
        if g is None:
            continue
        grads = bwd(g, ctx)
        for inp, gi in zip(inputs, grads):
            if gi is None or not isinstance(inp, Tensor):
                continue
            k = id(inp)
            if k in adj:
                adj[k] = adj[k] + gi
            else:
                adj[k] = gi
    out = {}
    for p in params:
        g = adj.get(id(p))
        out[p] = Tensor(g if g is not None else np.zeros_like(p.data))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _emit(out_data: np.ndarray, inputs: tuple, bwd: Callable, ctx=None) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, bwd, ctx)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {ad.shape} x {bd.shape}")

    def bwd(g, ctx):
        ad, bd = ctx
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), bwd, (ad, bd))


def _binary(a, b, fwd, bwd):
    ad, bd = _as_array(a), _as_array(b)
    try:
        out = fwd(ad, bd)
    except ValueError as e:
        raise ShapeError(f"shape mismatch {ad.shape} vs {bd.shape}") from e
    return _emit(out, (a, b), bwd, (ad, bd))


def add(a, b) -> Tensor:
    def bwd(g, ctx):
        ad, bd = ctx
        return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)
    return _binary(a, b, lambda x, y: x + y, bwd)


def sub(a, b) -> Tensor:
    def bwd(g, ctx):
        ad, bd = ctx
        return _unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)
    return _binary(a, b, lambda x, y: x - y, bwd)


def mul(a, b) -> Tensor:
    def bwd(g, ctx):
        ad, bd = ctx
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)
    return _binary(a, b, lambda x, y: x * y, bwd)


def div(a, b) -> Tensor:
    def bwd(g, ctx):
        ad, bd = ctx
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))
    return _binary(a, b, lambda x, y: x / y, bwd)


def relu(x: Tensor) -> Tensor:
    xd = _as_array(x)

    def bwd(g, ctx):
        return (g * (ctx > 0),)

    return _emit(np.maximum(xd, 0), (x,), bwd, xd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    xd = _as_array(x)
    if xd.shape[-1] == 0:
        raise ShapeError("softmax over empty axis")
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, ctx):
        dot = (g * ctx).sum(axis=-1, keepdims=True)
        return (ctx * (g - dot),)

    return _emit(y, (x,), bwd, y)


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain, over the last axis."""
    xd, gd = _as_array(x), _as_array(gain)
    d = xd.shape[-1]
    if d == 0:
        raise ShapeError("rms_norm over empty axis")
    if gd.shape[-1] != d:
        raise ShapeError(f"gain length {gd.shape} != last dim {d}")
    ms = np.mean(xd * xd, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + np.asarray(RMS_NORM_EPS, dtype=xd.dtype))
    y = xd * r * gd

    def bwd(g, ctx):
        xd, gd, r, d = ctx
        w = g * gd
        gx = w * r - xd * (r ** 3 / d) * (w * xd).sum(axis=-1, keepdims=True)
        ggain = _unbroadcast(g * xd * r, gd.shape)
        return gx, ggain

    return _emit(y, (x, gain), bwd, (xd, gd, r, d))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    xd = _as_array(x)

    def bwd(g, ctx):
        shape, axis, keepdims = ctx
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(xd.sum(axis=axis, keepdims=keepdims), (x,), bwd,
                 (xd.shape, axis, keepdims))


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    xd = _as_array(x)
    n = xd.size if axis is None else np.prod([xd.shape[a] for a in np.atleast_1d(axis)])

    def bwd(g, ctx):
        shape, axis, keepdims, n = ctx
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return _emit(xd.mean(axis=axis, keepdims=keepdims), (x,), bwd,
                 (xd.shape, axis, keepdims, n))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    xd = _as_array(x)
    if xd.ndim < 2:
        raise ShapeError(f"transpose needs ndim >= 2, got {xd.shape}")

    def bwd(g, ctx):
        return (np.swapaxes(g, -1, -2),)

    return _emit(np.swapaxes(xd, -1, -2).copy(), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    xd = _as_array(x)

    def bwd(g, ctx):
        return (g.reshape(ctx),)

    return _emit(xd.reshape(shape), (x,), bwd, xd.shape)


def embed(table: Tensor, indices) -> Tensor:
    """Row lookup. `indices` is an integer array, not differentiated."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("embedding indices must be integers")
    td = _as_array(table)
    if idx.size and (idx.min() < 0 or idx.max() >= td.shape[0]):
        raise ContractError(
            f"index out of range [0, {td.shape[0]}): {int(idx.min())}..{int(idx.max())}")

    def bwd(g, ctx):
        td, idx = ctx
        gt = np.zeros_like(td)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit(td[idx], (table,), bwd, (td, idx))


def mse(pred: Tensor, target) -> Tensor:
    pd, td = _as_array(pred), _as_array(target)
    if pd.shape != td.shape:
        raise ShapeError(f"mse shapes differ: {pd.shape} vs {td.shape}")
    diff = pd - td

    def bwd(g, ctx):
        diff = ctx
        gd = g * 2.0 * diff / diff.size
        return gd, -gd

    return _emit(np.asarray((diff * diff).mean(), dtype=pd.dtype),
                 (pred, target), bwd, diff)


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                   h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
