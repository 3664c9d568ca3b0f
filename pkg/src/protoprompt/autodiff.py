"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. While a :class:`Tape` is active, every
kernel whose inputs are tracked appends a record (output, inputs, backward
closure) to the tape in execution order; ``Tape.backward`` replays those
records strictly in reverse and accumulates gradients for tracked tensors
only. Without an active tape all kernels are plain forward evaluation.

No broadcasting tricks beyond what the encoders need, no fusion, no views:
desk scale, correctness over speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "GradCheckReport",
    "check_gradients",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "gelu",
    "softmax",
    "pairwise_sqdist",
    "reduce_min",
    "mean",
    "reduce_sum",
    "concat",
    "narrow",
    "reshape",
    "transpose",
    "tile0",
    "repeat0",
    "layer_norm",
    "l2_normalize",
    "clamp",
]

# Finite-output invariant is enforced after every kernel; tests may disable
# it to exercise error paths deliberately.
CHECK_FINITE = True

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Dense float64 tensor, row-major, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars are allowed on the right for * and +
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """Named learnable tensor; the name is unique within a model and the
    shape is immutable after creation."""

    def __init__(self, name: str, data, weight_decay: bool = True):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.weight_decay = weight_decay

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return self.tensor.size

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.tensor.shape:
            raise ContractError(
                f"parameter {self.name!r} shape is immutable: "
                f"{self.tensor.shape} -> {values.shape}"
            )
        self.tensor.data = np.ascontiguousarray(values)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class Tape:
    """Wengert list of executed kernels, owned by a single computation.

    Use as a context manager around the forward pass, then call
    :meth:`backward` on the scalar root. Gradients for tensors with
    ``requires_grad`` accumulate additively across repeated calls.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(root)/d(tensor) for every tracked tensor reachable
        from ``root`` and return the gradient map of this call."""
        if root.data.size != 1:
            raise ContractError(
                f"backward root must be scalar-shaped, got {root.shape}"
            )
        grads: dict[Tensor, np.ndarray] = {}
        if root.requires_grad:
            grads[root] = np.ones_like(root.data)
        for out, inputs, backward_fn in reversed(self._records):
            g = grads.get(out)
            if g is None:
                continue
            for t, contrib in zip(inputs, backward_fn(g)):
                if contrib is None or not t.requires_grad:
                    continue
                if t in grads:
                    grads[t] = grads[t] + contrib
                else:
                    grads[t] = contrib
        for t, g in grads.items():
            t.grad = g if t.grad is None else t.grad + g
        return grads


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
            backward_fn: Callable) -> Tensor:
    # sum is NaN/inf iff the array holds a non-finite entry; cheaper than
    # a full isfinite scan on every kernel output
    if CHECK_FINITE and not math.isfinite(float(np.sum(out_data))):
        raise NumericError(f"kernel {name!r} produced non-finite values")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul: needs >=2-d operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, _swap_last(bd)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(_swap_last(ad), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish("matmul", out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} + {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _finish("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {a.shape} - {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _finish("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} * {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish("mul", out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def backward(g):
        return (g * s if a.requires_grad else None,)

    return _finish("scale", out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out if a.requires_grad else None,)

    return _finish("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data

    def backward(g):
        return (g / ad if a.requires_grad else None,)

    return _finish("log", out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out) if a.requires_grad else None,)

    return _finish("sigmoid", out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out) if a.requires_grad else None,)

    return _finish("tanh", out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner),)

    return _finish("gelu", out, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Row softmax along the last axis, computed with max-subtraction."""
    x = a.data
    if x.ndim < 1:
        raise DimensionError(f"softmax: needs >=1-d input, got {a.shape}")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _finish("softmax", out, (a,), backward)


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between row sets: out[i, j] = ||a_i - b_j||^2."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(
            f"pairwise_sqdist: needs (K,d) and (N,d), got {a.shape}, {b.shape}"
        )
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.sum(diff * diff, axis=-1)

    def backward(g):
        ga = 2.0 * np.sum(diff * g[:, :, None], axis=1) if a.requires_grad else None
        gb = -2.0 * np.sum(diff * g[:, :, None], axis=0) if b.requires_grad else None
        return ga, gb

    return _finish("pairwise_sqdist", out, (a, b), backward)


def reduce_min(a: Tensor, axis: int) -> Tensor:
    """Min along ``axis``; the gradient routes only to the argmin element,
    ties broken by lowest index."""
    x = a.data
    if not (-x.ndim <= axis < x.ndim):
        raise DimensionError(f"reduce_min: axis {axis} out of range for {a.shape}")
    axis = axis % x.ndim
    idx = np.argmin(x, axis=axis)
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        gx = np.zeros_like(x)
        np.put_along_axis(
            gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return (gx,)

    return _finish("reduce_min", out, (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    x = a.data
    if axis is None:
        out = np.asarray(x.mean())
        count = x.size
    else:
        out = x.mean(axis=axis)
        count = x.shape[axis]

    def backward(g):
        if not a.requires_grad:
            return (None,)
        if axis is None:
            return (np.full_like(x, 1.0 / count) * g,)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / count,)

    return _finish("mean", out, (a,), backward)


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    x = a.data
    out = np.asarray(x.sum()) if axis is None else x.sum(axis=axis)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        if axis is None:
            return (np.full_like(x, 1.0) * g,)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _finish("reduce_sum", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty input list")
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(
            p if t.requires_grad else None for p, t in zip(pieces, tensors)
        )

    return _finish("concat", out, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    x = a.data
    if not (0 <= start and start + length <= x.shape[axis]):
        raise DimensionError(
            f"narrow: [{start}:{start + length}) out of range on axis {axis} of {a.shape}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    out = x[tuple(sl)].copy()

    def backward(g):
        if not a.requires_grad:
            return (None,)
        gx = np.zeros_like(x)
        gx[tuple(sl)] = g
        return (gx,)

    return _finish("narrow", out, (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: {a.shape} -> {shape} changes element count")
    out = a.data.reshape(shape)
    old_shape = a.data.shape

    def backward(g):
        return (g.reshape(old_shape) if a.requires_grad else None,)

    return _finish("reshape", out, (a,), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse) if a.requires_grad else None,)

    return _finish("transpose", out, (a,), backward)


def tile0(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of extent ``n``."""
    out = np.broadcast_to(a.data, (n,) + a.data.shape).copy()

    def backward(g):
        return (g.sum(axis=0) if a.requires_grad else None,)

    return _finish("tile0", out, (a,), backward)


def repeat0(a: Tensor, n: int) -> Tensor:
    """Repeat each leading-axis slice ``n`` times in place:
    out[i*n + j] = a[i]."""
    if a.data.ndim < 1:
        raise DimensionError(f"repeat0: needs >=1-d input, got {a.shape}")
    out = np.repeat(a.data, n, axis=0)
    k = a.data.shape[0]
    rest = a.data.shape[1:]

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (g.reshape((k, n) + rest).sum(axis=1),)

    return _finish("repeat0", out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply elementwise gain and bias."""
    x = a.data
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis of {a.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        ga = None
        if a.requires_grad:
            gxhat = g * gain.data
            ga = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        reduce_axes = tuple(range(x.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes) if gain.requires_grad else None
        gbias = g.sum(axis=reduce_axes) if bias.requires_grad else None
        return ga, ggain, gbias

    return _finish("layer_norm", out, (a, gain, bias), backward)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x / safe

    def backward(g):
        if not a.requires_grad:
            return (None,)
        dot = np.sum(g * x, axis=-1, keepdims=True)
        return (g / safe - x * dot / safe**3,)

    return _finish("l2_normalize", out, (a,), backward)


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip values into [lo, hi]; gradient passes through unclipped entries."""
    x = a.data
    out = np.clip(x, lo, hi)
    mask = np.ones_like(x)
    if lo is not None:
        mask = mask * (x >= lo)
    if hi is not None:
        mask = mask * (x <= hi)

    def backward(g):
        return (g * mask if a.requires_grad else None,)

    return _finish("clamp", out, (a,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    entries: int
    worst: str = ""
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn()`` against central
    finite differences over every entry of ``params``.

    Relative error per entry is |a - n| / max(|a|, |n|, 1); the report
    carries the maximum over all entries. ``fn`` must be deterministic.
    """
    if eps <= 0:
        raise ContractError("check_gradients: eps must be positive")
    with Tape() as tape:
        loss = fn()
        grads = tape.backward(loss)

    report = GradCheckReport(max_rel_err=0.0, tol=tol, entries=0)
    for p in params:
        analytic = grads.get(p.tensor)
        if analytic is None:
            analytic = np.zeros_like(p.tensor.data)
        flat = p.tensor.data.reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + eps
                f_plus = fn().item()
                flat[i] = orig - eps
                f_minus = fn().item()
            except NumericError as err:
                raise NumericError(
                    f"check_gradients: non-finite loss at perturbed entry "
                    f"{p.name}[{i}]: {err}"
                ) from err
            finally:
                flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(
                    f"check_gradients: non-finite loss at perturbed entry "
                    f"{p.name}[{i}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            report.entries += 1
            if rel > worst_here:
                worst_here = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = f"{p.name}[{i}]"
        report.per_param[p.name] = worst_here
    return report
