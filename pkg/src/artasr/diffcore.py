"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (if any) when at
least one input requires a gradient. Outside a tape everything runs as plain
numpy, which is what inference and evaluation use.

Broadcasting is limited to suffix broadcasting: in a binary op the smaller
operand's shape must be a trailing suffix of the larger one (scalars, bias
vectors, a ``[T, d]`` table added to ``[B, T, d]``).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# tanh-approximation GELU constants
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations executed inside the block are
    appended in execution order, which is a valid topological order.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []
        self._index: dict[int, int] = {}

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def add(self, record: _Record) -> None:
        self._index[id(record.output)] = len(self.records)
        self.records.append(record)

    def produced(self, t: Tensor) -> bool:
        i = self._index.get(id(t))
        return i is not None and self.records[i].output is t


def active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def record_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` as the output of a differentiable operation.

    ``backward`` receives the gradient w.r.t. the output and returns one
    gradient (or None) per input. Custom operations in tests go through here
    as well.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.add(_Record(tuple(inputs), out, backward))
    return out


def build_tensor(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False,
                 name: str | None = None) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape must contain positive integers, got {shape}")
    values = np.array(values, dtype=DEFAULT_DTYPE).ravel()
    n = math.prod(shape)
    if n != values.size:
        raise ValueError(f"length mismatch {n} vs {values.size}")
    return Tensor(values.reshape(shape), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE))


# ---------------------------------------------------------------------------
# elementwise and broadcasting


def _check_suffix(big: tuple, small: tuple, op: str) -> None:
    if len(small) > len(big) or big[len(big) - len(small):] != small:
        raise ValueError(f"{op}: cannot broadcast shape {small} against {big}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.ndim >= b.ndim:
        _check_suffix(a.shape, b.shape, op)
    else:
        _check_suffix(b.shape, a.shape, op)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return record_op(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record_op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return record_op(np.log(x), (a,), lambda g: (g / x,))


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return record_op(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return record_op(y, (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    y = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return record_op(np.asarray(y), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return scale(sum_(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is either a shared ``[k, n]`` matrix or a
    batch ``[..., k, n]`` with the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ValueError(f"matmul dimension mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record_op(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# normalization


def softmax_lastaxis(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax along the last axis.

    ``mask`` (broadcastable boolean, True = keep) excludes entries exactly, as
    if their logits were -inf. Every row needs at least one kept entry.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op(y, (x,), backward)


def log_softmax_lastaxis(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return record_op(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs a last axis of size >= 2")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    y = xhat * gd + bias.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return record_op(y, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss`` recorded on ``tape``.

    Leaf gradients are summed into ``leaf.grad``; the returned mapping holds
    the gradient of every named leaf reached.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    stop = tape._index[id(loss)]
    for rec in reversed(tape.records[: stop + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not tape.produced(t):
                leaves[key] = t

    named: dict[str, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if leaf.name is not None:
            named[leaf.name] = g
    return named


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes one Tensor per entry of ``inputs`` and returns a scalar.
    The error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out, tape)

    def value(vals):
        return float(f(*[Tensor(v) for v in vals]).data)

    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        flat = a.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = value(arrays)
            flat[j] = orig - h
            fm = value(arrays)
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(analytic.ravel()[j] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
