"""Minimal reverse-mode differentiation over numpy arrays.

Primitives run eagerly. When a :class:`Tape` is active, every primitive whose
inputs require gradients appends one entry to it; :func:`backward` walks the
tape in reverse. Only the operations the LUT-network trainer needs exist here:
there is no general broadcasting, and most ops accept either a plain
``[batch, features]`` layout or a unit-stacked ``[units, batch, features]``
layout so that thousands of tiny sub-networks run as one batched matmul.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AutodiffError, ShapeError, TrainingError

DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable leaf. ``grad`` always exists and matches ``data`` in shape."""

    __slots__ = ("requires_decay",)

    def __init__(self, data, requires_decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.requires_decay = requires_decay

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of the primitives executed while the tape is active.

    Entries are appended in execution order, so every entry's inputs were
    produced by earlier entries (or are leaves).
    """

    ops: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.ops)

    def op_names(self) -> list[str]:
        return [op.name for op in self.ops]


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``out_data`` as a Tensor and log it on the active tape.

    ``backward_fn`` receives the gradient w.r.t. the output and returns one
    gradient (or None) per input, in order. Other modules use this to define
    their own primitives (e.g. fake quantization).
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    out.is_leaf = False
    tape = active_tape()
    if requires and tape is not None:
        tape.ops.append(_Op(name, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = gi.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- primitives

def affine(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y[..., r, o] = sum_i W[..., o, i] * x[..., r, i] + b[..., o].

    Accepts ``x[B, in], W[out, in], b[out]`` or the unit-stacked form
    ``x[G, B, in], W[G, out, in], b[G, out]``.
    """
    xd, Wd = x.data, W.data
    if xd.ndim not in (2, 3) or Wd.ndim != xd.ndim:
        raise ShapeError(f"affine: incompatible ranks x{xd.shape} W{Wd.shape}")
    if xd.shape[-1] != Wd.shape[-1] or (xd.ndim == 3 and xd.shape[0] != Wd.shape[0]):
        raise ShapeError(f"affine: inner dimensions disagree x{xd.shape} W{Wd.shape}")
    if b is not None and b.shape != Wd.shape[:-1]:
        raise ShapeError(f"affine: bias shape {b.shape} != {Wd.shape[:-1]}")
    y = xd @ _swap(Wd)
    if b is not None:
        y = y + b.data[..., None, :]
    inputs = (x, W) if b is None else (x, W, b)

    def back(g):
        gx = g @ Wd if x.requires_grad else None
        gW = _swap(g) @ xd if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=-2)

    return record_op("affine", inputs, y, back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible to the loss check
    return record_op("relu", (x,), np.maximum(x.data, x.data.dtype.type(0)), lambda g: (g * mask,))


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    return record_op("add", (x, y), x.data + y.data, lambda g: (g, g))


def scale_shift(x: Tensor, a: float, c: float = 0.0) -> Tensor:
    """a * x + c with constant a, c."""
    dt = x.data.dtype
    return record_op("scale_shift", (x,), (x.data * dt.type(a) + dt.type(c)).astype(dt),
                     lambda g: (g * dt.type(a),))


def sum_all(x: Tensor) -> Tensor:
    return record_op("sum", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype),
                     lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return record_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return record_op("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                     lambda g: (g.transpose(inv),))


def gather_columns(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[:, index[u, f]]`` into a unit-stacked ``[U, B, F]`` tensor."""
    index = np.asarray(index)
    if x.ndim != 2 or index.ndim != 2:
        raise ShapeError(f"gather_columns: x{x.shape} index{index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ShapeError(f"gather_columns: index out of range for width {x.shape[1]}")
    B = x.shape[0]
    out = np.ascontiguousarray(x.data[:, index].transpose(1, 0, 2))

    def back(g):
        if not x.requires_grad:
            return (None,)
        gx_t = np.zeros((x.shape[1], B), dtype=g.dtype)
        np.add.at(gx_t, index.ravel(), g.transpose(0, 2, 1).reshape(-1, B))
        return (gx_t.T,)

    return record_op("gather", (x,), out, back)


@dataclass
class BatchNormState:
    """Learnable gain/shift plus running statistics for one batch-norm site."""

    gain: Parameter
    shift: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, shape: tuple, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(Parameter(np.ones(shape), requires_decay=False),
                   Parameter(np.zeros(shape), requires_decay=False),
                   np.zeros(shape, dtype=DTYPE), np.ones(shape, dtype=DTYPE), eps, momentum)


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalize over the batch axis (second to last) per channel (last axis)."""
    xd = x.data
    gain, shift = state.gain.data[..., None, :], state.shift.data[..., None, :]
    if xd.shape[:-2] + xd.shape[-1:] != state.gain.shape:
        raise ShapeError(f"batch_norm: x{xd.shape} vs state{state.gain.shape}")
    if mode == "eval":
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(xd.dtype)[..., None, :]
        xhat = (xd - state.running_mean[..., None, :]) * inv
        y = xhat * gain + shift

        def back_eval(g):
            return g * gain * inv, (g * xhat).sum(axis=-2), g.sum(axis=-2)

        return record_op("batch_norm_eval", (x, state.gain, state.shift), y, back_eval)
    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    n = xd.shape[-2]
    if n < 2:
        raise TrainingError("batch_norm in train mode needs a batch of at least 2")
    mean = xd.mean(axis=-2, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(state.eps))
    xhat = centered * inv
    y = xhat * gain + shift
    m = state.momentum
    state.running_mean = ((1 - m) * state.running_mean + m * mean[..., 0, :]).astype(DTYPE)
    state.running_var = ((1 - m) * state.running_var + m * var[..., 0, :] * n / (n - 1)).astype(DTYPE)

    def back(g):
        gxhat = g * gain
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-2, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-2, keepdims=True))
        return gx, (g * xhat).sum(axis=-2), g.sum(axis=-2)

    return record_op("batch_norm", (x, state.gain, state.shift), y, back)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax likelihood of the integer labels."""
    z = logits.data
    labels = np.asarray(labels)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits{z.shape} labels{labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError(f"cross_entropy: labels must lie in [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    loss = (np.log(s[:, 0]) - shifted[rows, labels]).mean()

    def back(g):
        p = e / s
        p[rows, labels] -= 1
        return (p * (g / z.shape[0]),)

    return record_op("cross_entropy", (logits,), np.asarray(loss, dtype=z.dtype), back)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of a ``[B]`` logit vector against 0/1 labels."""
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype)
    if z.shape != y.shape or z.ndim != 1:
        raise ShapeError(f"bce_with_logits: logits{z.shape} labels{y.shape}")
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()

    def back(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return ((sig - y) * (g / z.size)).astype(z.dtype),

    return record_op("bce", (logits,), np.asarray(loss, dtype=z.dtype), back)


def group_l2_sum(W: Tensor, axis) -> Tensor:
    """Sum over groups of the L2 norm taken along ``axis`` (group-lasso term)."""
    norms = np.sqrt((W.data * W.data).sum(axis=axis, keepdims=True))

    def back(g):
        safe = np.where(norms > 0, norms, 1)
        return (np.where(norms > 0, W.data / safe, 0) * g).astype(W.data.dtype),

    return record_op("group_l2", (W,), np.asarray(norms.sum(), dtype=W.data.dtype), back)
