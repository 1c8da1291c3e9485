"""Reverse-mode differentiation over numpy arrays with an explicit tape.

Tensors are thin wrappers around float64 arrays.  While a `Tape` is
active, every operation whose inputs require gradients appends one entry
(output, inputs, backward rule) in execution order, so the tape is
already topologically sorted; `backward` walks it once in reverse.
Without an active tape the same functions compute values only, which is
how inference runs.

Shape conventions: parameters and activations are 1-D or 2-D; 2-D
tensors carry batch rows.  The only broadcast supported is adding a 1-D
bias to each row of a 2-D tensor — nothing else in the model needs one.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError
from .rng import SplitMix64

_ids = itertools.count()
_tls = threading.local()

# Verification hook: scales the tanh backward rule so the gradient
# checker can prove it detects a wrong derivative.  1.0 in normal use.
_tanh_backward_scale = 1.0


def _active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of executed operations for one forward pass."""

    def __init__(self):
        self._entries = []

    def __enter__(self):
        self._prev = _active_tape()
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = self._prev
        return False

    def __len__(self):
        return len(self._entries)

    @property
    def entries(self):
        return self._entries


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "tape", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.node_id = next(_ids)
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def _accumulate(self, g):
        self.grad = g.copy() if self.grad is None else self.grad + g

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars on either side are plain Python numbers.
    def __add__(self, other):
        return add_scalar(self, other) if isinstance(other, (int, float)) else add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -other)
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tensor_sum(self)


def _emit(values, inputs, backward_fn) -> Tensor:
    out = Tensor(values)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.grad = None  # allocated on first accumulation
        out.tape = tape
        tape._entries.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad of every gradient-requiring
    tensor reachable from `loss`.  Repeated calls accumulate additively."""
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("loss was not produced by an operation recorded on a tape")
    pending: dict[int, list] = {loss.node_id: [loss, np.ones_like(loss.values)]}
    for out, inputs, back_fn in reversed(tape._entries):
        item = pending.pop(out.node_id, None)
        if item is None:
            continue
        g = item[1]
        out._accumulate(g)
        for tensor, gi in zip(inputs, back_fn(g)):
            if gi is None or not tensor.requires_grad:
                continue
            slot = pending.get(tensor.node_id)
            if slot is None:
                pending[tensor.node_id] = [tensor, gi]
            else:
                slot[1] = slot[1] + gi
    for tensor, g in pending.values():
        tensor._accumulate(g)


# ---------------------------------------------------------------------------
# operations


def add(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        return _emit(av + bv, (a, b), lambda g: (g, g))
    if av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        return _emit(av + bv, (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add: incompatible shapes {av.shape} and {bv.shape}")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit(a.values + c, (a,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape != b.values.shape:
        raise DimensionError(f"mul: incompatible shapes {a.values.shape} and {b.values.shape}")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.values * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out) * _tanh_backward_scale,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _emit(a.values * mask, (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {av.shape} vs {bv.shape}")
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis; all other dimensions must agree."""
    if not parts:
        raise ContractError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    lead = parts[0].values.shape[:-1]
    for p in parts[1:]:
        if p.values.shape[:-1] != lead:
            raise DimensionError(
                f"concat: leading dimensions disagree, {parts[0].values.shape} vs {p.values.shape}"
            )
    widths = [p.values.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    return _emit(np.concatenate([p.values for p in parts], axis=-1), tuple(parts), back)


def stack_rows(parts: list[Tensor]) -> Tensor:
    """Stack 2-D tensors vertically (equal column counts)."""
    if not parts:
        raise ContractError("stack_rows needs at least one part")
    if len(parts) == 1:
        return parts[0]
    cols = parts[0].values.shape[-1]
    for p in parts:
        if p.values.ndim != 2 or p.values.shape[-1] != cols:
            raise DimensionError(f"stack_rows: expected 2-D with {cols} columns, got {p.values.shape}")
    counts = [p.values.shape[0] for p in parts]
    offsets = np.cumsum([0] + counts)

    def back(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(counts)))

    return _emit(np.concatenate([p.values for p in parts], axis=0), tuple(parts), back)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate ids accumulate on backward."""
    idx = np.asarray(ids, dtype=np.int64)
    tv = table.values
    if tv.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D source, got shape {tv.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise ContractError(f"take_rows: id out of range 0..{tv.shape[0] - 1}: {int(idx.max())}")

    def back(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit(tv[idx], (table,), back)


def pick(x: Tensor, ids) -> Tensor:
    """Select one column per row of a 2-D tensor: out[b] = x[b, ids[b]]."""
    idx = np.asarray(ids, dtype=np.int64)
    xv = x.values
    if xv.ndim != 2 or idx.shape != (xv.shape[0],):
        raise ContractError(f"pick: need one id per row, got ids {idx.shape} for {xv.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= xv.shape[1]):
        raise ContractError(f"pick: column id out of range 0..{xv.shape[1] - 1}: {int(idx.max())}")
    rows = np.arange(xv.shape[0])

    def back(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _emit(xv[rows, idx], (x,), back)


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Broadcast a 1-D tensor to n identical rows."""
    if v.values.ndim != 1:
        raise DimensionError(f"tile_rows needs a 1-D tensor, got shape {v.values.shape}")
    return _emit(np.tile(v.values, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def tensor_sum(a: Tensor) -> Tensor:
    av = a.values
    return _emit(np.asarray(av.sum()), (a,), lambda g: (np.broadcast_to(g, av.shape),))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax along the last axis, max-shifted for stability."""
    xv = x.values
    if xv.shape[-1] < 1:
        raise DimensionError("log_softmax needs at least one entry per row")
    if not np.all(np.isfinite(xv)):
        raise NumericError("log_softmax: input contains NaN or infinity")
    shifted = xv - xv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise the last axis (population variance), then scale and shift."""
    xv = x.values
    n = xv.shape[-1]
    if n < 2:
        raise DimensionError(f"layer_norm needs >= 2 features, got {n}")
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    if gain.values.shape != (n,) or bias.values.shape != (n,):
        raise DimensionError(
            f"layer_norm: gain/bias must have shape ({n},), got {gain.values.shape} and {bias.values.shape}"
        )
    mu = xv.mean(axis=-1, keepdims=True)
    centred = xv - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    gv = gain.values

    def back(g):
        dgain = (g * xhat).sum(axis=0) if g.ndim == 2 else g * xhat
        dbias = g.sum(axis=0) if g.ndim == 2 else g
        dxhat = g * gv
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, np.asarray(dgain), np.asarray(dbias))

    return _emit(xhat * gv + bias.values, (x, gain, bias), back)


def dropout(x: Tensor, p: float, training: bool, rng: SplitMix64 | None) -> Tensor:
    """Inverted dropout: zero with probability p and rescale survivors by
    1/(1-p) in training mode; identity in evaluation mode."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a generator")
    keep = (rng.floats(x.values.size) >= p).reshape(x.values.shape)
    factor = keep / (1.0 - p)
    return _emit(x.values * factor, (x,), lambda g: (g * factor,))


@contextmanager
def corrupt_tanh_backward(factor: float = 1.01):
    """Deliberately mis-scale the tanh derivative. Only for proving the
    finite-difference checker catches a broken backward rule."""
    global _tanh_backward_scale
    _tanh_backward_scale = factor
    try:
        yield
    finally:
        _tanh_backward_scale = 1.0


# ---------------------------------------------------------------------------
# finite differences


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.values
    return float(np.asarray(value))


def numeric_gradient(f, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. tensor's entries."""
    flat = tensor.values.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = _scalar(f())
        flat[i] = orig - h
        down = _scalar(f())
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(tensor.values.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max element-wise |a-b| / max(|a|, |b|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
