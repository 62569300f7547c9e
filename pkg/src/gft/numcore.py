"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Tensors wrap row-major numpy arrays (float64 by default, float32 optional
for training runs). Operations executed inside a ``record()`` context are
appended to a Tape; ``Tape.backward(loss)`` replays that record in reverse
and accumulates gradients for every ``requires_grad`` leaf. Outside a
recording context ops just compute values, which is the cheap evaluation
path.

A tape can be consumed exactly once: calling ``backward`` a second time
raises ``TapeError``. Re-run the forward pass to differentiate again.

Broadcasting is deliberately restricted: binary ops require identical
shapes except for ``add_bias``, which adds a vector over the trailing
feature axis.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (e.g. double backward)."""


DEFAULT_DTYPE = np.float64


class Tensor:
    """A shaped array plus gradient bookkeeping.

    ``values`` is the numpy payload, ``grad`` is filled in by
    ``Tape.backward`` for tensors with ``requires_grad=True``. Tensors are
    treated as immutable after construction; the optimizer is the only
    place that rewrites ``values`` in place, between tapes.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


@dataclass
class ParamTensor:
    """A named, flagged weight. Freezing is enforced at the optimizer (the
    forward pass never special-cases frozen weights); as a pure
    optimization, frozen params also opt out of gradient accumulation,
    since no caller may consume those gradients."""

    name: str
    tensor: Tensor
    frozen: bool = False

    def __post_init__(self):
        if not self.name:
            raise ValueError("ParamTensor needs a non-empty name")

    @property
    def count(self) -> int:
        return int(self.tensor.values.size)

    def set_frozen(self, frozen: bool) -> None:
        """Flip the freeze flag, keeping gradient bookkeeping in sync."""
        self.frozen = bool(frozen)
        self.tensor.requires_grad = not self.frozen


class _Node:
    """One recorded primitive: the output it produced, its inputs, and a
    vector-Jacobian product returning one gradient per input (None for
    inputs that need none)."""

    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output, inputs, vjp):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of executed primitives, replayed in reverse by
    ``backward``. Single use."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, node: _Node) -> None:
        self._nodes.append(node)
        self._produced.add(id(node.output))

    def backward(self, loss: Tensor) -> dict:
        """Accumulate d(loss)/d(leaf) for every requires_grad leaf reachable
        from ``loss``; also stores them on ``tensor.grad``. Returns a dict
        mapping each leaf Tensor to its gradient array.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if loss.values.ndim != 0:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.values.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for node in reversed(self._nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.vjp(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] += g
                else:
                    grads[key] = np.array(g, dtype=inp.dtype, copy=True)
                if key not in self._produced:
                    leaf_grads[inp] = grads[key]
        for tensor, g in leaf_grads.items():
            tensor.grad = g
        if id(loss) not in self._produced and loss.requires_grad:
            loss.grad = np.ones((), dtype=loss.dtype)
            leaf_grads[loss] = loss.grad
        return leaf_grads


_TAPE_STACK: list[Tape] = []


@contextmanager
def record(tape: Tape | None = None):
    """Context manager that makes ``tape`` (or a fresh one) the active
    recording target for all ops executed inside."""
    t = tape if tape is not None else Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(values, inputs, vjp) -> Tensor:
    """Build the op output, recording a node when a tape is active and any
    input wants gradients."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    if needs:
        tape._record(_Node(out, inputs, vjp))
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.values * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., D] + bias[D], the one permitted broadcast."""
    if bias.values.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {bias.shape} over {x.shape}")
    axes = tuple(range(x.values.ndim - 1))
    return _make(
        x.values + bias.values,
        (x, bias),
        lambda g: (g, g.sum(axis=axes) if axes else g.copy()),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product [m,k] @ [k,n]."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    av, bv = a.values, b.values
    # check at build time which sides want gradients; skipping a side
    # halves the backward cost through frozen projections
    need_a, need_b = a.requires_grad, b.requires_grad
    return _make(av @ bv, (a, b),
                 lambda g: (g @ bv.T if need_a else None,
                            av.T @ g if need_b else None))


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got {x.shape}")
    return _make(x.values.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([p.values for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.intp)
    shape0 = x.shape

    def vjp(g):
        gx = np.zeros(shape0, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.values[idx], (x,), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice of a 2-D tensor (how attention heads are
    split out of a fused projection)."""
    if x.values.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-D tensor, got {x.shape}")
    n, c = x.shape
    if not 0 <= start < stop <= c:
        raise ValueError(f"slice_cols: bad range [{start}, {stop}) for width {c}")

    def vjp(g):
        gx = np.zeros((n, c), dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.values[:, start:stop].copy(), (x,), vjp)


def pick_rows(x: Tensor, cols) -> Tensor:
    """x[i, cols[i]] for a 2-D tensor; used by the losses."""
    if x.values.ndim != 2:
        raise ShapeError(f"pick_rows: expected 2-D tensor, got {x.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    n, c = x.shape
    if cols.shape != (n,):
        raise ShapeError(f"pick_rows: need {n} column indices, got {cols.shape}")
    if cols.min(initial=0) < 0 or cols.max(initial=0) >= c:
        raise ValueError(f"pick_rows: column index out of range [0, {c})")
    rows = np.arange(n)

    def vjp(g):
        gx = np.zeros((n, c), dtype=g.dtype)
        gx[rows, cols] = g
        return (gx,)

    return _make(x.values[rows, cols], (x,), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(x.values.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.values.size
    shape = x.shape
    return _make(x.values.mean(), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def axis_max(x: Tensor, axis: int) -> Tensor:
    """Max-pool along one axis. Ties route the gradient to the first
    maximal element, so the backward pass is deterministic."""
    xv = x.values
    out = xv.max(axis=axis)
    arg = xv.argmax(axis=axis)

    def vjp(g):
        gx = np.zeros_like(xv)
        idx = list(np.indices(out.shape))
        idx.insert(axis if axis >= 0 else xv.ndim + axis, arg)
        gx[tuple(idx)] = g
        return (gx,)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    xv = x.values
    return _make(np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xv = x.values
    return _make(
        np.where(xv > 0, xv, slope * xv),
        (x,),
        lambda g: (g * np.where(xv > 0, 1.0, slope),),
    )


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU, the usual transformer-MLP activation."""
    xv = x.values
    c = np.sqrt(2.0 / np.pi)
    inner = c * (xv + 0.044715 * xv**3)
    t = np.tanh(inner)

    def vjp(g):
        d_inner = c * (1.0 + 3 * 0.044715 * xv**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t**2) * d_inner),)

    return _make(0.5 * xv * (1.0 + t), (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1. NaN inputs
    propagate NaN outputs."""
    xv = x.values
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xv = x.values
    shifted = xv - xv.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis followed by the affine
    ``gain * x_hat + bias``. Population variance; eps keeps the
    zero-variance row finite (constant rows normalize to zero)."""
    xv = x.values
    d = xv.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature dim {d}"
        )
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values

    def vjp(g):
        axes = tuple(range(xv.ndim - 1))
        g_gain = (g * xhat).sum(axis=axes) if axes else (g * xhat)
        g_bias = g.sum(axis=axes) if axes else g.copy()
        gh = g * gv
        g_x = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (g_x, g_gain, g_bias)

    return _make(xhat * gv + bias.values, (x, gain, bias), vjp)


def dropout(x: Tensor, p: float, seed: int) -> Tensor:
    """Inverted dropout with an explicit per-call seed so training runs
    are reproducible. Use only on the training path."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return _make(x.values.copy(), (x,), lambda g: (g,))
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    mask = mask.astype(x.dtype)
    return _make(x.values * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def tensor(values, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0, requires_grad: bool = False,
          dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=requires_grad)


def param(name: str, values, frozen: bool = False, dtype=DEFAULT_DTYPE) -> ParamTensor:
    """Shorthand for a named weight; trainable unless frozen."""
    return ParamTensor(
        name, Tensor(np.asarray(values, dtype=dtype), requires_grad=not frozen), frozen)
