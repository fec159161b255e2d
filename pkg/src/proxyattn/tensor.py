"""Dense float64 tensors with record/replay reverse-mode differentiation.

The primitive set is deliberately closed: every operation the pose model
needs is defined here with an explicit backward rule, so the finite
difference checker in `gradcheck` can exercise the whole engine.  When a
`Tape` is active (entered as a context manager) each primitive appends one
node; `backward` replays the nodes in reverse and accumulates gradients
into `Parameter.grad`.  Without an active tape the primitives are plain
numpy computations.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


def _as_f64(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, preserving 0-d shapes."""
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class InvariantError(RuntimeError):
    """An internal engine invariant was violated (e.g. a corrupted tape)."""


class Tensor:
    """Immutable dense array of float64 values.

    Holds a C-contiguous float64 buffer.  Tensors are treated as values:
    no public operation mutates an existing tensor's data.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _as_f64(data)

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
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # Arithmetic sugar; `other` may be a Tensor, Parameter or python scalar.
    def __add__(self, other):
        return add(self, _as_operand(other))

    def __sub__(self, other):
        return sub(self, _as_operand(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(_as_operand(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """Named trainable leaf: a value buffer plus an accumulated gradient."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = _as_f64(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_operand(x):
    if isinstance(x, (Tensor, Parameter)):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _data(x) -> np.ndarray:
    return x.data


class Node:
    """One recorded primitive application: inputs, output, backward rule.

    `backward` maps the gradient w.r.t. the output to a tuple of gradients
    aligned with `inputs` (entries may be None for non-differentiable
    arguments).
    """

    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise InvariantError("tape stack corrupted: mismatched enter/exit")
        return False

    def __len__(self):
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: tuple, backward) -> None:
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(Node(out, inputs, backward))


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(parameter) into every reachable Parameter.grad.

    `loss` must be a scalar produced under `tape`.  Parameters that do not
    influence the loss keep whatever gradient they already hold (zero if
    freshly cleared).  Raises InvariantError if the tape's recorded order
    is not a valid topological order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")

    # The recorded order must never consume a tensor before producing it.
    all_outputs = {id(n.output) for n in tape.nodes}
    produced: set[int] = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if isinstance(inp, Tensor) and id(inp) in all_outputs and id(inp) not in produced:
                raise InvariantError("tape order invalid: node consumed before produced")
        produced.add(id(node.output))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue  # this node does not influence the loss
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if isinstance(inp, Parameter):
                inp.grad += ig
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient to `shape` by summing over broadcast axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dimensions broadcast."""
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} vs {bd.shape}")
    out = Tensor(np.matmul(ad, bd))

    def bw(g):
        ga = _unbroadcast(np.matmul(g, _swap_last(bd)), ad.shape)
        gb = _unbroadcast(np.matmul(_swap_last(ad), g), bd.shape)
        return ga, gb

    _record(out, (a, b), bw)
    return out


def linear(x, w, b=None) -> Tensor:
    """Affine map on the trailing axis: x @ w (+ b)."""
    xd, wd = _data(x), _data(w)
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input width {xd.shape} does not match weight {wd.shape}")
    out_d = np.matmul(xd, wd)
    if b is not None:
        bd = _data(b)
        if bd.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias shape {bd.shape} does not match weight {wd.shape}")
        out_d = out_d + bd
    out = Tensor(out_d)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = np.matmul(g, wd.T)
        gw = np.matmul(xd.reshape(-1, wd.shape[0]).T, g2)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    _record(out, (x, w) if b is None else (x, w, b), bw)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = _data(x)
    if xd.shape[-1] < 2:
        raise ShapeError(f"layer_norm needs a last axis of size >= 2, got {xd.shape}")
    gd, bd = _data(gain), _data(bias)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gd + bd)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    _record(out, (x, gain, bias), bw)
    return out


def softmax_last(x) -> Tensor:
    """Stabilized softmax along the last axis (max-subtracted)."""
    xd = _data(x)
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    _record(out, (x,), bw)
    return out


def _binary_shapes(ad: np.ndarray, bd: np.ndarray, opname: str):
    if ad.shape == bd.shape or ad.ndim == 0 or bd.ndim == 0:
        return
    raise ShapeError(f"{opname}: shapes {ad.shape} and {bd.shape} differ (only scalar broadcast allowed)")


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _binary_shapes(ad, bd, "add")
    out = Tensor(ad + bd)
    _record(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))
    return out


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _binary_shapes(ad, bd, "sub")
    out = Tensor(ad - bd)
    _record(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)))
    return out


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _binary_shapes(ad, bd, "mul")
    out = Tensor(ad * bd)

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    _record(out, (a, b), bw)
    return out


def scale(x, c: float) -> Tensor:
    """Multiply by a python constant (no gradient flows to the constant)."""
    xd = _data(x)
    out = Tensor(xd * c)
    _record(out, (x,), lambda g: (g * c,))
    return out


def sigmoid(x) -> Tensor:
    xd = _data(x)
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(y)
    _record(out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def tanh(x) -> Tensor:
    xd = _data(x)
    y = np.tanh(xd)
    out = Tensor(y)
    _record(out, (x,), lambda g: (g * (1.0 - y * y),))
    return out


def sqrt(x) -> Tensor:
    xd = _data(x)
    y = np.sqrt(xd)
    out = Tensor(y)
    _record(out, (x,), lambda g: (g * 0.5 / y,))
    return out


def reshape(x, shape) -> Tensor:
    xd = _data(x)
    out = Tensor(xd.reshape(shape))
    _record(out, (x,), lambda g: (g.reshape(xd.shape),))
    return out


def transpose(x, axes) -> Tensor:
    xd = _data(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(xd.transpose(axes))
    _record(out, (x,), lambda g: (g.transpose(inv),))
    return out


def broadcast_to(x, shape) -> Tensor:
    xd = _data(x)
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(xd, shape))
    _record(out, (x,), lambda g: (_unbroadcast(g, xd.shape),))
    return out


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    xd = _data(x)
    if not (0 <= start and start + length <= xd.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {xd.shape}")
    idx = [slice(None)] * xd.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(xd[idx])

    def bw(g):
        full = np.zeros_like(xd)
        full[idx] = g
        return (full,)

    _record(out, (x,), bw)
    return out


def sum_last(x) -> Tensor:
    xd = _data(x)
    out = Tensor(xd.sum(axis=-1))

    def bw(g):
        return (np.broadcast_to(g[..., None], xd.shape).copy(),)

    _record(out, (x,), bw)
    return out


def mean_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    xd = _data(x)
    n = xd.shape[axis]
    out = Tensor(xd.mean(axis=axis, keepdims=keepdims))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, xd.shape).copy(),)

    _record(out, (x,), bw)
    return out


def mean_all(x) -> Tensor:
    xd = _data(x)
    out = Tensor(xd.mean())

    def bw(g):
        return (np.full_like(xd, float(g) / xd.size),)

    _record(out, (x,), bw)
    return out


def sum_all(x) -> Tensor:
    xd = _data(x)
    out = Tensor(xd.sum())
    _record(out, (x,), lambda g: (np.full_like(xd, float(g)),))
    return out


ELEMENTWISE_KINDS = ("add", "sub", "mul", "scale", "sigmoid", "tanh")


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name over the pointwise primitive family."""
    if kind == "add":
        return add(*operands)
    if kind == "sub":
        return sub(*operands)
    if kind == "mul":
        return mul(*operands)
    if kind == "scale":
        return scale(*operands)
    if kind == "sigmoid":
        return sigmoid(*operands)
    if kind == "tanh":
        return tanh(*operands)
    raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {ELEMENTWISE_KINDS}")


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
