"""Float64 tensors with tape-recorded reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` (see :func:`Tape.__enter__`)
whenever at least one input requires a gradient.  Outside a tape, or inside
:func:`no_tape`, operations are plain numpy computations and leave no trace.

Only the primitives needed by the dual encoder, the aggregators and the
losses are provided.  Broadcasting follows numpy rules; gradients are summed
back onto the original operand shape.
"""

from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "planfl_active_tape", default=None
)

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """Dense row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def freeze(self) -> "Tensor":
        self.requires_grad = False
        self.grad = None
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every operator routes through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications for one forward pass."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)

    def __len__(self) -> int:
        return len(self.nodes)


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording; results carry no gradient history."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(g, sb) if b.requires_grad else None,
        )

    return _record("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(-g, sb) if b.requires_grad else None,
        )

    return _record("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record("mul", (a, b), ad * bd, backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        # d/dx = 0.5(1+th) + 0.5·x·(1-th²)·c·(1 + 3·0.044715·x²), in place to limit temporaries
        d = th * th
        np.subtract(1.0, d, out=d)
        d *= xd
        d *= _GELU_C * (1.0 + 0.134145 * x2)
        d += 1.0
        d += th
        d *= 0.5
        d *= g
        return (d,)

    return _record("gelu", (x,), out, backward)


def log_clamped(x: Tensor, eps: float = 1e-12) -> Tensor:
    """log(max(x, eps)); the gradient is zero where the clamp is active."""
    xd = x.data
    live = xd > eps
    out = np.log(np.where(live, xd, eps))

    def backward(g):
        return (np.where(live, g / np.where(live, xd, 1.0), 0.0),)

    return _record("log_clamped", (x,), out, backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # flatten leading axes so weight products are single BLAS calls
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(*ad.shape[:-1], n)

        def backward(g):
            g2 = g.reshape(-1, n)
            da = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            return da, (a2.T @ g2 if b.requires_grad else None)

        return _record("matmul", (a, b), out, backward)

    def backward(g):
        da = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        db = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return da, db

    return _record("matmul", (a, b), ad @ bd, backward)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _record(
        "transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
        lambda g: (g.transpose(inv),),
    )


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _record(
        "broadcast_to", (x,), np.broadcast_to(x.data, shape).copy(),
        lambda g: (_unbroadcast(g, src),),
    )


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", parts, np.concatenate([p.data for p in parts], axis=axis), backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", parts, np.stack([p.data for p in parts], axis=axis), backward)


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", (x,), np.array(x.data[index]), backward)


def take_rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: ``table[indices]`` with scatter-add gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise DimensionError(f"take_rows: index out of range for table shape {table.shape}")

    def backward(g):
        full = np.zeros(table.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take_rows", (table,), table.data[idx], backward)


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- fused primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax: NaN in input")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    d = xd.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm: last axis must be non-empty")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        dgain = _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None
        dbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        if not x.requires_grad:
            return None, dgain, dbias
        dxhat = g * gd
        proj = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = dxhat - dxhat.mean(axis=-1, keepdims=True)
        dx -= xhat * proj
        dx *= inv
        return dx, dgain, dbias

    return _record("layer_norm", (x, gain, bias), out, backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = xd / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _record("l2_normalize", (x,), y, backward)


# ---------------------------------------------------------------- composites


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for a 2-D weight, recorded as one node."""
    if bias is None or weight.ndim != 2:
        out = matmul(x, weight)
        return out if bias is None else add(out, bias)
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"linear: cannot apply weight {weight.shape} / bias {bias.shape} to input {x.shape}"
        )
    k, n = weight.shape
    x2 = x.data.reshape(-1, k)
    wd = weight.data
    out = x2 @ wd
    out += bias.data
    out = out.reshape(*x.shape[:-1], n)

    def backward(g):
        g2 = g.reshape(-1, n)
        dx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        dw = x2.T @ g2 if weight.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    return _record("linear", (x, weight, bias), out, backward)


def multihead_attention(x: Tensor, weights: dict[str, Tensor], n_heads: int) -> Tensor:
    """Bidirectional scaled dot-product self-attention.

    ``x`` has shape (..., s, d).  ``weights`` holds ``wq, bq, wk, bk, wv, bv,
    wo, bo`` with the projections applied as ``x @ w + b``.
    """
    *lead, s, d = x.shape
    if n_heads < 1 or d % n_heads:
        raise ConfigError(f"attention width {d} is not divisible by {n_heads} heads")
    dh = d // n_heads
    nl = len(lead)

    def split(t: Tensor) -> Tensor:
        t = reshape(t, (*lead, s, n_heads, dh))
        return transpose(t, (*range(nl), nl + 1, nl, nl + 2))

    q = split(linear(x, weights["wq"], weights["bq"]))
    k = split(linear(x, weights["wk"], weights["bk"]))
    v = split(linear(x, weights["wv"], weights["bv"]))
    kt = transpose(k, (*range(nl + 1), nl + 2, nl + 1))
    scores = mul(matmul(q, kt), 1.0 / math.sqrt(dh))
    ctx = matmul(softmax(scores, axis=-1), v)
    ctx = reshape(transpose(ctx, (*range(nl), nl + 1, nl, nl + 2)), (*lead, s, d))
    return linear(ctx, weights["wo"], weights["bo"])


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Nodes are visited in exact reverse recording order.  Tensors that do not
    require gradients never receive one.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.ones(loss.shape))}
    for node in reversed(tape.nodes):
        entry = pending.pop(id(node.output), None)
        if entry is None:
            continue
        for inp, g in zip(node.inputs, node.backward(entry[1])):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = (inp, pending[key][1] + g)
            else:
                pending[key] = (inp, np.asarray(g, dtype=np.float64).reshape(inp.shape))
    for t, g in pending.values():
        if not t.requires_grad:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
