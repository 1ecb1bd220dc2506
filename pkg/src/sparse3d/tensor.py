"""Dense float32 tensors with a recorded tape for reverse-mode gradients.

Only the operator set needed by the attention kernels and the encoder
is provided. Every differentiable op registers its name in
``OP_REGISTRY`` so that gradient checking can enumerate them.

Ops keep the dtype of their inputs, which lets test oracles re-run the same
graph in float64 without touching production code paths.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .counter import record_flops

OP_REGISTRY: dict[str, Callable] = {}

_uids = itertools.count()
_TAPES: list["Tape"] = []


class Tensor:
    """Row-major array of reals plus a ``requires_grad`` flag.

    Construction copies ``data`` into a contiguous float32 buffer unless a
    different ``dtype`` is requested explicitly.
    """

    __slots__ = ("data", "requires_grad", "uid")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.array(data, dtype=dtype, order="C")
        if 0 in arr.shape:
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uids)

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt ``arr`` without copying or casting."""
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.requires_grad = requires_grad
        t.uid = next(_uids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, scalar):
        return scale(self, scalar)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Use as a context manager; ops run inside the block whose inputs require
    gradients are appended to ``nodes``.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def differentiable(name: str):
    """Register an op under ``name`` for gradient-check enumeration."""
    def deco(fn):
        OP_REGISTRY[name] = fn
        return fn
    return deco


def record_op(name: str, inputs: Sequence[Tensor], out: np.ndarray,
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out`` as a Tensor and put it on the active tape if needed."""
    result = Tensor.wrap(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.nodes.append(Node(name, tuple(inputs), result, backward))
    return result


class GradMap(dict):
    """Gradients keyed by tensor uid; also indexable by the tensor itself."""

    def __getitem__(self, key):
        return super().__getitem__(key.uid if isinstance(key, Tensor) else key)

    def __contains__(self, key):
        return super().__contains__(key.uid if isinstance(key, Tensor) else key)

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient of ``t``; exact zeros when the loss does not reach it."""
        g = self.get(t.uid)
        return np.zeros_like(t.data) if g is None else g


def backward(tape: Tape, loss: Tensor,
             on_visit: Callable[[Node], None] | None = None) -> GradMap:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not reachable from any tensor recorded on the tape")
    grads = GradMap()
    grads[loss.uid] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if on_visit is not None:
            on_visit(node)
        g = grads.get(node.output.uid)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = gi.astype(t.dtype, copy=False).reshape(t.shape)
            prev = grads.get(t.uid)
            grads[t.uid] = gi if prev is None else prev + gi
    return grads


# ---------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@differentiable("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


@differentiable("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


@differentiable("scale")
def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op("scale", (x,), x.data * x.dtype.type(c), lambda g: (g * c,))


@differentiable("add_bias")
def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` a vector matching the last extent of ``x``."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ValueError(f"add_bias: bias shape {b.shape} does not match last extent of {x.shape}")

    def grad(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return record_op("add_bias", (x, b), x.data + b.data, grad)


@differentiable("gelu")
def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * (1.0 / math.sqrt(2.0))))
    out = (xd * cdf).astype(x.dtype, copy=False)

    def grad(g):
        pdf = np.exp(-0.5 * xd * xd) * (1.0 / math.sqrt(2.0 * math.pi))
        return (g * (cdf + xd * pdf),)

    return record_op("gelu", (x,), out, grad)


@differentiable("softmax_lastdim")
def softmax_lastdim(x: Tensor) -> Tensor:
    y = _softmax(x.data)

    def grad(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op("softmax_lastdim", (x,), y, grad)


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@differentiable("layernorm")
def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layernorm: gamma/beta shapes {gamma.shape}/{beta.shape} "
                         f"do not match last extent {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad(g):
        flat = g.reshape(-1, d)
        gxhat = g * gamma.data
        dx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = (flat * xhat.reshape(-1, d)).sum(axis=0)
        dbeta = flat.sum(axis=0)
        return dx, dgamma, dbeta

    return record_op("layernorm", (x, gamma, beta), out, grad)


# ------------------------------------------------------------------ products

@differentiable("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch extents when ``b`` is 2-D.

    Adds ``2*m*k*n`` (times the batch size) to every active op counter.
    """
    if a.ndim < 2 or b.ndim != 2:
        raise ValueError(f"matmul: expected (..., m, k) @ (k, n), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    m_total = a.size // a.shape[-1]
    k, n = b.shape
    record_flops(2 * m_total * k * n)
    out = a.data @ b.data

    def grad(g):
        da = g @ b.data.T
        db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return da, db

    return record_op("matmul", (a, b), out, grad)


# ---------------------------------------------------------------- reductions

@differentiable("sum")
def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.dtype))
    return record_op("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape),))


@differentiable("sumsq")
def sumsq(x: Tensor) -> Tensor:
    out = np.asarray((x.data * x.data).sum(dtype=x.dtype))
    return record_op("sumsq", (x,), out, lambda g: (2.0 * g * x.data,))


@differentiable("l2norm")
def l2norm(x: Tensor) -> Tensor:
    """Euclidean norm of the flattened tensor; gradient taken as 0 at the origin."""
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum())
    out = np.asarray(norm, dtype=x.dtype)

    def grad(g):
        if norm == 0.0:
            return (np.zeros_like(x.data),)
        return (g * (x.data / x.dtype.type(norm)),)

    return record_op("l2norm", (x,), out, grad)


def add_n(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    if not terms:
        raise ValueError("add_n needs at least one term")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


# ----------------------------------------------------------------- structure

@differentiable("reshape")
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return record_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


@differentiable("take_rows")
def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; ``index`` may be any integer array."""
    index = np.asarray(index)
    out = x.data[index]

    def grad(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, index.reshape(-1), g.reshape(-1, x.shape[-1]))
        return (dx,)

    return record_op("take_rows", (x,), out, grad)


@differentiable("put_rows")
def put_rows(rows: Tensor, index: np.ndarray, n_rows: int,
             order: Sequence[int] | None = None) -> Tensor:
    """Inverse of ``take_rows`` for an index that covers each row exactly once.

    ``rows`` has shape ``index.shape + (d,)``; leading entries of ``index`` are
    written in ``order`` (default: ascending).
    """
    index = np.asarray(index)
    d = rows.shape[-1]
    if rows.shape[:-1] != index.shape:
        raise ValueError(f"put_rows: rows {rows.shape} do not match index {index.shape}")
    out = np.zeros((n_rows, d), dtype=rows.dtype)
    order = range(index.shape[0]) if order is None else order
    for s in order:
        out[index[s]] = rows.data[s]
    return record_op("put_rows", (rows,), out, lambda g: (g[index],))
