"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: float64 everywhere, a dynamic graph rebuilt on every
forward pass, and no broadcasting except bias addition over leading axes
plus a handful of explicit row-wise helpers. The backward sweep is a
single-threaded reverse pass over a topologically ordered tape, so
gradients are bitwise reproducible for identical inputs. Tensors can be
marked retained, in which case both their value and their gradient
survive the sweep (used for attention probability matrices).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, MaskError, NumericError, ShapeError

_ids = itertools.count()
# recording is toggled per thread: a worker embedding under no_grad()
# must not switch recording off for everyone else
_tls = threading.local()

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    prev = grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping reverse mode needs.

    ``data`` is the row-major value buffer, ``grad`` is filled by
    ``backward`` for leaves with ``requires_grad`` and for retained
    intermediates, and ``node_id`` identifies the tensor on the tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op",
                 "_parents", "_backward_fn", "_retained")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._retained = False

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def retain_grad(self) -> "Tensor":
        """Keep this tensor's gradient around after backward."""
        self._retained = True
        return self

    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self.op:
            flags.append(self.op)
        return f"Tensor(shape={self.shape}{', ' + ','.join(flags) if flags else ''})"

    # Operator sugar; floats are lifted to constants.
    def __add__(self, other):
        return add(self, _lift(other, self)) if not isinstance(other, Tensor) else add(self, other)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else _lift(other, self)
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    return Tensor(np.full_like(like.data, float(value)))


def _record(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward_fn = backward_fn
    return out


class Tape:
    """Topologically ordered record of one backward region.

    ``nodes`` lists every tensor reachable from the root through parent
    links, parents strictly before children. ``retained`` holds the
    node ids whose value and gradient must both survive the sweep.
    """

    def __init__(self, nodes: list[Tensor], retained: set[int]):
        self.nodes = nodes
        self.retained = retained

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        nodes: list[Tensor] = []
        retained: set[int] = set()
        seen: set[int] = set()
        # Iterative post-order: parents are appended before the tensors
        # that consume them.
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node_id in seen:
                continue
            if expanded:
                seen.add(t.node_id)
                nodes.append(t)
                if t._retained:
                    retained.add(t.node_id)
                continue
            stack.append((t, True))
            for p in t._parents:
                if p.node_id not in seen:
                    stack.append((p, False))
        return cls(nodes, retained)


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss.

    Visits every tape node exactly once in reverse topological order,
    accumulating gradients. Leaves with ``requires_grad`` receive (or
    accumulate into) ``.grad``; retained intermediates receive a copy of
    their output gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    flowing: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = flowing.pop(t.node_id, None)
        if g is None:
            continue
        if t._retained:
            t.grad = g.copy()
        if t._backward_fn is None:
            if t.requires_grad and not t._retained:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t._backward_fn(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = flowing.get(p.node_id)
            flowing[p.node_id] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# Primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the only broadcast allowed is a bias whose shape
    equals a trailing suffix of the other operand's shape (bias-add over
    the leading axes)."""
    if a.shape == b.shape:
        def back(g):
            return g, g
        return _record(a.data + b.data, "add", (a, b), back)
    if 1 <= b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        lead = a.ndim - b.ndim

        def back(g):
            return g, g.sum(axis=tuple(range(lead)))
        return _record(a.data + b.data, "add", (a, b), back)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g * b.data, g * a.data
    return _record(a.data * b.data, "mul", (a, b), back)


def smul(s: Tensor, x: Tensor) -> Tensor:
    """Scale a tensor by a scalar tensor (gradient flows to both)."""
    if s.size != 1:
        raise ShapeError(f"smul: scale factor must be scalar, got shape {s.shape}")

    def back(g):
        return np.asarray((g * x.data).sum()).reshape(s.shape), g * s.data
    return _record(s.data * x.data, "smul", (s, x), back)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)

    def back(g):
        return (g * c,)
    return _record(x.data * c, "scale", (x,), back)


def divs(x: Tensor, c: float) -> Tensor:
    """Divide by a python constant (kept distinct from scale for exact
    rounding of ratios like 11/10)."""
    c = float(c)

    def back(g):
        return (g / c,)
    return _record(x.data / c, "divs", (x,), back)


def addc(x: Tensor, c: float) -> Tensor:
    """Add a python constant elementwise."""
    def back(g):
        return (g,)
    return _record(x.data + float(c), "addc", (x,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, 2-D or batched with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims must match exactly, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} vs {b.shape}")

    def back(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    return _record(a.data @ b.data, "matmul", (a, b), back)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {perm} is not a permutation of rank {x.ndim}")
    inverse = tuple(np.argsort(perm))

    def back(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)
    return _record(np.ascontiguousarray(x.data.transpose(perm)), "transpose", (x,), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape

    def back(g):
        return (g.reshape(old),)
    return _record(x.data.reshape(shape), "reshape", (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    rank = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != rank:
            raise ShapeError("concat: rank mismatch")
        for ax in range(rank):
            if ax != axis % rank and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return _record(np.concatenate([t.data for t in tensors], axis=axis),
                   "concat", tuple(tensors), back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if not (0 <= start and start + length <= x.shape[axis] and length >= 0):
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)
    return _record(np.ascontiguousarray(x.data[index]), "narrow", (x,), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id; gradient scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)
    return _record(table.data[ids], "embedding_lookup", (table,), back)


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask == True`` entries.

    Disallowed entries are exactly zero in the output; each row is
    stabilized by its own maximum over allowed entries. A row with no
    allowed entry raises MaskError.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"masked_softmax: mask shape {mask.shape} != logits shape {logits.shape}")
    if not mask.any(axis=-1).all():
        raise MaskError("masked_softmax: a row has every entry masked out")
    shifted = np.where(mask, logits.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.where(mask, np.exp(shifted), 0.0)
    out = expd / expd.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)
    return _record(out, "masked_softmax", (logits,), back)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply
    the optional per-feature affine."""
    if (gain is None) != (bias is None):
        raise ShapeError("layer_norm: gain and bias must be supplied together")
    d = x.shape[-1]
    if gain is not None and (gain.shape != (d,) or bias.shape != (d,)):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    if gain is None:
        def back(g):
            dx = inv * (g - g.mean(axis=-1, keepdims=True)
                        - xhat * (g * xhat).mean(axis=-1, keepdims=True))
            return (dx,)
        return _record(xhat, "layer_norm", (x,), back)

    out = xhat * gain.data + bias.data

    def back(g):
        gxhat = g * gain.data
        dx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias
    return _record(out, "layer_norm", (x, gain, bias), back)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based gelu."""
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)
    return _record(x.data * cdf, "gelu", (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so neither branch exponentiates a positive argument.
    out = np.where(x.data >= 0,
                   1.0 / (1.0 + np.exp(-np.clip(x.data, 0, None))),
                   np.exp(np.clip(x.data, None, 0)) / (1.0 + np.exp(np.clip(x.data, None, 0))))

    def back(g):
        return (g * out * (1.0 - out),)
    return _record(out, "sigmoid", (x,), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def back(g):
        return (g * out,)
    return _record(out, "exp", (x,), back)


def log(x: Tensor) -> Tensor:
    def back(g):
        return (g / x.data,)
    return _record(np.log(x.data), "log", (x,), back)


def log1p(x: Tensor) -> Tensor:
    """log(1 + x), precise for tiny x (used by the contrastive loss)."""
    def back(g):
        return (g / (1.0 + x.data),)
    return _record(np.log1p(x.data), "log1p", (x,), back)


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for a python exponent."""
    p = float(p)
    out = x.data ** p

    def back(g):
        return (g * p * x.data ** (p - 1.0),)
    return _record(out, "power", (x,), back)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all elements (axis None, scalar result) or one axis."""
    if axis is None:
        def back(g):
            return (np.broadcast_to(g, x.shape).copy(),)
        return _record(np.asarray(x.data.sum()), "sum", (x,), back)
    ax = axis % x.ndim

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)
    return _record(x.data.sum(axis=ax), "sum", (x,), back)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis % x.ndim]
    return divs(tsum(x, axis), n)


def add_rows(x: Tensor, r: Tensor) -> Tensor:
    """Add r[i] to every entry of row i of a matrix."""
    if x.ndim != 2 or r.shape != (x.shape[0],):
        raise ShapeError(f"add_rows: expected matrix and per-row vector, got {x.shape} and {r.shape}")

    def back(g):
        return g, g.sum(axis=1)
    return _record(x.data + r.data[:, None], "add_rows", (x, r), back)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a matrix by s[i]."""
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: expected matrix and per-row vector, got {x.shape} and {s.shape}")

    def back(g):
        return g * s.data[:, None], (g * x.data).sum(axis=1)
    return _record(x.data * s.data[:, None], "scale_rows", (x, s), back)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors; rejects zero vectors."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: need equal-length vectors, got {a.shape} and {b.shape}")
    qa = tsum(mul(a, a))
    qb = tsum(mul(b, b))
    if qa.item() == 0.0 or qb.item() == 0.0:
        raise NumericError("cosine_similarity: zero-norm vector")
    dot = tsum(mul(a, b))
    return mul(dot, power(mul(qa, qb), -0.5))


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack rank-1 tensors into a matrix (one per row)."""
    return concat([reshape(v, (1, v.shape[0])) for v in vectors], axis=0)


def first_nonfinite(root: Tensor) -> Tensor | None:
    """Oldest tape node under ``root`` whose value is non-finite.

    Used to blame the origin of a NaN/Inf loss; returns None when the
    whole region is finite.
    """
    tape = Tape.from_root(root)
    for t in tape.nodes:
        if not np.isfinite(t.data).all():
            return t
    return None
