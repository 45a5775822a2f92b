"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op below is a plain function. When a :class:`GradientTape` is active and
one of the inputs requires a gradient, the op appends a node to the tape with
its backward rule. ``tape.backward(loss)`` walks the nodes in reverse creation
order, so gradients are bit-reproducible for identical op sequences.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the tape (non-scalar loss, unrecorded node, ...)."""


_ids = itertools.count()


class Tensor:
    """A float64 array plus autodiff bookkeeping.

    ``data`` is a C-contiguous numpy array, so ``data.ravel()`` is the
    row-major flat view.
    """

    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE, order="C")
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    # ids are per-process identities; copies and unpickled tensors get new ones
    def __getstate__(self):
        return {"data": self.data, "requires_grad": self.requires_grad, "name": self.name}

    def __setstate__(self, state):
        self.data = state["data"]
        self.requires_grad = state["requires_grad"]
        self.name = state["name"]
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar, used sparingly by model code
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_active: list["GradientTape"] = []


class GradientTape:
    """Records ops executed inside its ``with`` block.

    With ``retain_intermediates=True`` gradients of every recorded node are
    kept after :meth:`backward`; otherwise only tensors created with
    ``requires_grad=True`` (leaves) and tensors passed to :meth:`watch` keep
    theirs.
    """

    def __init__(self, retain_intermediates: bool = True):
        self.retain_intermediates = retain_intermediates
        self.nodes: list[_Node] = []
        self.values: dict[int, Tensor] = {}
        self.grads: dict[int, np.ndarray] = {}
        self._watched: set[int] = set()
        self._done = False

    def __enter__(self) -> "GradientTape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def watch(self, t: Tensor) -> Tensor:
        self._watched.add(t.id)
        return t

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))
        self.values[out.id] = out
        for t in inputs:
            if t.requires_grad:
                self.values.setdefault(t.id, t)

    def backward(self, loss: Tensor) -> "GradientTape":
        if self._done:
            raise TapeError("backward already ran on this tape")
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.id not in self.values:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        produced = {n.out.id for n in self.nodes}
        keep = {tid for tid in self.values if tid not in produced} | self._watched
        for node in reversed(self.nodes):
            g = grads.get(node.out.id)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.id)
                grads[t.id] = gi if prev is None else prev + gi
            if not self.retain_intermediates and node.out.id not in keep and node.out.id != loss.id:
                del grads[node.out.id]
        self.grads = grads
        self._done = True
        return self

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the loss w.r.t. ``t``; zeros if ``t`` did not influence it."""
        if t.id not in self.values:
            raise TapeError(f"{t!r} was not recorded on this tape")
        g = self.grads.get(t.id)
        if g is None:
            if not self._done:
                raise TapeError("backward has not run yet")
            return np.zeros_like(t.data)
        return g


def backward(loss: Tensor, tape: GradientTape | None = None) -> GradientTape:
    """Run reverse-mode differentiation of ``loss`` on ``tape`` (default: innermost active)."""
    if tape is None:
        if not _active:
            raise TapeError("no active tape")
        tape = _active[-1]
    return tape.backward(loss)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable | None) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError("non-finite values produced")
    needs = bwd is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and bool(_active))
    if out.requires_grad:
        _active[-1].record(out, inputs, bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# --- elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    with np.errstate(over="ignore"):
        out = a.data * c
    return _emit(out, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    on = a.data > 0
    return _emit(a.data * on, (a,), lambda g: (g * on,))


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


# --- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching semantics; 2-D operands are the common case."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``w`` stored as (out, in), as one node."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
        out += b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = (g2.T @ x2) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _emit(out.reshape(lead + (w.shape[0],)), inputs, bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


# --- reductions ----------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit(np.array(a.data.sum() / n), (a,), lambda g: (np.full(a.shape, float(g) / n),))


# --- indexing ------------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``weight`` gathered by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _emit(weight.data[ids], (weight,), bwd)


def take(a: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Select entries of ``a`` along ``axis``; indices must be unique."""
    index = np.asarray(index, dtype=np.intp)

    def bwd(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        ga[tuple(sl)] = g
        return (ga,)

    return _emit(np.take(a.data, index, axis=axis), (a,), bwd)


# --- normalisation / probabilities --------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        d = x.shape[-1]
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gg, gb

    return _emit(out, (x, gamma, beta), bwd)


def _softmax(z: np.ndarray, keep: np.ndarray | None) -> np.ndarray:
    if keep is not None:
        z = z.copy()
        np.putmask(z, np.broadcast_to(~keep, z.shape), -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax(x: Tensor, keep: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``keep`` is False get probability 0.

    Every row must keep at least one entry.
    """
    p = _softmax(x.data, keep)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is true.

    ``logits`` is (..., V); ``targets`` and ``mask`` match its leading shape.
    """
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if t.shape[0] != z.shape[0] or m.shape != t.shape:
        raise ShapeError(f"targets/mask {t.shape}/{m.shape} do not match logits {logits.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("degenerate batch: every position is masked")
    tm = t[m]
    if tm.min() < 0 or tm.max() >= V:
        raise IndexError(f"target id out of range [0, {V})")
    zm = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zm).sum(axis=1))
    rows = np.nonzero(m)[0]
    nll = logsum[rows] - zm[rows, tm]
    loss = np.array(nll.sum() / n)

    def bwd(g):
        p = np.exp(zm - logsum[:, None])
        p[~m] = 0.0
        p[rows, tm] -= 1.0
        return ((p * (float(g) / n)).reshape(logits.shape),)

    return _emit(loss, (logits,), bwd)


# --- oracle --------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    base = x.data.copy()
    flat = base.reshape(-1)
    out = np.empty_like(flat)

    def ev(v: np.ndarray) -> float:
        r = f(Tensor(v.reshape(base.shape)))
        val = r.item() if isinstance(r, Tensor) else float(r)
        if not np.isfinite(val):
            raise NumericError("non-finite function value in finite differences")
        return val

    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += eps
        xm = flat.copy()
        xm[i] -= eps
        out[i] = (ev(xp) - ev(xm)) / (2 * eps)
    return Tensor(out.reshape(base.shape))
