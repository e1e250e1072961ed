"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in creation
order, which is a valid topological order. ``Tape.backward`` walks that list
in reverse and accumulates gradients into every tensor that requires them.
Outside a tape nothing is recorded, which is how evaluation-only forwards run.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

RMS_EPS = 1e-6
LOG_EPS = 1e-12

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    tapes = _stack()
    return tapes[-1] if tapes else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
        grads = tape.backward(loss, params)
    """

    def __init__(self) -> None:
        self.ops: list[tuple["Tensor", tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def record(self, out: "Tensor", parents: tuple, backward_fn: Callable) -> None:
        self.ops.append((out, parents, backward_fn))

    def backward(self, loss: "Tensor", params: dict[str, "Tensor"] | None = None):
        """Backpropagate from a scalar ``loss``.

        Every leaf tensor that requires gradients and is reachable gets its
        ``.grad`` set. When ``params`` is given, a name -> gradient mapping is
        returned; parameters the loss does not depend on get zeros.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = fn(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p._leaf:
                    leaves[key] = p
        for key, t in leaves.items():
            t.grad = grads[key]
        if id(loss) in grads and loss._leaf:
            loss.grad = grads[id(loss)]
        if params is None:
            return None
        out = {}
        for name, p in params.items():
            if id(p) in leaves:
                out[name] = p.grad
            else:
                p.grad = np.zeros_like(p.data)
                out[name] = p.grad
        return out


class Tensor:
    """A float64 array that may participate in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_leaf", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = np.maximum(a.data, LOG_EPS)
    return _result(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a: Tensor, idx) -> Tensor:
    """Basic or fancy indexing; the backward pass scatter-adds."""
    shape = a.shape

    def backward(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _result(a.data[idx], (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table of {table.shape[0]} rows")
    return index(table, ids)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- normalisation

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.shape[-1] < 1:
        raise ContractError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """Scale each feature vector by 1/sqrt(mean(x^2) + eps), then by ``gain``."""
    if x.shape[-1] < 1:
        raise ContractError("rms_norm needs a non-empty feature axis")
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * r

    def backward(g):
        ggain = _unbroadcast(g * normed, gd.shape) if gain.requires_grad else None
        u = g * gd
        gx = r * u - xd * (r ** 3) * (u * xd).mean(axis=-1, keepdims=True)
        return gx, ggain

    return _result(normed * gd, (x, gain), backward)


# ---------------------------------------------------------------- losses

def bce_with_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean binary cross-entropy over all (unmasked) entries, stable form."""
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise DimensionError(f"targets {t.shape} do not match logits {z.shape}")
    w = np.ones_like(z) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), z.shape)
    count = max(w.sum(), 1.0)
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = (per * w).sum() / count

    def backward(g):
        return (g * (_sigmoid(z) - t) * w / count,)

    return _result(np.asarray(loss), (logits,), backward)


def cross_entropy_vocab(logits: Tensor, target_ids, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``target_ids`` under row-wise softmax.

    ``logits`` has shape [..., T, V]; positions with mask 0 are excluded.
    """
    z = logits.data
    ids = np.asarray(target_ids, dtype=np.int64)
    vocab = z.shape[-1]
    if ids.shape != z.shape[:-1]:
        raise DimensionError(f"target ids {ids.shape} do not match logits {z.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"target id out of range for vocabulary of {vocab}")
    w = np.ones(ids.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    count = max(w.sum(), 1.0)
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, ids[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, ids[..., None], np.take_along_axis(grad, ids[..., None], axis=-1) - 1.0, axis=-1)
        return (g * grad * (w / count)[..., None],)

    return _result(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- gradient checking

def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    num_coords: int = 100,
    h: float = 1e-4,
    seed: int = 0,
    names: Iterable[str] | None = None,
) -> list[tuple[str, int, float, float, float]]:
    """Compare analytic gradients with central finite differences.

    Samples ``num_coords`` parameter coordinates uniformly (without
    replacement) and returns ``(name, flat_index, analytic, numeric, rel_err)``
    with ``rel_err = |g - g_fd| / max(1, |g|, |g_fd|)``.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, params)
    pool = list(names) if names is not None else list(params)
    sizes = np.array([params[n].data.size for n in pool])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(num_coords, int(offsets[-1])), replace=False)
    report = []
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = pool[k]
        i = int(flat - offsets[k])
        view = params[name].data.reshape(-1)
        orig = view[i]
        view[i] = orig + h
        plus = loss_fn().item()
        view[i] = orig - h
        minus = loss_fn().item()
        view[i] = orig
        numeric = (plus - minus) / (2 * h)
        analytic = float(grads[name].reshape(-1)[i])
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        report.append((name, i, analytic, numeric, err))
    return report
