"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to a watched tensor (or to
anything derived from one) together with a closure evaluating its
vector-Jacobian product. ``Tape.gradient`` replays the records backwards.

Values that are not :class:`Tensor` instances (numpy arrays, Python scalars)
are treated as constants.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array that the active tapes can track."""

    __slots__ = ("data",)
    # make numpy defer to our reflected operators (ndarray @ Tensor etc.)
    __array_ufunc__ = None

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tracked tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of primitive operations for reverse-mode replay.

    Use as a context manager; only computations reachable from tensors passed
    to :meth:`watch` are recorded. A tape is single-owner and must not be
    shared while recording.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, Callable]] = []
        self._tracked: set[int] = set()
        # hold references so ids stay unique for the tape's lifetime
        self._alive: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if isinstance(t, (list, tuple)):
                self.watch(*t)
                continue
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensor, got {type(t).__name__}")
            self._tracked.add(id(t))
            self._alive.append(t)

    def is_tracked(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        tracked = self._tracked
        for x in inputs:
            if isinstance(x, Tensor) and id(x) in tracked:
                break
        else:
            return
        tracked.add(id(out))
        self._records.append((out, inputs, vjp))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], cotangent=None) -> list[np.ndarray]:
        """Gradients of ``target`` with respect to each of ``sources``.

        ``cotangent`` defaults to ones (the usual case of a scalar loss).
        Sources that ``target`` does not depend on get zero gradients.
        """
        if cotangent is None:
            cotangent = np.ones_like(target.data)
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != target.shape:
            raise ValueError(f"cotangent shape {cotangent.shape} != target shape {target.shape}")
        adj = {id(target): cotangent}
        tracked = self._tracked
        for out, inputs, vjp in reversed(self._records):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            for x, gx in zip(inputs, vjp(g)):
                if gx is None or not isinstance(x, Tensor) or id(x) not in tracked:
                    continue
                k = id(x)
                if k in adj:
                    adj[k] = adj[k] + gx
                else:
                    adj[k] = gx
        return [adj[id(s)] if id(s) in adj else np.zeros_like(s.data) for s in sources]


@contextmanager
def no_grad():
    """Suspend recording on every active tape."""
    saved = _ACTIVE[:]
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE[:] = saved


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _emit(out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite value produced by a tensor operation")
    t = Tensor(out)
    for tape in _ACTIVE:
        tape._record(t, inputs, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _emit(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _emit(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _emit(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def neg(a) -> Tensor:
    return _emit(-_val(a), (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)

    def vjp(g):
        if bv.ndim == 2 and av.ndim >= 2:
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _emit(av @ bv, (a, b), vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    av = _val(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _emit(av.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    av = _val(a)
    return _emit(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None) -> Tensor:
    av = _val(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _emit(np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(t) for t in tensors]
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate(vals, axis=axis), tuple(tensors), vjp)


def getitem(a, idx) -> Tensor:
    av = _val(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(np.array(av[idx]), (a,), vjp)


def exp(a) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(_val(a))
    return _emit(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    av = _val(a)
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Tensor:
    y = np.tanh(_val(a))
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def square(a) -> Tensor:
    av = _val(a)
    return _emit(av * av, (a,), lambda g: (2.0 * g * av,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    x = _val(a)
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _emit(y, (a,), vjp)


def _softmax(x: np.ndarray, mask=None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks allowed entries.

    Masked entries get exactly zero weight. Every row must allow at least one entry.
    """
    y = _softmax(_val(a), mask)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (a,), vjp)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a matrix, computed with row-max subtraction.

    Raises:
        ValueError: if ``x`` has non-finite entries.
    """
    if not np.isfinite(_val(x)).all():
        raise ValueError("softmax_rows: input contains non-finite values")
    return masked_softmax(x)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine parameters)."""
    x = _val(a)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - y * gy),)

    return _emit(y, (a,), vjp)


def detach(a) -> np.ndarray:
    return _val(a).copy()


def finite_diff_check(f: Callable, params, h: float = 1e-5, coords: int | None = None, rng=None) -> float:
    """Max relative error between tape gradients and central differences.

    Args:
        f: callable taking ``params`` and returning a scalar Tensor.
        params: a Tensor or a list of Tensors; perturbed in place and restored.
        h: central-difference step, within [1e-6, 1e-4].
        coords: if given, check this many coordinates sampled per tensor
            (at least one per tensor) instead of every coordinate.
        rng: numpy Generator used for coordinate sampling.

    Returns:
        max over checked coordinates of |analytic - fd| / max(1, |fd|).
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    plist = [params] if isinstance(params, Tensor) else list(params)
    with Tape() as tape:
        tape.watch(*plist)
        val = f(params)
    if not np.isfinite(val.data).all():
        raise ValueError("finite_diff_check: f returned a non-finite value")
    grads = tape.gradient(val, plist)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(plist, grads):
        flat_idx = np.arange(p.size)
        if coords is not None and coords < p.size:
            flat_idx = rng.choice(p.size, size=max(1, coords), replace=False)
        base = p.data
        for i in flat_idx:
            ix = np.unravel_index(i, p.shape)
            vals = []
            for s in (h, -h):
                pert = base.copy()
                pert[ix] += s
                p.data = pert
                out = f(params).data
                if not np.isfinite(out).all():
                    p.data = base
                    raise ValueError("finite_diff_check: f returned a non-finite value")
                vals.append(float(out))
            p.data = base
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, abs(g[ix] - fd) / max(1.0, abs(fd)))
    return worst
