"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

The primitive set is deliberately small (matmul, elementwise add/mul, sum,
reshape/transpose, gather, take, masked softmax, cross-entropy); the
attention-only transformer and the toy loss are both built from it.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = cross_entropy(logits(x), targets)
    grads = backward(tape, loss, params)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPES = {32: np.float32, 64: np.float64}


class NonFiniteError(FloatingPointError):
    """Raised when an engine op produces NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return swapaxes(self)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of primitive ops; use as a context manager."""

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _tape() -> Tape | None:
    return Tape._active[-1] if Tape._active else None


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check(op: str, arr: np.ndarray) -> np.ndarray:
    # A finite sum implies finite entries; fall back to the full scan only on overflow.
    s = arr.sum()
    if not np.isfinite(s) and not np.isfinite(arr).all():
        raise NonFiniteError(op)
    return arr


def _record(op: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    _check(op, out_data)
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _tape()
    if needs and tape is not None:
        tape.nodes.append(_Node(out, inputs, backward_fn, op))
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


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", a.data + b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting (also covers scaling by a constant)."""
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", ad * bd, (a, b), bw)


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = a.dtype.type(s)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes (ndim >= 2)."""
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), bw)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    inv = np.argsort(axes)
    return _record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int = -1, ax2: int = -2) -> Tensor:
    a = _wrap(a)
    return _record(
        "swapaxes", np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),)
    )


def gather(table, idx) -> Tensor:
    """Row lookup ``table[idx]`` (embedding); gradients scatter-add back into rows."""
    table = _wrap(table)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather indices must be integers")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for table with {n} rows")

    def bw(g):
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _record("gather", table.data[idx], (table,), bw)


def take(a, index: int, axis: int) -> Tensor:
    """Select a single index along ``axis`` (the axis is dropped)."""
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _record("take", np.take(a.data, index, axis=axis), (a,), bw)


def masked_softmax(logits, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0."""
    logits = _wrap(logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        try:
            mask = np.broadcast_to(mask, logits.shape)
        except ValueError as err:
            raise ValueError("mask is not broadcastable to logits") from err
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has every entry masked")
    x = np.where(mask, logits.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)  # exp(-inf) == 0 on masked entries
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax", y, (logits,), bw)


def softmax(logits) -> Tensor:
    logits = _wrap(logits)
    return masked_softmax(logits, np.ones(logits.shape, dtype=bool))


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over leading rows.

    ``logits`` may be a single vector (V,) with a scalar target, or (B, V)
    with a (B,) target array.
    """
    logits = _wrap(logits)
    target = np.asarray(target)
    single = logits.data.ndim == 1
    x = logits.data[None] if single else logits.data
    t = target.reshape(-1)
    if t.dtype.kind not in "iu":
        raise TypeError("targets must be integer label indices")
    if t.shape[0] != x.shape[0]:
        raise ValueError("one target per row required")
    V = x.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target out of range [0, {V})")
    rows = np.arange(x.shape[0])
    lsm = log_softmax_np(x)
    loss = -lsm[rows, t].mean()

    def bw(g):
        p = np.exp(lsm)
        p[rows, t] -= 1.0
        p *= g / x.shape[0]
        return (p[0] if single else p,)

    return _record("cross_entropy", np.asarray(loss, dtype=x.dtype), (logits,), bw)


# ------------------------------------------------------------------ backward


def backward(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor] | Iterable[Tensor]):
    """Reverse-mode sweep over ``tape`` from scalar ``loss``.

    Returns gradients for every tensor in ``wrt`` (a name->Tensor mapping
    yields a name->array dict, an iterable yields a list). Tensors the loss
    does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not (isinstance(inp, Tensor) and inp.requires_grad):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if isinstance(wrt, Mapping):
        return {k: _grad_or_zero(grads, t) for k, t in wrt.items()}
    return [_grad_or_zero(grads, t) for t in wrt]


def _grad_or_zero(grads, t: Tensor) -> np.ndarray:
    g = grads.get(id(t))
    if g is None:
        return np.zeros_like(t.data)
    return np.asarray(g, dtype=t.dtype).reshape(t.shape)


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        st = cls(**hyper)
        for k, p in params.items():
            st.m[k] = np.zeros_like(p)
            st.v[k] = np.zeros_like(p)
        return st


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    skip: Iterable[str] = (),
):
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Names in ``skip`` keep both their values and their moments untouched
    (frozen partitions). Returns ``(params, state)``.
    """
    skip = set(skip)
    for k, p in params.items():
        if k in skip:
            continue
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape or state.v[k].shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for '{k}'")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in params.items():
        if k in skip:
            continue
        g = grads[k]
        if _fused_adam is not None and p.flags.c_contiguous and g.flags.c_contiguous:
            _fused_adam(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                        state.m[k].reshape(-1), state.v[k].reshape(-1),
                        b1, b2, state.lr / c1, 1.0 / c2, state.eps)
        else:
            _adam_numpy(p, g, state.m[k], state.v[k], b1, b2, state.lr / c1, 1.0 / c2, state.eps)
    return params, state


def _adam_numpy(p, g, m, v, b1, b2, step, inv_c2, eps):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    denom = np.sqrt(v * inv_c2)
    denom += eps
    p -= step * m / denom


try:  # single fused pass over each parameter; same arithmetic as _adam_numpy
    import numba

    @numba.njit(cache=True)
    def _fused_adam(p, g, m, v, b1, b2, step, inv_c2, eps):
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            p[i] -= step * mi / (np.sqrt(vi * inv_c2) + eps)

except ImportError:  # pragma: no cover
    _fused_adam = None
