"""Dense float64 arrays with taped reverse-mode differentiation.

Every trainable layer in the package is built on the :class:`Tensor` and
:class:`Tape` types defined here. Operations execute eagerly in numpy;
while a tape is active, each op appends an entry holding the closures
needed to replay its forward pass and to push gradients to its inputs.
``Tape.backward`` walks the entries in exact reverse execution order.

All values are 64-bit floats. Tensors are treated as immutable once an op
has produced them; replaying a tape with unchanged inputs is bit-identical.
"""

from __future__ import annotations

from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, NumericsError

EPS_LOG = 1e-7

# When enabled, every op output is checked for NaN/Inf. Costs a pass over
# the data, so the trainer leaves it off and the test-suite turns it on.
_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """A numpy float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class TapeEntry:
    __slots__ = ("inputs", "output", "forward", "backward")

    def __init__(self, inputs, output, forward, backward):
        self.inputs = inputs
        self.output = output
        self.forward = forward
        self.backward = backward


class Tape:
    """Ordered record of executed ops; owns backward traversal and replay."""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and push gradients in reverse op order."""
        if loss.data.size != 1:
            raise DimensionError("backward() expects a scalar loss")
        if not np.isfinite(loss.data):
            raise NumericsError("loss is not finite")
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            g = entry.output.grad
            if g is None:
                continue
            entry.backward(g)

    def replay(self) -> None:
        """Recompute every recorded op in original order from current inputs."""
        for entry in self.entries:
            entry.output.data = entry.forward()

    def watched_outputs(self) -> List[Tensor]:
        return [e.output for e in self.entries]


_ACTIVE_TAPE: Optional[Tape] = None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable, forward: Callable) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(out.data)):
        raise NumericsError("non-finite values in op output")
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE.entries.append(TapeEntry(tuple(inputs), out, forward, backward))
    return out


def _any_grad(tensors: Iterable[Tensor]) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _any_grad((a, b)))

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), backward, lambda: a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, _any_grad((a, b)))

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _record(out, (a, b), backward, lambda: a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _any_grad((a, b)))

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward, lambda: a.data * b.data)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, a.requires_grad)

    def backward(g):
        _accum(a, g * c)

    return _record(out, (a,), backward, lambda: a.data * c)


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data + c, a.requires_grad)

    def backward(g):
        _accum(a, g)

    return _record(out, (a,), backward, lambda: a.data + c)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, a.requires_grad)

    def backward(g):
        _accum(a, 2.0 * a.data * g)

    return _record(out, (a,), backward, lambda: a.data * a.data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D operands or batched with identical leading dims;
    a 2-D right operand is shared across any batch dims of the left one."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {ad.shape} x {bd.shape}")
    if ad.ndim != bd.ndim and bd.ndim != 2:
        raise DimensionError("matmul supports equal batch dims or a 2-D right operand")
    if ad.ndim == bd.ndim and ad.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError("matmul batch dims must match exactly")
    out = Tensor(np.matmul(ad, bd), _any_grad((a, b)))

    def backward(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(bd, -1, -2)))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                a2 = ad.reshape(-1, ad.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                _accum(b, a2.T @ g2)
            else:
                _accum(b, np.matmul(np.swapaxes(ad, -1, -2), g))

    return _record(out, (a, b), backward, lambda: np.matmul(a.data, b.data))


def einsum2(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum. Every label of each operand must also appear in
    the output or in the other operand (true for all contractions here),
    which makes the gradient another einsum with permuted subscripts."""
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    a_sub, b_sub = lhs.split(",")
    for sub, other in ((a_sub, b_sub), (b_sub, a_sub)):
        if not set(sub) <= set(out_sub) | set(other):
            raise DimensionError(f"einsum2 cannot differentiate {subscripts!r}")
    out = Tensor(np.einsum(subscripts, a.data, b.data), _any_grad((a, b)))

    def backward(g):
        if a.requires_grad:
            _accum(a, np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data))
        if b.requires_grad:
            _accum(b, np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data))

    return _record(out, (a, b), backward, lambda: np.einsum(subscripts, a.data, b.data))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _record(out, (a,), backward, lambda: np.maximum(a.data, 0.0))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, a.requires_grad)

    def backward(g):
        _accum(a, g * (1.0 - out.data * out.data))

    return _record(out, (a,), backward, lambda: np.tanh(a.data))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    out = Tensor(y, a.requires_grad)

    def backward(g):
        _accum(a, g * out.data * (1.0 - out.data))

    return _record(out, (a,), backward, lambda: _sigmoid_np(a.data))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow warnings for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = Tensor(a.data * s, a.requires_grad)

    def backward(g):
        _accum(a, g * (s + a.data * s * (1.0 - s)))

    return _record(out, (a,), backward, lambda: a.data * _sigmoid_np(a.data))


def log_clamped(a: Tensor, eps: float = EPS_LOG) -> Tensor:
    """log(max(x, eps)); gradient is zero on the clamped region."""
    clamped = np.maximum(a.data, eps)
    out = Tensor(np.log(clamped), a.requires_grad)

    def backward(g):
        _accum(a, np.where(a.data > eps, g / clamped, 0.0))

    return _record(out, (a,), backward, lambda: np.log(np.maximum(a.data, eps)))


# ---------------------------------------------------------------------------
# reductions and normalized exponentials
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _record(out, (a,), backward, lambda: a.data.sum(axis=axis, keepdims=keepdims))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    y = _logsumexp_np(a.data, axis, keepdims)
    out = Tensor(y, a.requires_grad)

    def backward(g):
        yk = y if keepdims else np.expand_dims(y, axis)
        gk = g if keepdims else np.expand_dims(g, axis)
        _accum(a, gk * np.exp(a.data - yk))

    return _record(out, (a,), backward, lambda: _logsumexp_np(a.data, axis, keepdims))


def _logsumexp_np(x: np.ndarray, axis, keepdims: bool = False) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return s if keepdims else np.squeeze(s, axis=axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(a.data, axis)
    out = Tensor(y, a.requires_grad)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _record(out, (a,), backward, lambda: _softmax_np(a.data, axis))


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = a.data - _logsumexp_np(a.data, axis, keepdims=True)
    out = Tensor(y, a.requires_grad)

    def backward(g):
        _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), backward,
                   lambda: a.data - _logsumexp_np(a.data, axis, keepdims=True))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _record(out, (a,), backward, lambda: a.data.reshape(shape))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), a.requires_grad)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _record(out, (a,), backward, lambda: a.data.transpose(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), _any_grad(tensors))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _record(out, tuple(tensors), backward,
                   lambda: np.concatenate([t.data for t in tensors], axis=axis))


def slice_(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key], a.requires_grad)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        _accum(a, ga)

    return _record(out, (a,), backward, lambda: a.data[key])


def pad(a: Tensor, pad_width) -> Tensor:
    pw = tuple(tuple(p) for p in pad_width)
    out = Tensor(np.pad(a.data, pw), a.requires_grad)
    inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.shape))

    def backward(g):
        _accum(a, g[inner])

    return _record(out, (a,), backward, lambda: np.pad(a.data, pw))


def flip(a: Tensor, axis: int) -> Tensor:
    out = Tensor(np.flip(a.data, axis=axis).copy(), a.requires_grad)

    def backward(g):
        _accum(a, np.flip(g, axis=axis))

    return _record(out, (a,), backward, lambda: np.flip(a.data, axis=axis).copy())


def gather_rows(w: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(w.data[ids], w.requires_grad)

    def backward(g):
        gw = np.zeros_like(w.data)
        np.add.at(gw, ids, g)
        _accum(w, gw)

    return _record(out, (w,), backward, lambda: w.data[ids])


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator] = None,
            training: bool = False) -> Tensor:
    """Inverted dropout; identity when not training or p == 0 (the default
    everywhere in this package)."""
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * mask, a.requires_grad)

    def backward(g):
        _accum(a, g * mask)

    return _record(out, (a,), backward, lambda: a.data * mask)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-6,
                           coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. ``t``.

    ``coords`` restricts the check to a subset of flat indices (used for
    whole-model checks where exhaustive differencing is too slow); the
    returned array then has one entry per coordinate.
    """
    flat = t.data.reshape(-1)
    idxs = np.arange(flat.size) if coords is None else np.asarray(coords)
    grads = np.empty(len(idxs))
    for j, i in enumerate(idxs):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        grads[j] = (fp - fm) / (2.0 * h)
    return grads if coords is not None else grads.reshape(t.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation normalized by the gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), 1e-8)
    return float(np.max(np.abs(a - n), initial=0.0) / denom)


def check_gradients(build: Callable[[], Tuple[Tensor, Sequence[Tensor]]],
                    h: float = 1e-6, max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Run ``build`` under a tape, backprop, and compare each listed tensor's
    gradient against central finite differences. Returns the worst relative
    error across all checked tensors."""
    with Tape() as tape:
        loss, params = build()
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def forward_only():
        loss2, _ = build()
        return loss2

    worst = 0.0
    for p, g in zip(params, analytic):
        coords = None
        if max_coords is not None and p.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(p.size, size=max_coords, replace=False)
        numeric = finite_difference_grad(forward_only, p, h=h, coords=coords)
        a = g.reshape(-1)[coords] if coords is not None else g
        worst = max(worst, max_rel_error(a, numeric))
    return worst
