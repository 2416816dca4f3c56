"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Operations applied while a :class:`Tape` is active are recorded when at least
one operand requires a gradient. Outside a tape every op is a plain numpy
computation, which is what inference paths use.

    with Tape() as tape:
        loss = (w * w).sum()
    grads = tape.backward(loss)      # {"w": array(...)}
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    """A numpy array that may participate in a recorded computation."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Parameter(Tensor):
    """A named trainable leaf. Gradients are reported under ``name``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        arr = np.array(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        super().__init__(arr, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Record:
    __slots__ = ("outputs", "inputs", "backward")

    def __init__(self, outputs, inputs, backward):
        self.outputs = outputs
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise RuntimeError("tape already consumed")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, outputs: Sequence[Tensor], inputs: Sequence, backward: Callable) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed")
        self._records.append(_Record(tuple(outputs), tuple(inputs), backward))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Return ``{parameter name: gradient}`` for every parameter reached by ``loss``."""
        if self._consumed:
            raise RuntimeError("tape already consumed; backward may run only once")
        if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim != 0:
            raise ValueError(f"loss must be a scalar tensor, got shape {getattr(loss, 'shape', None)}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {}
        params: dict[int, Parameter] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)
        for rec in reversed(self._records):
            gouts = [grads.pop(id(o), None) for o in rec.outputs]
            if all(g is None for g in gouts):
                continue
            gouts = [np.zeros_like(o.data) if g is None else g for o, g in zip(rec.outputs, gouts)]
            gins = rec.backward(*gouts)
            for x, g in zip(rec.inputs, gins):
                if g is None or not isinstance(x, Tensor) or not x.requires_grad:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if isinstance(x, Parameter):
                    params[key] = x
        self._records.clear()
        out: dict[str, np.ndarray] = {}
        for key, p in params.items():
            g = grads.get(key)
            if g is None:
                continue
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name!r} on tape")
            out[p.name] = np.ascontiguousarray(g, dtype=p.data.dtype).reshape(p.shape)
        return out


def active_tape() -> Tape | None:
    return _active_tape.get()


# ---------------------------------------------------------------------------
# op plumbing


_F32_TINY = np.finfo(np.float32).tiny


def flush_subnormals(x: np.ndarray, floor: float = _F32_TINY) -> np.ndarray:
    """Zero float32 values below ``floor``; CPUs run subnormal arithmetic ~10x slower."""
    if x.dtype == np.float32:
        return np.where(np.abs(x) < floor, np.float32(0), x)
    return x


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Operand arrays, with a constant operand cast to the tensor operand's float dtype."""
    x, y = _data(a), _data(b)
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and x.dtype.kind == "f":
        y = y.astype(x.dtype, copy=False)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor) and y.dtype.kind == "f":
        x = x.astype(y.dtype, copy=False)
    return x, y


def _wants_grad(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _emit(value: np.ndarray, inputs: Sequence, backward: Callable) -> Tensor:
    tape = _active_tape.get()
    if tape is not None and _wants_grad(*inputs):
        out = Tensor(value, requires_grad=True)
        tape.record((out,), inputs, backward)
        return out
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    x, y = _pair(a, b)
    return _emit(x + y, (a, b), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a, b) -> Tensor:
    x, y = _pair(a, b)
    return _emit(x - y, (a, b), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(a, b) -> Tensor:
    x, y = _pair(a, b)
    return _emit(x * y, (a, b), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b) -> Tensor:
    x, y = _pair(a, b)
    out = x / y
    return _emit(out, (a, b), lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)))


def neg(a) -> Tensor:
    return _emit(-_data(a), (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    x = _data(a)
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def tanh(a) -> Tensor:
    out = np.tanh(_data(a))
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    out = _sigmoid(_data(a))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    x = _data(a)
    return _emit(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def logaddexp(a, b) -> Tensor:
    x, y = _pair(a, b)
    out = np.logaddexp(x, y)
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * np.exp(x - out), x.shape), _unbroadcast(g * np.exp(y - out), y.shape)),
    )


def where(mask, a, b) -> Tensor:
    """``a`` where ``mask`` is true, else ``b``. The mask is a constant."""
    m = np.asarray(mask, dtype=bool)
    x, y = _pair(a, b)
    return _emit(
        np.where(m, x, y),
        (a, b),
        lambda g: (_unbroadcast(np.where(m, g, 0.0), x.shape), _unbroadcast(np.where(m, 0.0, g), y.shape)),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and faster than a sign split
    out = np.tanh(0.5 * x)
    out *= 0.5
    out += 0.5
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None) -> Tensor:
    x = _data(a)
    out = x.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit(out, (a,), backward)


def mean(a, axis=None) -> Tensor:
    x = _data(a)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def logsumexp(a, axis=-1) -> Tensor:
    x = _data(a)
    m = np.max(x, axis=axis, keepdims=True)
    s = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    out = np.squeeze(s, axis=axis)
    return _emit(out, (a,), lambda g: (np.expand_dims(g, axis) * np.exp(x - s),))


def log_softmax(a, axis=-1) -> Tensor:
    x = _data(a)
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (flush_subnormals(g - np.exp(out) * g.sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    x = _data(a)
    return _emit(x.reshape(shape), (a,), lambda g: (g.reshape(x.shape),))


def index(a, key) -> Tensor:
    x = _data(a)
    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in parts)

    def backward(g):
        out = np.zeros_like(x)
        if fancy:
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)

    return _emit(x[key], (a,), backward)


def take_rows(a, ids) -> Tensor:
    """Row gather ``a[ids]``; used for embedding lookup and state fan-out."""
    x = _data(a)
    ids = np.asarray(ids, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(x)
        np.add.at(out, ids.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (out,)

    return _emit(x[ids], (a,), backward)


def pick(a, ids) -> Tensor:
    """``a[i, ids[i]]`` for a 2-d ``a``."""
    x = _data(a)
    ids = np.asarray(ids, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def backward(g):
        out = np.zeros_like(x)
        out[rows, ids] = g
        return (out,)

    return _emit(x[rows, ids], (a,), backward)


def segment_sum(a, segments, n: int) -> Tensor:
    """Sum the leading-axis entries of ``a`` into ``n`` buckets given by ``segments``."""
    x = _data(a)
    seg = np.asarray(segments, dtype=np.intp)
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, seg, x)
    return _emit(out, (a,), lambda g: (g[seg],))


def concat(xs: Sequence, axis=-1) -> Tensor:
    arrays = [_data(x) for x in xs]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(xs), backward)


def stack(xs: Sequence, axis=0) -> Tensor:
    arrays = [_data(x) for x in xs]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit(np.stack(arrays, axis=axis), tuple(xs), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    return _emit(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def matmul_t(a, b) -> Tensor:
    """``a @ b.T`` without materializing the transpose as a new node."""
    x, y = _data(a), _data(b)
    return _emit(x @ y.T, (a, b), lambda g: (g @ y, g.T @ x))


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def lstm_cell(x, h, c, w_in, w_rec, bias, keep=None) -> tuple[Tensor, Tensor]:
    """One step of a gated memory cell; gate order is input, forget, cell, output.

    ``keep`` is an optional boolean row mask: rows where it is false carry the
    incoming ``h, c`` through unchanged (padding steps).
    """
    xd, hd, cd = _data(x), _data(h), _data(c)
    wi, wr, bd = _data(w_in), _data(w_rec), _data(bias)
    n = hd.shape[1]
    z = xd @ wi
    z += hd @ wr
    z += bd
    gates = _sigmoid(z)
    gates[:, 2 * n : 3 * n] = np.tanh(z[:, 2 * n : 3 * n])
    ig, fg, gg, og = (gates[:, j * n : (j + 1) * n] for j in range(4))
    c_new = fg * cd
    c_new += ig * gg
    tc = np.tanh(c_new)
    h_new = og * tc
    if keep is not None:
        k = np.asarray(keep, dtype=bool)[:, None]
        h_new = np.where(k, h_new, hd)
        c_new = np.where(k, c_new, cd)
    else:
        k = None

    inputs = (x, h, c, w_in, w_rec, bias)
    tape = _active_tape.get()
    if tape is None or not _wants_grad(*inputs):
        return Tensor(h_new), Tensor(c_new)

    def backward(gh, gc):
        if k is not None:
            gh_pass = np.where(k, 0.0, gh)
            gc_pass = np.where(k, 0.0, gc)
            gh = np.where(k, gh, 0.0)
            gc = np.where(k, gc, 0.0)
        # dc = gc + gh * og * (1 - tc^2)
        dc = tc * tc
        np.subtract(1.0, dc, out=dc)
        dc *= og
        dc *= gh
        dc += gc
        dc = flush_subnormals(dc)
        # local derivative of each gate w.r.t. its pre-activation
        deriv = 1.0 - gates
        deriv *= gates
        np.multiply(gg, gg, out=deriv[:, 2 * n : 3 * n])
        np.subtract(1.0, deriv[:, 2 * n : 3 * n], out=deriv[:, 2 * n : 3 * n])
        dz = np.empty_like(z)
        np.multiply(dc, gg, out=dz[:, :n])
        np.multiply(dc, cd, out=dz[:, n : 2 * n])
        np.multiply(dc, ig, out=dz[:, 2 * n : 3 * n])
        np.multiply(gh, tc, out=dz[:, 3 * n :])
        dz *= deriv
        # saturated gates leave subnormals that make the matmuls below crawl
        dz = flush_subnormals(dz)
        dh = dz @ wr.T
        dcp = dc * fg
        if k is not None:
            dh += gh_pass
            dcp += gc_pass
        return (dz @ wi.T, dh, dcp, xd.T @ dz, hd.T @ dz, dz.sum(axis=0))

    h_out = Tensor(h_new, requires_grad=True)
    c_out = Tensor(c_new, requires_grad=True)
    tape.record((h_out, c_out), inputs, backward)
    return h_out, c_out
