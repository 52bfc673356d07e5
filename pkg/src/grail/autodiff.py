"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op returns a :class:`Value`. When any operand requires a gradient, the
result records its parents and a backward closure; :func:`backward` walks the
recorded graph in reverse topological order and then frees it.

Parameters and activations default to float32. Reductions accumulate in
float64. Use :func:`precision` to build float64 graphs (gradient checks do).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonScalarLoss, ShapeError

LOG_FLOOR = 1e-7

_state = {"dtype": np.float32, "grad": True, "kinks": None}


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new parameters and constants."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch masks of every non-smooth op evaluated in the block.

    Two evaluations whose masks differ straddle a non-differentiable point, so
    a finite difference across them is meaningless.
    """
    prev = _state["kinks"]
    log: list[bytes] = []
    _state["kinks"] = log
    try:
        yield log
    finally:
        _state["kinks"] = prev


def _note_kink(mask):
    log = _state["kinks"]
    if log is not None:
        log.append(np.packbits(np.asarray(mask, dtype=bool).ravel()).tobytes())


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Value):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def detach(self):
        return Value(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Value{tag}(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Value):
    """A trainable leaf."""

    __slots__ = ()

    def __init__(self, data, name=None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def as_value(x, like=None) -> Value:
    if isinstance(x, Value):
        return x
    dtype = like.data.dtype if like is not None else None
    return Value(x, dtype=dtype)


def _result(data, parents, backward):
    out = Value(data, dtype=data.dtype)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not broadcast") from None


def _coerce(a, b):
    if isinstance(a, Value) and not isinstance(b, Value):
        b = Value(b, dtype=a.data.dtype)
    elif isinstance(b, Value) and not isinstance(a, Value):
        a = Value(a, dtype=b.data.dtype)
    elif not isinstance(a, Value):
        a, b = Value(a), Value(b)
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Value:
    a, b = _coerce(a, b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    a, b = _coerce(a, b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Value:
    a, b = _coerce(a, b)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Value:
    a, b = _coerce(a, b)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Value:
    a = as_value(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def minimum(a, b) -> Value:
    a, b = _coerce(a, b)
    _binary_shape("minimum", a, b)
    pick_a = a.data <= b.data
    _note_kink(pick_a)
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0), a.shape),
                              _unbroadcast(np.where(pick_a, 0, g), b.shape)))


def relu(a) -> Value:
    a = as_value(a)
    mask = a.data > 0
    _note_kink(mask)
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                   lambda g: (g * mask,))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def sigmoid(a) -> Value:
    a = as_value(a)
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a) -> Value:
    a = as_value(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1 - t * t),))


def exp(a) -> Value:
    a = as_value(a)
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def log(a) -> Value:
    a = as_value(a)
    d = a.data
    return _result(np.log(d), (a,), lambda g: (g / d,))


def safe_log(a, floor=LOG_FLOOR) -> Value:
    """log(max(a, floor)); the gradient is zero where the floor is active."""
    a = as_value(a)
    d = a.data
    live = d > floor
    _note_kink(live)
    clipped = np.where(live, d, floor).astype(d.dtype)
    return _result(np.log(clipped), (a,), lambda g: (np.where(live, g / clipped, 0),))


def clamp(a, lo=None, hi=None) -> Value:
    a = as_value(a)
    d = a.data
    inside = np.ones(d.shape, dtype=bool)
    if lo is not None:
        inside &= d >= lo
    if hi is not None:
        inside &= d <= hi
    _note_kink(inside)
    out = np.clip(d, lo, hi).astype(d.dtype)
    return _result(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Value:
    a, b = _coerce(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: operand shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b) -> Value:
    """x @ w + b with the bias broadcast over rows."""
    return add(matmul(x, w), b)


def reshape(a, shape) -> Value:
    a = as_value(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def index(a, key) -> Value:
    """Gather ``a.data[key]``; repeated indices accumulate in the backward pass."""
    a = as_value(a)
    if isinstance(key, list):
        key = np.asarray(key)
    src_shape, dtype = a.shape, a.data.dtype

    def back(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, key, g)
        return (out,)

    return _result(np.asarray(a.data[key]), (a,), back)


def take(a, idx) -> Value:
    """Gather along the first axis with an integer array of any shape."""
    return index(a, np.asarray(idx, dtype=np.intp))


def concat(values: Sequence, axis=0) -> Value:
    vals = [as_value(v) for v in values]
    if not vals:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[v.shape for v in vals]} do not conform") from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _result(out, vals, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(values: Sequence, axis=0) -> Value:
    vals = [as_value(v) for v in values]
    expanded = [reshape(v, v.shape[:axis] + (1,) + v.shape[axis:]) for v in vals]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False) -> Value:
    a = as_value(a)
    d = a.data
    out = np.asarray(np.sum(d, axis=axis, keepdims=keepdims, dtype=np.float64), dtype=d.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, d.shape).astype(d.dtype),)

    return _result(out, (a,), back)


def mean(a, axis=None, keepdims=False) -> Value:
    a = as_value(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / max(n, 1))


def prod(a, axis=-1) -> Value:
    """Product along one axis; the backward pass is exact even with zeros."""
    a = as_value(a)
    d = a.data
    out = np.asarray(np.prod(d, axis=axis, dtype=np.float64), dtype=d.dtype)

    def back(g):
        x = np.moveaxis(d, axis, -1).astype(np.float64)
        ones = np.ones(x.shape[:-1] + (1,))
        before = np.cumprod(np.concatenate([ones, x[..., :-1]], axis=-1), axis=-1)
        after = np.flip(np.cumprod(np.flip(np.concatenate([x[..., 1:], ones], axis=-1), -1), -1), -1)
        others = before * after
        ge = np.expand_dims(np.asarray(g, dtype=np.float64), -1)
        return (np.moveaxis(others * ge, -1, axis).astype(d.dtype),)

    return _result(out, (a,), back)


def softmax(a) -> Value:
    """Softmax over the last axis."""
    a = as_value(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(a.data.dtype)

    def back(g):
        inner = np.sum(g * s, axis=-1, keepdims=True, dtype=np.float64).astype(s.dtype)
        return (s * (g - inner),)

    return _result(s, (a,), back)


# ---------------------------------------------------------------- backward


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad`` and free the tape."""
    if loss.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Value] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=p.data.dtype)
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with global-norm clipping and a linearly decayed learning rate.

    The rate used for update ``k`` (0-based) is ``lr * (1 - k / horizon)``,
    floored at zero. ``horizon=None`` keeps it constant.
    """

    def __init__(self, params: Iterable[Value], lr=2.5e-4, horizon=None,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params]
        self.base_lr = lr
        self.horizon = horizon
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def current_lr(self):
        if not self.horizon:
            return self.base_lr
        return self.base_lr * max(0.0, 1.0 - self.step_count / self.horizon)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, global_clip=None, extra_grads=None):
        """Apply one update, then zero the gradients.

        ``extra_grads`` maps ``id(param)`` to an array added to that
        parameter's gradient before clipping.
        """
        grads = []
        for p in self.params:
            g = p.grad.astype(np.float64)
            if extra_grads and id(p) in extra_grads:
                g = g + extra_grads[id(p)]
            grads.append(g)
        if global_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > global_clip:
                scale = global_clip / (norm + 1e-12)
                grads = [g * scale for g in grads]
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)
        self.zero_grad()
        return lr

    def state_arrays(self):
        return self.m, self.v


def global_grad_norm(params: Iterable[Value]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))


# ---------------------------------------------------------------- gradient check


def check_gradients(loss_fn: Callable[[], Value], params: Sequence[Value], h=1e-3,
                    rtol=1e-4, atol=1e-6, max_entries=None, rng=None):
    """Compare autodiff gradients against central finite differences.

    ``loss_fn`` must rebuild the graph from the current parameter data on every
    call. Entries whose +h/-h evaluations take different branches of a
    non-smooth op are skipped. An entry passes when its relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|)`` is at most ``rtol``
    or, for gradients near zero, its absolute error is at most ``atol``.
    Returns a dict with the worst relative error over entries judged on
    relative error, the worst absolute error of entries that passed on the
    absolute bound, the number of entries checked and skipped, and the
    failing entries.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = worst_abs = 0.0
    checked = skipped = 0
    failures = []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for e in entries:
            orig = flat[e]
            flat[e] = orig + h
            with no_grad(), record_kinks() as k_plus:
                f_plus = float(loss_fn().data)
            flat[e] = orig - h
            with no_grad(), record_kinks() as k_minus:
                f_minus = float(loss_fn().data)
            flat[e] = orig
            if k_plus != k_minus:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic[pi].reshape(-1)[e])
            diff = abs(a - numeric)
            rel = diff / max(abs(a), abs(numeric), 1e-300)
            checked += 1
            if rel <= rtol or diff > atol:
                worst = max(worst, rel)
            else:
                worst_abs = max(worst_abs, diff)
            if rel > rtol and diff > atol:
                failures.append((p.name or f"param{pi}", int(e), a, numeric, rel))
    for p in params:
        p.zero_grad()
    return {"max_rel_error": worst, "max_abs_error_near_zero": worst_abs, "checked": checked,
            "skipped": skipped,
            "failures": failures}
