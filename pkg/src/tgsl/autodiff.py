"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Tape records primitive ops in execution order; backward() replays the
record in exact reverse order and accumulates gradients additively (fan-out
sum rule). Training runs in float32, verification suites in float64 —
gradient checks are unreliable in float32.
"""

import math

import numpy as np

__all__ = [
    "Tensor", "Tape", "no_grad", "verification_mode", "backward",
    "AdamState", "adam_step", "GradCheckResult", "grad_check",
    "forward_primitives", "param", "constant", "init_uniform",
    "add", "sub", "mul", "div", "scale", "matmul", "concat", "narrow",
    "reshape", "take", "segment_sum", "sigmoid", "relu", "tanh", "sin",
    "cos", "exp", "log", "sqrt", "clip", "sum_", "mean", "logsumexp",
    "softmax", "ShapeError", "NonFiniteError",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's algebra."""


class NonFiniteError(ValueError):
    """Non-finite values fed to a primitive while verification mode is on."""


# module-wide verification switch: when on, every primitive rejects
# non-finite inputs and soft clamps get flagged
_VERIFY = [False]


class verification_mode:
    def __enter__(self):
        self._prev = _VERIFY[0]
        _VERIFY[0] = True
        return self

    def __exit__(self, *exc):
        _VERIFY[0] = self._prev
        return False


def verify_active():
    return _VERIFY[0]


# ---------------------------------------------------------------------------
# tape

class _Entry:
    __slots__ = ("op", "inputs", "out", "bw")

    def __init__(self, op, inputs, out, bw):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bw = bw


class Tape:
    """Ordered record of executed primitives; also a context manager that
    makes itself the active recording target."""

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        assert _TAPE_STACK[-1] is self
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def backward(self, loss):
        """Reverse replay: add d(loss)/d(tensor) into .grad of every
        requires_grad tensor this tape touched. Each call contributes one
        full pass, so repeated calls accumulate additively."""
        if loss.values.size != 1:
            raise ShapeError(
                f"backward needs a scalar loss, got shape {loss.values.shape}")
        # per-pass working grads keep repeated backward calls exact
        work = {id(loss): np.ones_like(loss.values)}
        touched = {id(loss): loss}
        for entry in reversed(self.entries):
            out = entry.out
            g = work.get(id(out))
            if g is None:
                # not on a path to the loss: zero grids all around
                touched.setdefault(id(out), out)
                for t in entry.inputs:
                    if t.requires_grad:
                        touched.setdefault(id(t), t)
                continue
            grads = entry.bw(g)
            for t, gi in zip(entry.inputs, grads):
                if t.requires_grad and gi is not None:
                    key = id(t)
                    touched.setdefault(key, t)
                    prev = work.get(key)
                    work[key] = gi if prev is None else prev + gi
        for key, t in touched.items():
            t._ensure_grad()
            g = work.get(key)
            if g is not None:
                t._grad += g


class no_grad:
    """Suspend recording: ops executed inside produce requires_grad=False
    outputs and leave the active tape untouched."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss):
    """Backward through the tape that recorded `loss`."""
    if loss._tape is None:
        raise ValueError("loss was not produced under an active tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# tensor

class Tensor:
    __slots__ = ("values", "_grad", "requires_grad", "name", "_tape")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values)
        self._grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    # -- bookkeeping

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def grad(self):
        return self._grad

    def _ensure_grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.values)

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0

    def item(self):
        return float(self.values.reshape(()))

    def detach(self):
        return Tensor(self.values, requires_grad=False, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}{tag})"

    # -- operator sugar (thin wrappers over the functional primitives)

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def param(values, name=None, requires_grad=True):
    """A learnable leaf: owns a zero grad grid from birth."""
    t = Tensor(np.asarray(values), requires_grad=requires_grad, name=name)
    if requires_grad:
        t._ensure_grad()
    return t


def constant(values, name=None):
    return Tensor(np.asarray(values), requires_grad=False, name=name)


def init_uniform(shape, fan_in, rng, dtype=np.float32, name=None):
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return param(rng.uniform(-bound, bound, size=shape).astype(dtype), name=name)


# ---------------------------------------------------------------------------
# primitive machinery

def _check_finite(op, tensors):
    if _VERIFY[0]:
        for t in tensors:
            if not np.all(np.isfinite(t.values)):
                raise NonFiniteError(f"{op}: non-finite input (verification mode)")


def _record(op, inputs, out_values, bw):
    tape = _active_tape()
    rg = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=rg)
    if rg:
        out._tape = tape
        tape.entries.append(_Entry(op, inputs, out, bw))
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives

def add(a, b):
    _check_finite("add", (a, b))
    try:
        out = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    _check_finite("sub", (a, b))
    try:
        out = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    _check_finite("mul", (a, b))
    try:
        out = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.values, a.shape),
                              _unbroadcast(g * a.values, b.shape)))


def div(a, b):
    _check_finite("div", (a, b))
    try:
        out = a.values / b.values
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        ga = _unbroadcast(g / b.values, a.shape)
        gb = _unbroadcast(-g * a.values / (b.values * b.values), b.shape)
        return ga, gb

    return _record("div", (a, b), out, bw)


def scale(a, c):
    """Multiply by a python scalar constant (no gradient w.r.t. c)."""
    _check_finite("scale", (a,))
    c = float(c)
    return _record("scale", (a,), a.values * c, lambda g: (g * c,))


def matmul(a, b):
    """Matrix product on the last two axes, numpy @ semantics."""
    _check_finite("matmul", (a, b))
    if b.values.ndim < 2 or a.values.ndim < 1 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    out = a.values @ b.values

    def bw(g):
        bt = np.swapaxes(b.values, -1, -2)
        if a.values.ndim == 1:
            return g @ bt, np.outer(a.values, g)
        at = np.swapaxes(a.values, -1, -2)
        return (_unbroadcast(g @ bt, a.shape), _unbroadcast(at @ g, b.shape))

    return _record("matmul", (a, b), out, bw)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    _check_finite("concat", tensors)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tensors, out, bw)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis (the inverse piece of concat)."""
    _check_finite("narrow", (a,))
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}] outside axis {axis} of {a.shape}")
    idx = [slice(None)] * a.values.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.values)
        full[idx] = g
        return (full,)

    return _record("narrow", (a,), a.values[idx].copy(), bw)


def reshape(a, shape):
    _check_finite("reshape", (a,))
    out = a.values.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def take(a, indices):
    """Gather rows along axis 0; gradient scatter-adds back."""
    _check_finite("take", (a,))
    idx = np.asarray(indices)
    out = a.values[idx]

    def bw(g):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take", (a,), out, bw)


def segment_sum(a, segment_ids, num_segments):
    """Sum rows of a into num_segments buckets given per-row bucket ids."""
    _check_finite("segment_sum", (a,))
    seg = np.asarray(segment_ids)
    if seg.shape[0] != a.shape[0]:
        raise ShapeError(
            f"segment_sum: {seg.shape[0]} ids for {a.shape[0]} rows")
    out = np.zeros((num_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, seg, a.values)
    return _record("segment_sum", (a,), out, lambda g: (g[seg],))


def sigmoid(a):
    _check_finite("sigmoid", (a,))
    v = a.values
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a):
    # subgradient at 0 is 0 by convention
    _check_finite("relu", (a,))
    out = np.maximum(a.values, 0)
    return _record("relu", (a,), out, lambda g: (g * (a.values > 0),))


def tanh(a):
    _check_finite("tanh", (a,))
    out = np.tanh(a.values)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sin(a):
    _check_finite("sin", (a,))
    return _record("sin", (a,), np.sin(a.values),
                   lambda g: (g * np.cos(a.values),))


def cos(a):
    _check_finite("cos", (a,))
    return _record("cos", (a,), np.cos(a.values),
                   lambda g: (-g * np.sin(a.values),))


def exp(a):
    _check_finite("exp", (a,))
    out = np.exp(a.values)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a):
    _check_finite("log", (a,))
    return _record("log", (a,), np.log(a.values),
                   lambda g: (g / a.values,))


def sqrt(a):
    _check_finite("sqrt", (a,))
    out = np.sqrt(a.values)
    return _record("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def clip(a, lo, hi):
    """Clamp values; gradient is identity strictly inside (lo, hi)."""
    _check_finite("clip", (a,))
    out = np.clip(a.values, lo, hi)
    inside = (a.values > lo) & (a.values < hi)
    return _record("clip", (a,), out, lambda g: (g * inside,))


def sum_(a, axis=None, keepdims=False):
    _check_finite("sum", (a,))
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record("sum", (a,), out, bw)


def mean(a, axis=None, keepdims=False):
    _check_finite("mean", (a,))
    out = a.values.mean(axis=axis, keepdims=keepdims)
    n = a.values.size if axis is None else a.shape[axis]

    def bw(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _record("mean", (a,), out, bw)


def logsumexp(a, axis=None, keepdims=False):
    _check_finite("logsumexp", (a,))
    v = a.values
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(v - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    if keepdims:
        out = out_k
    elif axis is None:
        out = out_k.reshape(())
    else:
        out = np.squeeze(out_k, axis=axis)
    soft = e / s

    def bw(g):
        return (np.asarray(g).reshape(out_k.shape) * soft,)

    return _record("logsumexp", (a,), out, bw)


def softmax(a, axis=-1):
    """exp(a - logsumexp(a)), composed from recorded primitives."""
    return exp(sub(a, logsumexp(a, axis=axis, keepdims=True)))


_PRIMITIVES = {
    "matmul": matmul,
    "concat": concat,
    "add": add,
    "elementwise-multiply": mul,
    "sigmoid": sigmoid,
    "relu": relu,
    "sin": sin,
    "cos": cos,
    "mean-reduce": mean,
    "sum-reduce": sum_,
    "logsumexp": logsumexp,
    "scale": scale,
}


def forward_primitives(inputs, op, **kwargs):
    """Dispatch by op name; `concat` takes the whole input list, the rest
    unpack it as positional operands."""
    if op not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}; have {sorted(_PRIMITIVES)}")
    fn = _PRIMITIVES[op]
    if op == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    """Per-parameter moment grids plus the shared step counter."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]


def adam_step(params, state):
    """One bias-corrected Adam update; zeroes grads afterwards."""
    params = list(params)
    if len(params) != len(state.params) or any(
            p is not q for p, q in zip(params, state.params)):
        raise ValueError("adam_step: params do not match the state's params")
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: missing grad for parameter {p.name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking

class GradCheckResult:
    def __init__(self, max_rel_err, skipped, n_checked):
        self.max_rel_err = max_rel_err
        self.skipped = skipped          # list of (input index, flat coord)
        self.n_checked = n_checked

    def __repr__(self):
        return (f"GradCheckResult(max_rel_err={self.max_rel_err:.3e}, "
                f"checked={self.n_checked}, skipped={len(self.skipped)})")


def grad_check(fn, point, h=1e-5, kink_tol=1e-3):
    """Compare reverse-mode gradients of a scalar fn against central finite
    differences at `point` (a list of tensors or arrays), in float64.

    Coordinates where the two one-sided differences disagree (relu-style
    kinks) are skipped and reported in the result.
    """
    xs = [param(np.asarray(p.values if isinstance(p, Tensor) else p,
                           dtype=np.float64).copy(), name=f"x{i}")
          for i, p in enumerate(point)]

    with verification_mode():
        with Tape() as tape:
            y = fn(*xs)
            if y.values.size != 1:
                raise ShapeError("grad_check: fn must be scalar-valued")
            tape.backward(y)
        analytic = [x.grad.copy() for x in xs]

        def feval():
            # perturbed points may step outside a domain; the typed error
            # below replaces numpy's warning
            with no_grad(), np.errstate(invalid="ignore", divide="ignore"):
                out = fn(*xs).values
            if not np.all(np.isfinite(out)):
                raise NonFiniteError("grad_check: fn non-finite at perturbed point")
            return float(np.asarray(out).reshape(()))

        f0 = feval()
        max_err = 0.0
        skipped = []
        n_checked = 0
        for i, x in enumerate(xs):
            flat = x.values.reshape(-1)
            aflat = analytic[i].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = feval()
                flat[j] = orig - h
                fm = feval()
                flat[j] = orig
                central = (fp - fm) / (2 * h)
                d_plus = (fp - f0) / h
                d_minus = (f0 - fm) / h
                if abs(d_plus - d_minus) > kink_tol * max(1.0, abs(d_plus), abs(d_minus)):
                    skipped.append((i, j))
                    continue
                err = abs(aflat[j] - central) / max(1.0, abs(central))
                max_err = max(max_err, err)
                n_checked += 1
    return GradCheckResult(max_err, skipped, n_checked)
