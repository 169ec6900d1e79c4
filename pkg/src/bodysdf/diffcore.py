"""Reverse-mode tape engine over dense float64 numpy arrays.

Spatial derivatives of a field are taken with 3-channel forward-mode dual
numbers whose primal arithmetic is itself recorded on the reverse tape
(reverse-over-forward), so parameter gradients of any function of a spatial
gradient come out of a single backward() call.
"""

from __future__ import annotations

import numpy as np

_F64 = np.float64


class DiffError(ValueError):
    """Raised on shape mismatches, non-finite values, or bad tape use."""


def _as_f64(x):
    a = np.asarray(x, dtype=_F64)
    return a


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    __slots__ = ("out_id", "in_ids", "fwd", "bwd")

    def __init__(self, out_id, in_ids, fwd, bwd):
        self.out_id = out_id
        self.in_ids = in_ids
        self.fwd = fwd
        self.bwd = bwd


class Tensor:
    """A float64 array recorded on a Tape. Do not mutate .data in place."""

    __slots__ = ("data", "tape", "id", "needs_grad", "name")

    def __init__(self, data, tape, tid, needs_grad, name=None):
        self.data = data
        self.tape = tape
        self.id = tid
        self.needs_grad = needs_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, needs_grad={self.needs_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self.tape.lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absval(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self, beta=1.0):
        return softplus(self, beta)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def l2norm(self, axis=-1, keepdims=False):
        return l2norm(self, axis, keepdims)

    def logsumexp(self, axis=None, keepdims=False):
        return logsumexp(self, axis, keepdims)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)


class Tape:
    """Single-writer record of primitive ops; replayable bit-identically.

    Evaluation of frozen parameters is pure; each thread should own its own
    Tape. `check_finite=False` skips the per-op NaN/Inf guard (hot loops
    re-check at the loss level instead).
    """

    def __init__(self, check_finite=True):
        self.nodes = []
        self.values = []  # Tensor per id, in creation order
        self.params = {}  # name -> Tensor
        self.check_finite = check_finite

    # -- leaves -------------------------------------------------------------

    def _new(self, data, needs_grad, name=None):
        t = Tensor(data, self, len(self.values), needs_grad, name)
        self.values.append(t)
        return t

    def param(self, data, name):
        """Register a trainable leaf."""
        if name in self.params:
            raise DiffError(f"duplicate parameter name {name!r}")
        data = _as_f64(data)
        if not np.all(np.isfinite(data)):
            raise DiffError(f"parameter {name!r} contains non-finite values")
        t = self._new(data, True, name)
        self.params[name] = t
        return t

    def constant(self, data):
        return self._new(_as_f64(data), False)

    def lift(self, x):
        """Wrap scalars/arrays as constants; pass Tensors through."""
        if isinstance(x, Tensor):
            return x
        return self.constant(x)

    # -- recording ----------------------------------------------------------

    def _record(self, out_data, in_tensors, fwd, bwd):
        if self.check_finite and not np.all(np.isfinite(out_data)):
            raise DiffError("non-finite value produced by tape operation")
        needs = any(t.needs_grad for t in in_tensors)
        out = self._new(out_data, needs)
        self.nodes.append(Node(out.id, tuple(t.id for t in in_tensors), fwd, bwd))
        return out

    def replay(self):
        """Recompute every node from the leaves, in recording order.

        Overwrites node outputs in place; returns the number of replayed ops.
        Used to validate bit-identical determinism of a recorded graph.
        """
        for node in self.nodes:
            ins = [self.values[i].data for i in node.in_ids]
            self.values[node.out_id].data = node.fwd(*ins)
        return len(self.nodes)

    # -- reverse sweep ------------------------------------------------------

    def backward(self, loss):
        """Reverse-mode gradients of a scalar loss for every registered param.

        Params not on the path get zero gradients; raises if no param is
        reachable at all.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise DiffError("loss must be a Tensor recorded on this tape")
        if loss.size != 1:
            raise DiffError(f"loss must be scalar, got shape {loss.shape}")
        grads = {loss.id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            contribs = node.bwd(g)
            for tid, contrib in contribs:
                t = self.values[tid]
                if not t.needs_grad:
                    continue
                acc = grads.get(tid)
                if acc is None:
                    grads[tid] = contrib
                else:
                    grads[tid] = acc + contrib
        out = {}
        touched = False
        for name, p in self.params.items():
            g = grads.get(p.id)
            if g is None:
                out[name] = np.zeros_like(p.data)
            else:
                out[name] = g
                touched = True
        if self.params and not touched:
            raise DiffError("loss is disconnected from all registered parameters")
        return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise DiffError("at least one operand must be a Tensor")


def _binary(a, b, fwd, bwd_maker):
    tape = _tape_of(a, b)
    a = tape.lift(a)
    b = tape.lift(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise DiffError(f"shape mismatch: {a.shape} vs {b.shape}") from e
    return tape._record(out, (a, b), fwd, bwd_maker(a, b))


def add(a, b):
    return _binary(a, b, np.add, lambda a, b: lambda g: (
        (a.id, _unbroadcast(g, a.shape)), (b.id, _unbroadcast(g, b.shape))))


def sub(a, b):
    return _binary(a, b, np.subtract, lambda a, b: lambda g: (
        (a.id, _unbroadcast(g, a.shape)), (b.id, _unbroadcast(-g, b.shape))))


def mul(a, b):
    return _binary(a, b, np.multiply, lambda a, b: lambda g: (
        (a.id, _unbroadcast(g * b.data, a.shape)),
        (b.id, _unbroadcast(g * a.data, b.shape))))


def div(a, b):
    return _binary(a, b, np.divide, lambda a, b: lambda g: (
        (a.id, _unbroadcast(g / b.data, a.shape)),
        (b.id, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))))


def neg(a):
    tape = a.tape
    return tape._record(-a.data, (a,), np.negative, lambda g: ((a.id, -g),))


def matmul(a, b):
    """Matrix product with numpy batch broadcasting on leading dims."""
    tape = _tape_of(a, b)
    a = tape.lift(a)
    b = tape.lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DiffError("matmul operands must have ndim >= 2")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DiffError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from e

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a.id, _unbroadcast(ga, a.shape)), (b.id, _unbroadcast(gb, b.shape)))

    return tape._record(out, (a, b), np.matmul, bwd)


def _unary(a, fwd, dfun):
    tape = a.tape

    def bwd(g):
        return ((a.id, g * dfun(a.data)),)

    return tape._record(fwd(a.data), (a,), fwd, bwd)


def sin(a):
    return _unary(a, np.sin, np.cos)


def cos(a):
    return _unary(a, np.cos, lambda x: -np.sin(x))


def exp(a):
    tape = a.tape
    out = np.exp(a.data)
    return tape._record(out, (a,), np.exp, lambda g: ((a.id, g * out),))


def log(a):
    return _unary(a, np.log, lambda x: 1.0 / x)


def sqrt(a):
    tape = a.tape
    out = np.sqrt(a.data)
    return tape._record(out, (a,), np.sqrt, lambda g: ((a.id, g * (0.5 / out)),))


def absval(a):
    # subgradient convention: d|z|/dz = 0 at z = 0
    return _unary(a, np.abs, np.sign)


def tanh(a):
    tape = a.tape
    out = np.tanh(a.data)
    return tape._record(out, (a,), np.tanh, lambda g: ((a.id, g * (1.0 - out * out)),))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    tape = a.tape
    out = _sigmoid_np(a.data)
    return tape._record(out, (a,), _sigmoid_np,
                        lambda g: ((a.id, g * out * (1.0 - out)),))


def _softplus_np(x, beta):
    # overflow-safe branch: z > 30/beta -> z
    z = beta * x
    out = np.where(z > 30.0, x, np.log1p(np.exp(np.minimum(z, 30.0))) / beta)
    return out


def softplus(a, beta=1.0):
    tape = a.tape
    beta = float(beta)
    out = _softplus_np(a.data, beta)

    def bwd(g):
        return ((a.id, g * _sigmoid_np(beta * a.data)),)

    return tape._record(out, (a,), lambda x: _softplus_np(x, beta), bwd)


def clamp(a, lo, hi):
    tape = a.tape
    lo = float(lo)
    hi = float(hi)
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        # pass-through strictly inside the interval, 0 outside/at the kinks
        mask = (a.data > lo) & (a.data < hi)
        return ((a.id, g * mask),)

    return tape._record(out, (a,), lambda x: np.clip(x, lo, hi), bwd)


def l2norm(a, axis=-1, keepdims=False):
    tape = a.tape

    def fwd(x):
        return np.sqrt(np.sum(x * x, axis=axis, keepdims=keepdims))

    out = fwd(a.data)

    def bwd(g):
        n = out if keepdims else np.expand_dims(out, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n == 0.0, 1.0, n)
        return ((a.id, gg * a.data / safe * (n != 0.0)),)

    return tape._record(out, (a,), fwd, bwd)


def logsumexp(a, axis=None, keepdims=False):
    tape = a.tape

    def fwd(x):
        m = np.max(x, axis=axis, keepdims=True)
        s = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
        if keepdims:
            return s
        return s.reshape(()) if axis is None else np.squeeze(s, axis=axis)

    out = fwd(a.data)

    def bwd(g):
        m = np.max(a.data, axis=axis, keepdims=True)
        e = np.exp(a.data - m)
        w = e / np.sum(e, axis=axis, keepdims=True)
        gg = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        return ((a.id, gg * w),)

    return tape._record(out, (a,), fwd, bwd)


def tsum(a, axis=None, keepdims=False):
    tape = a.tape

    def fwd(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    out = fwd(a.data)

    def bwd(g):
        if axis is None:
            return ((a.id, np.broadcast_to(g, a.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a.id, np.broadcast_to(gg, a.shape).copy()),)

    return tape._record(out, (a,), fwd, bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    tape = a.tape
    out = a.data.reshape(shape)
    return tape._record(out, (a,), lambda x: x.reshape(shape),
                        lambda g: ((a.id, g.reshape(a.shape)),))


def transpose(a, axes):
    tape = a.tape
    inv = np.argsort(axes)
    return tape._record(a.data.transpose(axes), (a,), lambda x: x.transpose(axes),
                        lambda g: ((a.id, g.transpose(inv)),))


def broadcast_to(a, shape):
    tape = a.tape
    out = np.broadcast_to(a.data, shape).copy()
    return tape._record(out, (a,), lambda x: np.broadcast_to(x, shape).copy(),
                        lambda g: ((a.id, _unbroadcast(g, a.shape)),))


def getitem(a, key):
    tape = a.tape
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=_F64)

    def bwd(g):
        z = np.zeros(a.shape)
        z[key] += g
        return ((a.id, z),)

    return tape._record(np.array(out, copy=True), (a,), lambda x: np.array(x[key], copy=True), bwd)


def concat(tensors, axis=0):
    tape = _tape_of(*tensors)
    tensors = [tape.lift(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t.id, g[tuple(idx)]))
        return pieces

    return tape._record(out, tuple(tensors), fwd, bwd)


def stack(tensors, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def where(mask, a, b):
    """Piecewise select with a constant boolean mask (fixed at trace time)."""
    tape = _tape_of(a, b)
    a = tape.lift(a)
    b = tape.lift(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def bwd(g):
        return ((a.id, _unbroadcast(g * mask, a.shape)),
                (b.id, _unbroadcast(g * ~mask, b.shape)))

    return tape._record(out, (a, b), lambda x, y: np.where(mask, x, y), bwd)


def pick(a, rows, cols):
    """Gather a[..., rows[k], cols[k]] over the last two axes -> (..., K)."""
    tape = a.tape
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = a.data[..., rows, cols]

    def bwd(g):
        z = np.zeros(a.shape)
        np.add.at(z, (..., rows, cols), g)
        return ((a.id, z),)

    return tape._record(np.array(out, copy=True), (a,),
                        lambda x: np.array(x[..., rows, cols], copy=True), bwd)


_RECORD_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "sin": sin, "cos": cos, "exp": exp, "log": log,
    "abs": absval, "sqrt": sqrt, "tanh": tanh, "sigmoid": sigmoid,
    "softplus": softplus, "logsumexp": logsumexp, "clamp": clamp,
    "l2norm": l2norm, "concat": concat, "sum": tsum, "mean": tmean,
}


def record(op_kind, *inputs, **kwargs):
    """Functional entry point: record a named primitive on the inputs' tape."""
    fn = _RECORD_OPS.get(op_kind)
    if fn is None:
        raise DiffError(f"unsupported primitive {op_kind!r}")
    if op_kind == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# forward-mode duals (3 directional-derivative channels) on the reverse tape
# ---------------------------------------------------------------------------


class Dual:
    """Primal Tensor plus tangent Tensor of shape (3,) + primal.shape.

    All tangent arithmetic is ordinary recorded tape ops, so reverse-mode
    differentiation of anything built from .tan works transparently.
    """

    __slots__ = ("val", "tan")

    def __init__(self, val, tan):
        if tan.shape != (3,) + val.shape:
            raise DiffError(f"tangent shape {tan.shape} does not match primal {val.shape}")
        self.val = val
        self.tan = tan

    @staticmethod
    def seed(tape, x):
        """Lift points (N, 3) into duals with identity direction channels."""
        x = tape.lift(x)
        n = x.shape[0]
        t = np.zeros((3, n, 3))
        for i in range(3):
            t[i, :, i] = 1.0
        return Dual(x, tape.constant(t))

    @staticmethod
    def const(tape, x):
        x = tape.lift(x)
        return Dual(x, tape.constant(np.zeros((3,) + x.shape)))

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.tan + other.tan)
        return Dual(self.val + other, self.tan)

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.tan - other.tan)
        return Dual(self.val - other, self.tan)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.tan * other.val + other.tan * self.val)
        return Dual(self.val * other, self.tan * other)

    def __matmul__(self, w):
        if isinstance(w, Dual):
            raise DiffError("dual @ dual is not needed; right operand must be constant in x")
        return Dual(self.val @ w, self.tan @ w)

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def _chain(self, out_val, deriv):
        return Dual(out_val, self.tan * deriv)

    def sin(self):
        return self._chain(self.val.sin(), self.val.cos())

    def cos(self):
        return self._chain(self.val.cos(), -self.val.sin())

    def exp(self):
        e = self.val.exp()
        return self._chain(e, e)

    def abs(self):
        # tangent factor is the (piecewise-constant) subgradient at trace time
        sgn = self.val.tape.constant(np.sign(self.val.data))
        return self._chain(self.val.abs(), sgn)

    def softplus(self, beta=1.0):
        return self._chain(self.val.softplus(beta), sigmoid(self.val * beta))

    def reshape(self, shape):
        return Dual(self.val.reshape(shape), self.tan.reshape((3,) + tuple(shape)))

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return Dual(self.val[key], self.tan[(slice(None),) + key])


def dual_concat(duals, axis):
    """Concatenate duals along a primal axis (tangent axis shifts by one)."""
    vals = concat([d.val for d in duals], axis=axis)
    tan_axis = axis if axis < 0 else axis + 1
    tans = concat([d.tan for d in duals], axis=tan_axis)
    return Dual(vals, tans)


def spatial_gradient(tape, field_fn, x):
    """Gradient of a scalar field at points x (N, 3).

    field_fn maps a Dual of points to a Dual of scalars (N,). Returns
    (value Tensor (N,), grad Tensor (N, 3)); both live on the tape, so
    losses of the gradient are differentiable w.r.t. parameters.
    """
    x = np.asarray(x, dtype=_F64) if not isinstance(x, Tensor) else x
    d = field_fn(Dual.seed(tape, x))
    if d.val.data.ndim != 1:
        raise DiffError(f"field must be scalar per point, got shape {d.val.shape}")
    grad = transpose(d.tan, (1, 0))
    return d.val, grad


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def check_gradient(loss_and_grads, params, eps=1e-4, max_checks=None, rng=None):
    """Max relative error of reverse-mode grads vs central finite differences.

    loss_and_grads(values: dict[str, ndarray], want_grads: bool) must return
    (loss: float, grads: dict or None) and be deterministic. Relative error
    per checked scalar is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|). When
    max_checks is given, that many parameter entries are sampled at random.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise DiffError(f"eps {eps} outside [1e-6, 1e-3]")
    base = {k: np.array(v, dtype=_F64) for k, v in params.items()}
    _, grads = loss_and_grads(base, True)

    entries = []
    for name in sorted(base):
        for flat in range(base[name].size):
            entries.append((name, flat))
    if max_checks is not None and max_checks < len(entries):
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(len(entries), size=max_checks, replace=False)
        entries = [entries[i] for i in sorted(idx)]

    worst = 0.0
    for name, flat in entries:
        v = base[name].reshape(-1)
        keep = v[flat]
        v[flat] = keep + eps
        up, _ = loss_and_grads(base, False)
        v[flat] = keep - eps
        dn, _ = loss_and_grads(base, False)
        v[flat] = keep
        g_fd = (up - dn) / (2.0 * eps)
        g_ad = grads[name].reshape(-1)[flat]
        rel = abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
        worst = max(worst, rel)
    return worst
