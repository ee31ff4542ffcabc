"""Reverse-mode automatic differentiation on a define-by-run tape.

Every loss in the system is built from :class:`Value` nodes recorded on a
:class:`Tape`.  Values wrap float64 numpy arrays of any shape; elementwise
ops broadcast like numpy and reductions/gathers/scatters cover what the
renderers need.  The tape is rebuilt each iteration, so nodes are appended
in topological order by construction and backward is a single reverse sweep.

Gradients at ties of min/max/abs go to the first argument achieving the
extremum (deterministic subgradient).
"""
from __future__ import annotations

import numpy as np


class DomainError(ValueError):
    """Raised when an op is evaluated outside its mathematical domain."""


class ContractViolation(RuntimeError):
    """Raised when a caller breaks an operation's precondition."""


def _as64(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    nd = grad.ndim - len(shape)
    if nd > 0:
        grad = grad.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Value:
    """One node of the computation graph: data plus accumulated adjoint."""

    __slots__ = ("id", "tape", "data", "grad", "parents", "requires_grad",
                 "_fwd", "_bwd", "name")

    def __init__(self, tape, data, parents=(), fwd=None, bwd=None,
                 requires_grad=False, name=None):
        self.tape = tape
        self.data = data
        self.grad = np.zeros_like(data) if requires_grad and not parents else None
        self.parents = parents
        self.requires_grad = requires_grad
        self._fwd = fwd
        self._bwd = bwd
        self.name = name
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    # ---- helpers ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def _lift(self, other):
        if isinstance(other, Value):
            if other.tape is not self.tape:
                raise ContractViolation("values live on different tapes")
            return other
        return self.tape.constant(other)

    def __repr__(self):
        return f"Value(id={self.id}, shape={self.data.shape}, name={self.name})"

    # ---- elementwise arithmetic --------------------------------------

    def __add__(self, other):
        o = self._lift(other)
        return _binary(self, o, np.add,
                       lambda g, y, a, b: (_unbroadcast(g, a.shape),
                                           _unbroadcast(g, b.shape)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return _binary(self, o, np.subtract,
                       lambda g, y, a, b: (_unbroadcast(g, a.shape),
                                           _unbroadcast(-g, b.shape)), "sub")

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        o = self._lift(other)
        return _binary(self, o, np.multiply,
                       lambda g, y, a, b: (_unbroadcast(g * b, a.shape),
                                           _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        if np.any(o.data == 0.0):
            raise DomainError("division by zero")
        return _binary(self, o, np.divide,
                       lambda g, y, a, b: (_unbroadcast(g / b, a.shape),
                                           _unbroadcast(-g * a / (b * b), b.shape)),
                       "div")

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return _unary(self, np.negative, lambda g, y, a: -g, "neg")

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise ContractViolation("power expects a python scalar exponent")
        return _unary(self, lambda a: a ** n,
                      lambda g, y, a: g * n * a ** (n - 1), "pow")

    # ---- elementwise functions ---------------------------------------

    def exp(self):
        return _unary(self, np.exp, lambda g, y, a: g * y, "exp")

    def log(self):
        if np.any(self.data <= 0.0):
            raise DomainError("log of non-positive value")
        return _unary(self, np.log, lambda g, y, a: g / a, "log")

    def sqrt(self):
        if np.any(self.data < 0.0):
            raise DomainError("sqrt of negative value")
        return _unary(self, np.sqrt,
                      lambda g, y, a: g * 0.5 / np.maximum(y, 1e-300), "sqrt")

    def sigmoid(self):
        return _unary(self, _sigmoid, lambda g, y, a: g * y * (1.0 - y), "sigmoid")

    def tanh(self):
        return _unary(self, np.tanh, lambda g, y, a: g * (1.0 - y * y), "tanh")

    def relu(self):
        return _unary(self, lambda a: np.maximum(a, 0.0),
                      lambda g, y, a: g * (a >= 0.0), "relu")

    def softplus(self, beta=1.0):
        # log(1 + exp(beta*x)) / beta, numerically stable
        return _unary(self, lambda a: np.logaddexp(0.0, beta * a) / beta,
                      lambda g, y, a: g * _sigmoid(beta * a), "softplus")

    def abs(self):
        # subgradient at 0 goes to the non-negative branch
        return _unary(self, np.abs,
                      lambda g, y, a: g * np.where(a >= 0.0, 1.0, -1.0), "abs")

    def minimum(self, other):
        o = self._lift(other)
        return _binary(self, o, np.minimum,
                       lambda g, y, a, b: (_unbroadcast(g * (a <= b), a.shape),
                                           _unbroadcast(g * (a > b), b.shape)),
                       "min")

    def maximum(self, other):
        o = self._lift(other)
        return _binary(self, o, np.maximum,
                       lambda g, y, a, b: (_unbroadcast(g * (a >= b), a.shape),
                                           _unbroadcast(g * (a < b), b.shape)),
                       "max")

    # ---- reductions ---------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def bwd(g, y, a):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)
        return _nary([self], lambda a: np.sum(a, axis=axis, keepdims=keepdims),
                     bwd, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- linear algebra -------------------------------------------------

    def dot(self, other):
        o = self._lift(other)
        if self.data.ndim != 1 or o.data.ndim != 1:
            raise ContractViolation("dot expects two 1-D values")
        return _nary([self, o], lambda a, b: np.dot(a, b),
                     lambda g, y, a, b: (g * b, g * a), "dot")

    def matvec(self, v):
        o = self._lift(v)
        if self.data.ndim != 2 or o.data.ndim != 1:
            raise ContractViolation("matvec expects a matrix and a vector")
        return _nary([self, o], lambda a, b: a @ b,
                     lambda g, y, a, b: (np.outer(g, b), a.T @ g), "matvec")

    def matmul(self, other):
        o = self._lift(other)

        def bwd(g, y, a, b):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return _nary([self, o], lambda a, b: a @ b, bwd, "matmul")

    __matmul__ = matmul

    def norm(self, axis=-1, keepdims=False):
        """Euclidean norm along `axis`; gradient 0 at exact zero vectors."""
        def fwd(a):
            return np.sqrt(np.sum(a * a, axis=axis, keepdims=keepdims))

        def bwd(g, y, a):
            yk = y if keepdims else np.expand_dims(y, axis)
            gk = g if keepdims else np.expand_dims(g, axis)
            safe = np.where(yk == 0.0, 1.0, yk)
            return (np.where(yk == 0.0, 0.0, gk * a / safe),)

        return _nary([self], fwd, bwd, "norm")

    # ---- shape ops ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.data.shape
        return _nary([self], lambda a: a.reshape(shape),
                     lambda g, y, a: (g.reshape(old),), "reshape")

    def swapaxes(self, a1, a2):
        return _nary([self], lambda a: np.swapaxes(a, a1, a2),
                     lambda g, y, a: (np.swapaxes(g, a1, a2),), "swapaxes")

    def __getitem__(self, key):
        def bwd(g, y, a):
            z = np.zeros_like(a)
            np.add.at(z, key, g)
            return (z,)
        return _nary([self], lambda a: a[key], bwd, "getitem")

    # ---- gather / scatter ------------------------------------------------

    def gather(self, idx):
        """Rows ``self[idx]`` for an integer index array of any shape."""
        idx = np.asarray(idx)

        def bwd(g, y, a):
            z = np.zeros_like(a)
            flat = idx.ravel()
            if a.ndim == 1:
                z[:] = np.bincount(flat, weights=g.ravel(), minlength=a.shape[0])
            else:
                g2 = g.reshape(-1, int(np.prod(a.shape[1:])))
                acc = np.empty((a.shape[0], g2.shape[1]))
                for j in range(g2.shape[1]):
                    acc[:, j] = np.bincount(flat, weights=g2[:, j],
                                            minlength=a.shape[0])
                z[:] = acc.reshape(a.shape)
            return (z,)

        return _nary([self], lambda a: a[idx], bwd, "gather")

    def take_along(self, idx):
        """``take_along_axis`` on the last axis with a constant index."""
        idx = np.asarray(idx)

        def bwd(g, y, a):
            z = np.zeros_like(a)
            nlead = a.ndim - 1
            lead = tuple(
                np.arange(s).reshape((1,) * i + (s,) + (1,) * (nlead - i))
                for i, s in enumerate(a.shape[:-1]))
            np.add.at(z, lead + (idx,), g)
            return (z,)

        return _nary([self], lambda a: np.take_along_axis(a, idx, axis=-1),
                     bwd, "take_along")

    def index_add(self, idx, v):
        """Copy of self with ``out[idx] += v``; idx must hold unique ints."""
        o = self._lift(v)
        idx = np.asarray(idx)

        def fwd(a, b):
            out = a.copy()
            out[idx] += b
            return out

        def bwd(g, y, a, b):
            return (g.copy(), _unbroadcast(g[idx], b.shape))

        return _nary([self, o], fwd, bwd, "index_add")

    def index_mul(self, idx, v):
        """Copy of self with ``out[idx] *= v``; idx must hold unique ints."""
        o = self._lift(v)
        idx = np.asarray(idx)

        def fwd(a, b):
            out = a.copy()
            out[idx] = out[idx] * b
            return out

        def bwd(g, y, a, b):
            ga = g.copy()
            ga[idx] = g[idx] * b
            return (ga, _unbroadcast(g[idx] * a[idx], b.shape))

        return _nary([self, o], fwd, bwd, "index_mul")

    # ---- sequential products ----------------------------------------------

    def cumprod_exclusive(self, axis=-1):
        """T_i = prod_{j<i} a_j along `axis` (T_0 = 1)."""
        def fwd(a):
            shifted = np.roll(a, 1, axis=axis)
            sl = [slice(None)] * a.ndim
            sl[axis] = 0
            shifted[tuple(sl)] = 1.0
            return np.cumprod(shifted, axis=axis)

        def bwd(g, y, a):
            # dL/da_k = sum_{i>k} g_i * y_i / a_k  with a zero-safe fallback
            am = np.moveaxis(a, axis, -1)
            gm = np.moveaxis(g, axis, -1)
            ym = np.moveaxis(y, axis, -1)
            c = gm * ym
            rev = np.flip(np.cumsum(np.flip(c, -1), -1), -1)
            suffix = np.zeros_like(am)
            suffix[..., :-1] = rev[..., 1:]
            zero = am == 0.0
            safe = np.where(zero, 1.0, am)
            out = suffix / safe
            if np.any(zero):
                flat_a = am.reshape(-1, am.shape[-1])
                flat_g = gm.reshape(-1, am.shape[-1])
                flat_o = out.reshape(-1, am.shape[-1])
                rows = np.nonzero(zero.reshape(-1, am.shape[-1]).any(axis=1))[0]
                n = am.shape[-1]
                for r in rows:
                    av, gv = flat_a[r], flat_g[r]
                    for k in range(n):
                        s = 0.0
                        for i in range(k + 1, n):
                            p = 1.0
                            for j in range(i):
                                if j != k:
                                    p *= av[j]
                            s += gv[i] * p
                        flat_o[r, k] = s
            return (np.moveaxis(out, -1, axis),)

        return _nary([self], fwd, bwd, "cumprod_exclusive")


def _sigmoid(x):
    # overflow-free for any sign; works on scalars and 0-d arrays too
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def _nary(parents, fwd, bwd, name):
    tape = parents[0].tape
    data = fwd(*[p.data for p in parents])
    req = any(p.requires_grad for p in parents)
    return Value(tape, _as64(data), tuple(parents), fwd, bwd, req, name)


def _unary(a, fwd, bwd, name):
    return _nary([a], fwd, lambda g, y, x: (bwd(g, y, x),), name)


def _binary(a, b, fwd, bwd, name):
    return _nary([a, b], fwd, bwd, name)


def stack(values, axis=0):
    """Stack Values along a new axis."""
    def bwd(g, y, *datas):
        return tuple(np.take(g, i, axis=axis) for i in range(len(datas)))
    return _nary(list(values), lambda *ds: np.stack(ds, axis=axis), bwd, "stack")


def concat(values, axis=0):
    """Concatenate Values along an existing axis."""
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, y, *datas):
        outs = []
        for i in range(len(datas)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _nary(list(values), lambda *ds: np.concatenate(ds, axis=axis),
                 bwd, "concat")


def where(mask, a, b):
    """Select with a constant boolean mask (no gradient w.r.t. mask)."""
    mask = np.asarray(mask, dtype=bool)
    tape = a.tape if isinstance(a, Value) else b.tape
    a = tape._coerce(a)
    b = tape._coerce(b)

    def bwd(g, y, da, db):
        return (_unbroadcast(np.where(mask, g, 0.0), da.shape),
                _unbroadcast(np.where(mask, 0.0, g), db.shape))

    return _nary([a, b], lambda da, db: np.where(mask, da, db), bwd, "where")


class Tape:
    """Ordered record of operations; append order is topological order."""

    def __init__(self):
        self.nodes: list[Value] = []

    def leaf(self, data, name=None):
        """A trainable input node (gradient accumulated on backward)."""
        return Value(self, _as64(data), requires_grad=True, name=name)

    def constant(self, data, name=None):
        """A node that never receives gradient."""
        return Value(self, _as64(data), requires_grad=False, name=name)

    def _coerce(self, x):
        return x if isinstance(x, Value) else self.constant(x)

    def backward(self, output, seed=None):
        """Reverse sweep from `output`; returns {leaf Value: gradient}.

        `output` must be scalar unless an explicit `seed` adjoint is given
        (vector-Jacobian entry point used by the rasterizer backward).
        """
        if seed is None:
            if output.data.size != 1:
                raise ContractViolation("backward expects a scalar output")
            seed = np.ones_like(output.data)
        else:
            seed = _as64(seed)
            if seed.shape != output.data.shape:
                raise ContractViolation("seed shape must match output shape")
        for n in self.nodes:
            n.grad = None
        output.grad = seed.copy()
        for n in reversed(self.nodes):
            if n.grad is None or not n.parents or not n.requires_grad:
                continue
            grads = n._bwd(n.grad, n.data, *[p.data for p in n.parents])
            for p, g in zip(n.parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += g
        return {n: n.grad for n in self.nodes
                if n.requires_grad and not n.parents and n.grad is not None}

    def replay(self):
        """Recompute every node's data from current leaf data, in order."""
        for n in self.nodes:
            if n.parents:
                n.data = _as64(n._fwd(*[p.data for p in n.parents]))


_OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "exp": lambda a: a.exp(),
    "log": lambda a: a.log(),
    "sqrt": lambda a: a.sqrt(),
    "sigmoid": lambda a: a.sigmoid(),
    "tanh": lambda a: a.tanh(),
    "relu": lambda a: a.relu(),
    "min": lambda a, b: a.minimum(b),
    "max": lambda a, b: a.maximum(b),
    "abs": lambda a: a.abs(),
    "dot": lambda a, b: a.dot(b),
    "matvec": lambda a, b: a.matvec(b),
    "matmul": lambda a, b: a.matmul(b),
    "sum": lambda a: a.sum(),
    "clamp-at-zero": lambda a: a.relu(),
}


def forward_op(op, inputs):
    """Apply a named primitive to Values already living on one tape."""
    if op not in _OPS:
        raise ContractViolation(f"unknown op {op!r}")
    tapes = {v.tape for v in inputs if isinstance(v, Value)}
    if len(tapes) > 1:
        raise ContractViolation("inputs live on different tapes")
    return _OPS[op](*inputs)


def grad_check(f, xs, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    `f` receives one leaf Value per array in `xs` (bound to a fresh tape)
    and must return a scalar Value.  Relative error per coordinate is
    |analytic - fd| / max(1, |fd|).
    """
    xs = [_as64(x) for x in xs]

    def run(arrs):
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrs]
        out = f(*leaves)
        return tape, leaves, out

    tape, leaves, out = run(xs)
    tape.backward(out)
    analytic = [np.zeros_like(x) if l.grad is None else l.grad.copy()
                for x, l in zip(xs, leaves)]

    worst = 0.0
    for i, x in enumerate(xs):
        flat = x.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(run(xs)[2].data)
            flat[j] = orig - eps
            fm = float(run(xs)[2].data)
            flat[j] = orig
            fd = (fp - fm) / (2.0 * eps)
            err = abs(analytic[i].ravel()[j] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
