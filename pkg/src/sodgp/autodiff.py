"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records primitive applications eagerly. Every public op in
this module is *lifted*: called with plain arrays it simply computes the
value, called with at least one :class:`Node` it records onto that node's
tape. Model code is therefore written once and runs both on the tape during
training and on bare arrays during prediction and finite-difference checks.

Noise draws enter as constants, so gradients flow only through the
distribution parameters (pathwise / reparameterised gradients).
"""
from __future__ import annotations

import builtins
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit, logsumexp as _logsumexp

from .errors import DimensionMismatch, NonScalarRoot
from .numerics import DEFAULT_JITTER, batched_cholesky, batched_trsolve

__all__ = [
    "Node", "Tape", "record", "backward", "check_gradients", "value_and_grad",
    "add", "broadcast_add", "subtract", "multiply", "divide", "negative",
    "scalar_multiply", "matmul", "transpose", "einsum", "exp", "log", "sqrt",
    "softplus", "square", "maximum", "sum", "trace", "diagonal", "diag_embed",
    "fill_tril", "reshape", "getitem", "concatenate", "cholesky",
    "solve_triangular", "tri_inverse", "logsumexp", "value_of", "apply",
    "define_primitive",
]


class Primitive(NamedTuple):
    forward: Callable   # (*values, **attrs) -> (out, ctx)
    vjp: Callable       # (g, ctx, values, out, **attrs) -> tuple of input grads


_PRIMITIVES: dict[str, Primitive] = {}


def _primitive(name):
    def register(cls):
        _PRIMITIVES[name] = Primitive(cls.forward, cls.vjp)
        return cls
    return register


def define_primitive(name, forward, vjp):
    """Register a primitive from outside this module (e.g. a fused kernel)."""
    _PRIMITIVES[name] = Primitive(forward, vjp)


class Node:
    """A value on a tape together with how it was produced."""

    __slots__ = ("tape", "id", "op", "parents", "value", "requires_grad", "ctx", "attrs")
    __array_priority__ = 1000

    def __init__(self, tape, id, op, parents, value, requires_grad, ctx=None, attrs=None):
        self.tape = tape
        self.id = id
        self.op = op
        self.parents = parents
        self.value = value
        self.requires_grad = requires_grad
        self.ctx = ctx
        self.attrs = attrs or {}

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, power):
        if power != 2:
            raise NotImplementedError("only square is supported")
        return square(self)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """An ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameter_ids: set[int] = set()

    def _append(self, op, parents, value, requires_grad, ctx=None, attrs=None):
        node = Node(self, len(self.nodes), op, parents, value, requires_grad, ctx, attrs)
        self.nodes.append(node)
        return node

    def constant(self, value):
        return self._append("const", (), np.asarray(value, dtype=float), False)

    def parameter(self, value):
        node = self._append("param", (), np.array(value, dtype=float), True)
        self.parameter_ids.add(node.id)
        return node

    def record(self, op, inputs, **attrs):
        prim = _PRIMITIVES[op]
        parents = tuple(n if isinstance(n, Node) else self.constant(n) for n in inputs)
        for p in parents:
            if p.tape is not self:
                raise ValueError("inputs belong to a different tape")
        value, ctx = prim.forward(*(p.value for p in parents), **attrs)
        requires_grad = builtins.any(p.requires_grad for p in parents)
        return self._append(op, parents, value, requires_grad, ctx, attrs)

    def backward(self, root):
        """Gradients of the scalar ``root`` with respect to every parameter leaf."""
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.size != 1:
            raise NonScalarRoot(f"root has shape {root.value.shape}")
        adjoints = {root.id: np.ones_like(root.value)}
        grads = {}
        for node in reversed(self.nodes[: root.id + 1]):
            g = adjoints.pop(node.id, None)
            if g is None or not node.requires_grad:
                continue
            if not node.parents:
                grads[node.id] = g
                continue
            prim = _PRIMITIVES[node.op]
            values = [p.value for p in node.parents]
            pgrads = prim.vjp(g, node.ctx, values, node.value, **node.attrs)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in adjoints:
                    adjoints[parent.id] = adjoints[parent.id] + pg
                else:
                    adjoints[parent.id] = pg
        return {
            pid: grads.get(pid, np.zeros_like(self.nodes[pid].value))
            for pid in sorted(self.parameter_ids)
        }

    def clear(self):
        self.nodes.clear()
        self.parameter_ids.clear()


def record(tape, op, inputs, **attrs):
    return tape.record(op, inputs, **attrs)


def backward(tape, root):
    return tape.backward(root)


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _apply(op, *args, **attrs):
    tape = None
    for a in args:
        if isinstance(a, Node):
            tape = a.tape
            break
    if tape is None:
        return _PRIMITIVES[op].forward(
            *(np.asarray(a, dtype=float) for a in args), **attrs
        )[0]
    return tape.record(op, args, **attrs)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- elementwise

@_primitive("add")
class _Add:
    forward = staticmethod(lambda a, b: (a + b, None))
    vjp = staticmethod(lambda g, ctx, v, out: (_unbroadcast(g, v[0].shape),
                                               _unbroadcast(g, v[1].shape)))


_PRIMITIVES["broadcast_add"] = _PRIMITIVES["add"]


@_primitive("subtract")
class _Sub:
    forward = staticmethod(lambda a, b: (a - b, None))
    vjp = staticmethod(lambda g, ctx, v, out: (_unbroadcast(g, v[0].shape),
                                               _unbroadcast(-g, v[1].shape)))


@_primitive("multiply")
class _Mul:
    forward = staticmethod(lambda a, b: (a * b, None))
    vjp = staticmethod(lambda g, ctx, v, out: (_unbroadcast(g * v[1], v[0].shape),
                                               _unbroadcast(g * v[0], v[1].shape)))


@_primitive("divide")
class _Div:
    forward = staticmethod(lambda a, b: (a / b, None))
    vjp = staticmethod(lambda g, ctx, v, out: (_unbroadcast(g / v[1], v[0].shape),
                                               _unbroadcast(-g * out / v[1], v[1].shape)))


@_primitive("negative")
class _Neg:
    forward = staticmethod(lambda a: (-a, None))
    vjp = staticmethod(lambda g, ctx, v, out: (-g,))


@_primitive("scalar_multiply")
class _ScalarMul:
    forward = staticmethod(lambda a, c: (c * a, None))
    vjp = staticmethod(lambda g, ctx, v, out, c: (c * g,))


@_primitive("exp")
class _Exp:
    forward = staticmethod(lambda a: (np.exp(a), None))
    vjp = staticmethod(lambda g, ctx, v, out: (g * out,))


@_primitive("log")
class _Log:
    forward = staticmethod(lambda a: (np.log(a), None))
    vjp = staticmethod(lambda g, ctx, v, out: (g / v[0],))


@_primitive("sqrt")
class _Sqrt:
    forward = staticmethod(lambda a: (np.sqrt(a), None))

    @staticmethod
    def vjp(g, ctx, v, out):
        # zero subgradient at the origin keeps clamped variances finite
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)


@_primitive("softplus")
class _Softplus:
    forward = staticmethod(lambda a: (np.logaddexp(0.0, a), None))
    vjp = staticmethod(lambda g, ctx, v, out: (g * expit(v[0]),))


@_primitive("square")
class _Square:
    forward = staticmethod(lambda a: (a * a, None))
    vjp = staticmethod(lambda g, ctx, v, out: (2.0 * g * v[0],))


@_primitive("maximum")
class _Maximum:
    forward = staticmethod(lambda a, floor: (np.maximum(a, floor), None))
    vjp = staticmethod(lambda g, ctx, v, out, floor: (np.where(v[0] > floor, g, 0.0),))


# ---------------------------------------------------------------- reductions

@_primitive("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims), None

    @staticmethod
    def vjp(g, ctx, v, out, axis=None, keepdims=False):
        a = v[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)


@_primitive("logsumexp")
class _LogSumExp:
    @staticmethod
    def forward(a, axis=None):
        return _logsumexp(a, axis=axis), None

    @staticmethod
    def vjp(g, ctx, v, out, axis=None):
        if axis is None:
            return (g * np.exp(v[0] - out),)
        return (np.expand_dims(g, axis) * np.exp(v[0] - np.expand_dims(out, axis)),)


@_primitive("trace")
class _Trace:
    forward = staticmethod(lambda a: (np.trace(a, axis1=-2, axis2=-1), None))

    @staticmethod
    def vjp(g, ctx, v, out):
        n = v[0].shape[-1]
        return (np.asarray(g)[..., None, None] * np.eye(n),)


@_primitive("diagonal")
class _Diagonal:
    forward = staticmethod(lambda a: (np.diagonal(a, axis1=-2, axis2=-1).copy(), None))

    @staticmethod
    def vjp(g, ctx, v, out):
        return (_diag_embed_np(g),)


def _diag_embed_np(a):
    n = a.shape[-1]
    out = np.zeros(a.shape + (n,))
    idx = np.arange(n)
    out[..., idx, idx] = a
    return out


@_primitive("diag_embed")
class _DiagEmbed:
    forward = staticmethod(lambda a: (_diag_embed_np(a), None))
    vjp = staticmethod(lambda g, ctx, v, out: (np.diagonal(g, axis1=-2, axis2=-1).copy(),))


def tril_size(n):
    return n * (n + 1) // 2


def tril_order(p):
    n = int((np.sqrt(8 * p + 1) - 1) / 2)
    if tril_size(n) != p:
        raise DimensionMismatch(f"{p} is not a triangular number")
    return n


@_primitive("fill_tril")
class _FillTril:
    @staticmethod
    def forward(v):
        n = tril_order(v.shape[-1])
        rows, cols = np.tril_indices(n)
        out = np.zeros(v.shape[:-1] + (n, n))
        out[..., rows, cols] = v
        return out, (rows, cols)

    @staticmethod
    def vjp(g, ctx, v, out):
        rows, cols = ctx
        return (g[..., rows, cols],)


# ---------------------------------------------------------------- shape ops

@_primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(a, axes=None):
        return (np.swapaxes(a, -1, -2) if axes is None else np.transpose(a, axes)), None

    @staticmethod
    def vjp(g, ctx, v, out, axes=None):
        if axes is None:
            return (np.swapaxes(g, -1, -2),)
        return (np.transpose(g, np.argsort(axes)),)


@_primitive("reshape")
class _Reshape:
    forward = staticmethod(lambda a, shape: (np.reshape(a, shape), None))
    vjp = staticmethod(lambda g, ctx, v, out, shape: (np.reshape(g, v[0].shape),))


@_primitive("getitem")
class _GetItem:
    forward = staticmethod(lambda a, key: (a[key], None))

    @staticmethod
    def vjp(g, ctx, v, out, key):
        z = np.zeros_like(v[0])
        parts = key if isinstance(key, tuple) else (key,)
        if all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts):
            z[key] = g          # basic indexing never repeats an element
        else:
            np.add.at(z, key, g)
        return (z,)


@_primitive("concatenate")
class _Concatenate:
    @staticmethod
    def forward(*arrays, axis=0):
        return np.concatenate(arrays, axis=axis), None

    @staticmethod
    def vjp(g, ctx, v, out, axis=0):
        sizes = np.cumsum([a.shape[axis] for a in v])[:-1]
        return tuple(np.split(g, sizes, axis=axis))


# ---------------------------------------------------------------- linear algebra

@_primitive("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionMismatch("matmul operands must be at least 2-D")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionMismatch(f"matmul: {a.shape} @ {b.shape}")
        return a @ b, None

    @staticmethod
    def vjp(g, ctx, v, out):
        a, b = v
        return (_unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape))


def _parse_einsum(subscripts):
    if "->" not in subscripts:
        raise ValueError("einsum subscripts must be explicit ('...->...')")
    lhs, out = subscripts.replace(" ", "").split("->")
    return lhs.split(","), out


@_primitive("einsum")
class _Einsum:
    @staticmethod
    def forward(*operands, subscripts):
        return np.einsum(subscripts, *operands, optimize=len(operands) > 2), None

    @staticmethod
    def vjp(g, ctx, v, out, subscripts):
        ins, outs = _parse_einsum(subscripts)
        grads = []
        for k, (sk, op) in enumerate(zip(ins, v)):
            ell = sk.startswith("...")
            letters = sk[3:] if ell else sk
            others = [s for j, s in enumerate(ins) if j != k]
            seen = set("".join(others) + outs)
            keep = "".join(c for c in letters if c in seen)
            any_ell = "..." in outs or builtins.any(s.startswith("...") for s in others)
            target = ("..." if any_ell else "") + keep
            ops = [x for j, x in enumerate(v) if j != k] + [g]
            gk = np.einsum(",".join(others + [outs]) + "->" + target, *ops,
                           optimize=len(ops) > 2)
            current = list(keep)
            for c in letters:
                if c not in keep:
                    gk = gk[..., None]
                    current.append(c)
            nb = gk.ndim - len(current)
            perm = list(range(nb)) + [nb + current.index(c) for c in letters]
            gk = np.transpose(gk, perm)
            batch = op.shape[: op.ndim - len(letters)]
            if gk.shape[:nb] != batch:
                gk = _unbroadcast(gk, batch + gk.shape[nb:])
            grads.append(np.broadcast_to(gk, op.shape).copy())
        return tuple(grads)


@_primitive("cholesky")
class _Cholesky:
    @staticmethod
    def forward(a, policy=DEFAULT_JITTER):
        lower, jitter = batched_cholesky(a, policy)
        return lower, jitter

    @staticmethod
    def vjp(g, ctx, v, out, policy=DEFAULT_JITTER):
        lower = out
        p = np.tril(_swap(lower) @ g)
        idx = np.arange(lower.shape[-1])
        p[..., idx, idx] *= 0.5
        x = batched_trsolve(lower, p, transpose=True)          # L^-T P
        s = _swap(batched_trsolve(lower, _swap(x), transpose=True))  # L^-T P L^-1
        return (0.5 * (s + _swap(s)),)


@_primitive("solve_triangular")
class _SolveTriangular:
    @staticmethod
    def forward(l, b, transpose=False):
        if b.ndim < 2:
            raise DimensionMismatch("right-hand side must be at least 2-D on the tape")
        return batched_trsolve(l, b, transpose), None

    @staticmethod
    def vjp(g, ctx, v, out, transpose=False):
        l, b = v
        if transpose:
            gb = batched_trsolve(l, g, transpose=False)
            gl = -np.tril(out @ _swap(gb))
        else:
            gb = batched_trsolve(l, g, transpose=True)
            gl = -np.tril(gb @ _swap(out))
        return _unbroadcast(gl, l.shape), _unbroadcast(gb, b.shape)


@_primitive("tri_inverse")
class _TriInverse:
    @staticmethod
    def forward(l):
        eye = np.broadcast_to(np.eye(l.shape[-1]), l.shape)
        return batched_trsolve(l, eye), None

    @staticmethod
    def vjp(g, ctx, v, out):
        xt = _swap(out)
        return (-np.tril(xt @ g @ xt),)


# ---------------------------------------------------------------- lifted API

def apply(op, *args, **attrs):
    """Apply a registered primitive; records on a tape when any input is a node."""
    return _apply(op, *args, **attrs)

def add(a, b):
    return _apply("add", a, b)


def broadcast_add(a, b):
    return _apply("broadcast_add", a, b)


def subtract(a, b):
    return _apply("subtract", a, b)


def multiply(a, b):
    return _apply("multiply", a, b)


def divide(a, b):
    return _apply("divide", a, b)


def negative(a):
    return _apply("negative", a)


def scalar_multiply(a, c):
    return _apply("scalar_multiply", a, c=float(c))


def matmul(a, b):
    return _apply("matmul", a, b)


def transpose(a, axes=None):
    return _apply("transpose", a, axes=None if axes is None else tuple(axes))


def einsum(subscripts, *operands):
    return _apply("einsum", *operands, subscripts=subscripts)


def exp(a):
    return _apply("exp", a)


def log(a):
    return _apply("log", a)


def sqrt(a):
    return _apply("sqrt", a)


def softplus(a):
    return _apply("softplus", a)


def square(a):
    return _apply("square", a)


def maximum(a, floor):
    return _apply("maximum", a, floor=float(floor))


def sum(a, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply("sum", a, axis=axis, keepdims=keepdims)


def trace(a):
    return _apply("trace", a)


def diagonal(a):
    return _apply("diagonal", a)


def diag_embed(a):
    return _apply("diag_embed", a)


def fill_tril(v):
    return _apply("fill_tril", v)


def reshape(a, shape):
    return _apply("reshape", a, shape=tuple(shape))


def getitem(a, key):
    return _apply("getitem", a, key=key)


def concatenate(arrays, axis=0):
    return _apply("concatenate", *arrays, axis=axis)


def cholesky(a, policy=DEFAULT_JITTER):
    return _apply("cholesky", a, policy=policy)


def solve_triangular(l, b, transpose=False):
    return _apply("solve_triangular", l, b, transpose=bool(transpose))


def tri_inverse(l):
    """Inverse of a lower-triangular factor (batched)."""
    return _apply("tri_inverse", l)


def logsumexp(a, axis=None):
    return _apply("logsumexp", a, axis=axis)


# ---------------------------------------------------------------- drivers

def value_and_grad(f, params):
    """Evaluate ``f(*leaves)`` on a fresh tape and return (value, [grads])."""
    tape = Tape()
    leaves = [tape.parameter(p) for p in params]
    root = f(*leaves)
    grads = tape.backward(root)
    return float(root.value), [grads[leaf.id] for leaf in leaves]


def check_gradients(f, params, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``f`` must be deterministic: any noise it uses is fixed in advance.
    """
    params = [np.array(p, dtype=float) for p in params]
    _, grads = value_and_grad(f, params)
    worst = 0.0
    for k, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += h
            minus[k][idx] -= h
            fd = (float(f(*plus)) - float(f(*minus))) / (2.0 * h)
            err = abs(grads[k][idx] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
    return worst
