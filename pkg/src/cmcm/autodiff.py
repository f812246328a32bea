"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation eagerly: the forward value is
computed when the node is appended, and :meth:`Tape.backward` sweeps the
tape in reverse to accumulate adjoints.  Nodes overload the arithmetic
operators so model code reads like ordinary numpy::

    tape = Tape()
    x = tape.variable([2.0])
    y = tape.variable([3.0])
    f = (x * y).sum()
    grads = tape.backward(f)      # {x.id: [3.], y.id: [2.], ...}
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Sequence

import numpy as np
from scipy import special

from .errors import DomainError, NonScalarRoot, ShapeMismatch

__all__ = [
    "Node", "Tape", "finite_diff_check", "value_and_grad",
    "exp", "log", "log1p", "expm1", "sigmoid", "tanh", "softplus", "erf",
    "lgamma", "log_ndtr", "clamp", "softmax", "logsumexp", "concat", "t_quantile",
]

_SQRT_PI = math.sqrt(math.pi)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast shapes {shapes}") from None


# -- forward / backward rules ------------------------------------------------
# Each rule: forward(values, attrs) -> ndarray
#            backward(g, values, out, attrs) -> tuple of input gradients

def _f_add(v, a):
    _broadcast_check("add", v[0].shape, v[1].shape)
    return v[0] + v[1]


def _b_add(g, v, out, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _f_sub(v, a):
    _broadcast_check("sub", v[0].shape, v[1].shape)
    return v[0] - v[1]


def _b_sub(g, v, out, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)


def _f_mul(v, a):
    _broadcast_check("mul", v[0].shape, v[1].shape)
    return v[0] * v[1]


def _b_mul(g, v, out, a):
    return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)


def _f_div(v, a):
    _broadcast_check("div", v[0].shape, v[1].shape)
    if np.any(v[1] == 0):
        raise DomainError("div: division by zero")
    return v[0] / v[1]


def _b_div(g, v, out, a):
    x, y = v
    return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)


def _f_matmul(v, a):
    x, y = v
    if x.ndim not in (1, 2) or y.ndim not in (1, 2):
        raise ShapeMismatch("matmul: operands must be 1-D or 2-D")
    if x.shape[-1] != y.shape[0]:
        raise ShapeMismatch(f"matmul: {x.shape} @ {y.shape}")
    return x @ y


def _b_matmul(g, v, out, a):
    x, y = v
    if x.ndim == 2 and y.ndim == 2:
        return g @ y.T, x.T @ g
    if x.ndim == 2:
        return np.outer(g, y), x.T @ g
    if y.ndim == 2:
        return y @ g, np.outer(x, g)
    return g * y, g * x


def _f_transpose(v, a):
    return np.transpose(v[0], a.get("axes"))


def _b_transpose(g, v, out, a):
    axes = a.get("axes")
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def _f_reshape(v, a):
    try:
        return v[0].reshape(a["shape"])
    except ValueError:
        raise ShapeMismatch(f"reshape: {v[0].shape} -> {a['shape']}") from None


def _b_reshape(g, v, out, a):
    return (g.reshape(v[0].shape),)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _f_sum(v, a):
    return np.sum(v[0], axis=a.get("axis"), keepdims=a.get("keepdims", False))


def _b_sum(g, v, out, a):
    return (_expand_reduced(g, v[0].shape, a.get("axis"), a.get("keepdims", False)).copy(),)


def _f_mean(v, a):
    return np.mean(v[0], axis=a.get("axis"), keepdims=a.get("keepdims", False))


def _b_mean(g, v, out, a):
    count = v[0].size / max(out.size, 1)
    return (_expand_reduced(g, v[0].shape, a.get("axis"), a.get("keepdims", False)) / count,)


def _f_exp(v, a):
    return np.exp(v[0])


def _b_exp(g, v, out, a):
    return (g * out,)


def _f_log(v, a):
    if np.any(v[0] <= 0):
        raise DomainError("log: operand must be positive")
    return np.log(v[0])


def _b_log(g, v, out, a):
    return (g / v[0],)


def _f_log1p(v, a):
    if np.any(v[0] <= -1):
        raise DomainError("log1p: operand must exceed -1")
    return np.log1p(v[0])


def _b_log1p(g, v, out, a):
    return (g / (1.0 + v[0]),)


def _f_expm1(v, a):
    return np.expm1(v[0])


def _b_expm1(g, v, out, a):
    return (g * (out + 1.0),)


def _f_pow(v, a):
    base = v[0]
    if len(v) == 2:
        _broadcast_check("pow", base.shape, v[1].shape)
        if np.any(base < 0):
            raise DomainError("pow: negative base with a variable exponent")
        return np.power(base, v[1])
    p = a["p"]
    if np.any(base < 0) and float(p) != int(p):
        raise DomainError("pow: negative base with a non-integer exponent")
    if np.any(base == 0) and p < 0:
        raise DomainError("pow: zero base with a negative exponent")
    return np.power(base, p)


def _b_pow(g, v, out, a):
    base = v[0]
    if len(v) == 2:
        p = v[1]
        d_base = p * np.power(base, p - 1.0)
        with np.errstate(divide="ignore"):
            logb = np.where(base > 0, np.log(np.where(base > 0, base, 1.0)), 0.0)
        return (_unbroadcast(g * d_base, base.shape),
                _unbroadcast(g * out * logb, p.shape))
    p = a["p"]
    return (g * p * np.power(base, p - 1.0),)


def _f_neg(v, a):
    return -v[0]


def _b_neg(g, v, out, a):
    return (-g,)


def _f_sigmoid(v, a):
    return special.expit(v[0])


def _b_sigmoid(g, v, out, a):
    return (g * out * (1.0 - out),)


def _f_tanh(v, a):
    return np.tanh(v[0])


def _b_tanh(g, v, out, a):
    return (g * (1.0 - out * out),)


def _f_softplus(v, a):
    return np.logaddexp(0.0, v[0])


def _b_softplus(g, v, out, a):
    return (g * special.expit(v[0]),)


def _f_softmax(v, a):
    return special.softmax(v[0], axis=a.get("axis", -1))


def _b_softmax(g, v, out, a):
    axis = a.get("axis", -1)
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _f_logsumexp(v, a):
    return special.logsumexp(v[0], axis=a.get("axis"), keepdims=a.get("keepdims", False))


def _b_logsumexp(g, v, out, a):
    axis, keep = a.get("axis"), a.get("keepdims", False)
    shape = v[0].shape
    g_full = _expand_reduced(g, shape, axis, keep)
    out_full = _expand_reduced(out, shape, axis, keep)
    return (g_full * np.exp(v[0] - out_full),)


def _f_erf(v, a):
    return special.erf(v[0])


def _b_erf(g, v, out, a):
    return (g * (2.0 / _SQRT_PI) * np.exp(-v[0] * v[0]),)


def _f_log_ndtr(v, a):
    return special.log_ndtr(v[0])


def _b_log_ndtr(g, v, out, a):
    # d/dx log Phi(x) = phi(x) / Phi(x), formed in log space for the left tail
    return (g * np.exp(-0.5 * v[0] * v[0] - 0.5 * math.log(2.0 * math.pi) - out),)


def _f_lgamma(v, a):
    if np.any(v[0] <= 0):
        raise DomainError("lgamma: operand must be positive")
    return special.gammaln(v[0])


def _b_lgamma(g, v, out, a):
    return (g * special.digamma(v[0]),)


def _f_clamp(v, a):
    return np.clip(v[0], a["lo"], a["hi"])


def _b_clamp(g, v, out, a):
    x = v[0]
    inside = (x >= a["lo"]) & (x <= a["hi"])
    return (g * inside,)


def _f_concat(v, a):
    try:
        return np.concatenate(v, axis=a.get("axis", 0))
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None


def _b_concat(g, v, out, a):
    axis = a.get("axis", 0)
    cuts = np.cumsum([x.shape[axis] for x in v])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _f_slice(v, a):
    return v[0][a["key"]]


def _b_slice(g, v, out, a):
    grad = np.zeros_like(v[0])
    np.add.at(grad, a["key"], g)
    return (grad,)


def _f_broadcast(v, a):
    _broadcast_check("broadcast", v[0].shape, a["shape"])
    return np.array(np.broadcast_to(v[0], a["shape"]))


def _b_broadcast(g, v, out, a):
    return (_unbroadcast(g, v[0].shape),)


def _student_pdf(x, nu):
    logp = (special.gammaln((nu + 1.0) / 2.0) - special.gammaln(nu / 2.0)
            - 0.5 * np.log(nu * np.pi) - (nu + 1.0) / 2.0 * np.log1p(x * x / nu))
    return np.exp(logp)


def _f_t_quantile(v, a):
    u, nu = v
    if np.any((u <= 0) | (u >= 1)):
        raise DomainError("t_quantile: probability must lie in (0, 1)")
    if np.any(nu <= 0):
        raise DomainError("t_quantile: degrees of freedom must be positive")
    return special.stdtrit(nu, u)


def _b_t_quantile(g, v, out, a):
    u, nu = v
    nu_b = np.broadcast_to(nu, out.shape)
    pdf = _student_pdf(out, nu_b)
    # implicit differentiation of F(x(u, nu); nu) = u
    h = 1e-5 * np.maximum(1.0, nu_b)
    dF_dnu = (special.stdtr(nu_b + h, out) - special.stdtr(nu_b - h, out)) / (2.0 * h)
    return (_unbroadcast(g / pdf, u.shape), _unbroadcast(-g * dF_dnu / pdf, nu.shape))


_OPS = {
    "add": (_f_add, _b_add),
    "sub": (_f_sub, _b_sub),
    "mul": (_f_mul, _b_mul),
    "div": (_f_div, _b_div),
    "matmul": (_f_matmul, _b_matmul),
    "transpose": (_f_transpose, _b_transpose),
    "reshape": (_f_reshape, _b_reshape),
    "sum": (_f_sum, _b_sum),
    "mean": (_f_mean, _b_mean),
    "exp": (_f_exp, _b_exp),
    "log": (_f_log, _b_log),
    "log1p": (_f_log1p, _b_log1p),
    "expm1": (_f_expm1, _b_expm1),
    "pow": (_f_pow, _b_pow),
    "neg": (_f_neg, _b_neg),
    "sigmoid": (_f_sigmoid, _b_sigmoid),
    "tanh": (_f_tanh, _b_tanh),
    "softplus": (_f_softplus, _b_softplus),
    "softmax": (_f_softmax, _b_softmax),
    "logsumexp": (_f_logsumexp, _b_logsumexp),
    "erf": (_f_erf, _b_erf),
    "lgamma": (_f_lgamma, _b_lgamma),
    "log_ndtr": (_f_log_ndtr, _b_log_ndtr),
    "clamp": (_f_clamp, _b_clamp),
    "concat": (_f_concat, _b_concat),
    "slice": (_f_slice, _b_slice),
    "broadcast": (_f_broadcast, _b_broadcast),
    "t_quantile": (_f_t_quantile, _b_t_quantile),
}

SUPPORTED_OPS = frozenset(_OPS)


class Node:
    """One entry on a :class:`Tape`: an eagerly computed value plus its recipe."""

    __slots__ = ("tape", "id", "op", "inputs", "attrs", "value", "requires_grad", "adjoint")
    __array_ufunc__ = None  # ndarray <op> Node defers to the reflected Node method

    def __init__(self, tape, id, op, inputs, attrs, value, requires_grad):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.requires_grad = requires_grad
        self.adjoint = None

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
        return self.tape.record("transpose", [self])

    def _lift(self, other):
        return self.tape.lift(other)

    def __add__(self, other):
        return self.tape.record("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.tape.record("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.tape.record("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.record("sub", [self._lift(other), self])

    def __mul__(self, other):
        return self.tape.record("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return self.tape.record("mul", [self._lift(other), self])

    def __truediv__(self, other):
        return self.tape.record("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self.tape.record("div", [self._lift(other), self])

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, self._lift(other)])

    def __rmatmul__(self, other):
        return self.tape.record("matmul", [self._lift(other), self])

    def __pow__(self, p):
        if isinstance(p, Node):
            return self.tape.record("pow", [self, p])
        return self.tape.record("pow", [self], p=float(p))

    def __neg__(self):
        return self.tape.record("neg", [self])

    def __getitem__(self, key):
        return self.tape.record("slice", [self], key=key)

    def sum(self, axis=None, keepdims=False):
        return self.tape.record("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.record("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.record("reshape", [self], shape=shape)


class Tape:
    """Append-only record of operations; single writer."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, attrs, value, requires_grad):
        node = Node(self, len(self.nodes), op, tuple(inputs), attrs, value, requires_grad)
        self.nodes.append(node)
        return node

    def variable(self, value) -> Node:
        """Leaf whose gradient is wanted (a trainable parameter or input)."""
        return self._append("variable", (), {}, np.array(value, dtype=np.float64), True)

    def constant(self, value) -> Node:
        return self._append("constant", (), {}, np.array(value, dtype=np.float64), False)

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.constant(x)

    def _node(self, ref) -> Node:
        if isinstance(ref, Node):
            return ref
        return self.nodes[ref]

    def record(self, op: str, inputs: Sequence, **attrs) -> Node:
        """Append ``op`` applied to ``inputs`` and evaluate it immediately.

        ``inputs`` may be nodes, node ids, or raw arrays (lifted to constants).
        Raises :class:`ShapeMismatch` for incompatible operands and
        :class:`DomainError` for invalid operands or non-finite results.
        """
        try:
            forward = _OPS[op][0]
        except KeyError:
            raise ValueError(f"unsupported op {op!r}") from None
        nodes = [self._node(x) if isinstance(x, (Node, int)) else self.constant(x)
                 for x in inputs]
        with np.errstate(all="ignore"):
            value = np.asarray(forward([n.value for n in nodes], attrs), dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise DomainError(f"{op}: non-finite result")
        requires_grad = any(n.requires_grad for n in nodes)
        return self._append(op, [n.id for n in nodes], attrs, value, requires_grad)

    def backward(self, root) -> Dict[int, np.ndarray]:
        """Reverse sweep from a scalar ``root``; returns ``{node id: gradient}``.

        Only nodes that depend on a variable receive an entry.
        """
        root = self._node(root)
        if root.value.shape != ():
            raise NonScalarRoot(f"backward root must be scalar, got shape {root.value.shape}")
        adj = {root.id: np.ones(())}
        nodes = self.nodes
        for i in range(root.id, -1, -1):
            g = adj.get(i)
            if g is None:
                continue
            node = nodes[i]
            node.adjoint = g
            if not node.inputs:
                continue
            ins = [nodes[j] for j in node.inputs]
            with np.errstate(all="ignore"):
                grads = _OPS[node.op][1](g, [n.value for n in ins], node.value, node.attrs)
            for inp, gi in zip(ins, grads):
                if gi is None or not inp.requires_grad:
                    continue
                prev = adj.get(inp.id)
                adj[inp.id] = gi if prev is None else prev + gi
        return adj

    def grad(self, root, wrt: Sequence[Node]):
        """Gradients of ``root`` with respect to each node in ``wrt`` (zeros if unreached)."""
        adj = self.backward(root)
        return [adj.get(n.id, np.zeros_like(n.value)) for n in wrt]


# -- functional wrappers -----------------------------------------------------

def _unary(op):
    def f(x, **attrs):
        return x.tape.record(op, [x], **attrs)
    f.__name__ = op
    return f


exp = _unary("exp")
log = _unary("log")
log1p = _unary("log1p")
expm1 = _unary("expm1")
sigmoid = _unary("sigmoid")
tanh = _unary("tanh")
softplus = _unary("softplus")
erf = _unary("erf")
lgamma = _unary("lgamma")
log_ndtr = _unary("log_ndtr")


def clamp(x: Node, lo: float, hi: float) -> Node:
    """Clip to ``[lo, hi]``; identity gradient inside, zero outside."""
    return x.tape.record("clamp", [x], lo=lo, hi=hi)


def softmax(x: Node, axis=-1) -> Node:
    return x.tape.record("softmax", [x], axis=axis)


def logsumexp(x: Node, axis=None, keepdims=False) -> Node:
    return x.tape.record("logsumexp", [x], axis=axis, keepdims=keepdims)


def concat(xs: Sequence[Node], axis=0) -> Node:
    tape = next(x.tape for x in xs if isinstance(x, Node))
    return tape.record("concat", [tape.lift(x) for x in xs], axis=axis)


def t_quantile(u: Node, nu: Node) -> Node:
    """Student-t quantile, differentiable in both the probability and the dof."""
    return u.tape.record("t_quantile", [u, u.tape.lift(nu)])


# -- gradient checking -------------------------------------------------------

def value_and_grad(fn: Callable[[Node], Node], x):
    """Evaluate scalar ``fn`` at ``x`` on a fresh tape; return (value, gradient)."""
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xn = tape.variable(x)
    out = fn(xn)
    if not isinstance(out, Node):
        return float(out), np.zeros_like(x)
    (g,) = tape.grad(out, [xn])
    return float(out.value), g


def _evaluate(fn, x):
    tape = Tape()
    out = fn(tape.variable(x))
    return float(out.value) if isinstance(out, Node) else float(out)


def finite_diff_check(fn: Callable[[Node], Node], x, eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between the tape gradient and central differences.

    The error for coordinate ``i`` is ``|analytic_i - numeric_i| / max(|analytic_i|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    _, analytic = value_and_grad(fn, x)
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        numeric = (_evaluate(fn, xp) - _evaluate(fn, xm)) / (2.0 * eps)
        a = analytic.flat[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), floor))
    return worst
