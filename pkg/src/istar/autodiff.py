"""Reverse-mode automatic differentiation over the kernels in :mod:`istar.tensor`.

A :class:`Node` holds a value, the nodes it was computed from and a closure
that pushes its gradient back to them.  Graphs are built eagerly by the op
functions in this module and consumed once by :func:`backward`.

Subgradient conventions at kinks: relu'(0) = 0, the soft threshold has zero
derivative on its dead-zone boundary |x| = theta, and d|x|/dx = 0 at 0.
"""
from __future__ import annotations

import contextlib
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

# graphs are confined to one thread, so the mode flags are per thread
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _kink_log():
    return getattr(_state, "kinks", None)


@contextlib.contextmanager
def no_grad():
    """Build values only; no parents or backward closures are kept."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every non-smooth op evaluated inside the block.

    Two forwards that yield equal patterns lie on the same smooth piece of
    the network function.
    """
    prev = _kink_log()
    _state.kinks = log = []
    try:
        yield log
    finally:
        _state.kinks = prev


def _log_kink(pattern: np.ndarray) -> None:
    log = _kink_log()
    if log is not None:
        log.append(np.packbits(pattern.ravel()))


class Node:
    __slots__ = ("value", "parents", "_backward", "grad", "requires_grad", "name")

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.value = value
        self.requires_grad = requires_grad
        self.parents = tuple(parents) if requires_grad else ()
        self._backward = backward if requires_grad else None
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, dtype={self.value.dtype})"


def constant(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    return Node(T.as_tensor(x, dtype=dtype))


def _make(value, parents, backward):
    req = _grad_enabled() and any(p.requires_grad for p in parents)
    return Node(value, parents, backward, requires_grad=req)


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Intermediate gradients are released once propagated; leaf gradients add
    onto whatever is already stored.
    """
    if loss.value.size != 1 or any(s != 1 for s in loss.value.shape):
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents)

    loss._accumulate(np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        node.grad = None


# -- ops ---------------------------------------------------------------------

def conv2d(x: Node, weight: Node, bias: Node | None = None, stride=1, zero_pad=0) -> Node:
    out, cols = T.conv2d_with_cols(x.value, weight.value,
                                   None if bias is None else bias.value, stride, zero_pad)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        dx, dw, db = T.conv2d_grads(g, x.value, cols, weight.value, stride, zero_pad)
        if x.requires_grad:
            x._accumulate(dx)
        if weight.requires_grad:
            weight._accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(db)

    return _make(out, parents, _bw)


def relu(x: Node) -> Node:
    mask = x.value > 0
    _log_kink(mask)

    def _bw(g):
        x._accumulate(g * mask)

    return _make(T.relu(x.value), (x,), _bw)


def sigmoid(x: Node) -> Node:
    s = T.sigmoid(x.value)

    def _bw(g):
        x._accumulate(g * s * (1 - s))

    return _make(s, (x,), _bw)


def pixel_shuffle(x: Node, r: int) -> Node:
    def _bw(g):
        x._accumulate(T.pixel_unshuffle(g, r))

    return _make(T.pixel_shuffle(x.value, r), (x,), _bw)


def add(a: Node, b: Node) -> Node:
    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(T.add(a.value, b.value), (a, b), _bw)


def sub(a: Node, b: Node) -> Node:
    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    T._check_same(a.value, b.value, "sub")
    return _make(T.check_finite(a.value - b.value, "sub"), (a, b), _bw)


def mul(a: Node, b: Node) -> Node:
    def _bw(g):
        if a.requires_grad:
            a._accumulate(g * b.value)
        if b.requires_grad:
            b._accumulate(g * a.value)

    return _make(T.mul(a.value, b.value), (a, b), _bw)


def scale(x: Node, s: Node) -> Node:
    """Multiply a tensor by a single learned scalar (``s`` has one element)."""
    if s.value.size != 1:
        raise T.ShapeError("scale expects a one-element factor")
    factor = s.value.reshape(())

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * factor)
        if s.requires_grad:
            s._accumulate(np.sum(g * x.value).reshape(s.value.shape))

    return _make(T.check_finite(x.value * factor, "scale"), (x, s), _bw)


def concat(a: Node, b: Node) -> Node:
    ca = a.value.shape[1]

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    return _make(T.concat(a.value, b.value), (a, b), _bw)


def soft_threshold(x: Node, theta: Node) -> Node:
    """Soft threshold whose threshold map is itself differentiable.

    d out/dx = 1 and d out/dtheta = -sign(x) where |x| > theta, both 0
    elsewhere.
    """
    out = T.soft_threshold(x.value, theta.value)
    live = np.abs(x.value) > theta.value
    _log_kink(live)
    _log_kink(x.value > 0)

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * live)
        if theta.requires_grad:
            dth = -g * np.sign(x.value) * live
            theta._accumulate(_unbroadcast(dth, theta.value.shape))

    return _make(out, (x, theta), _bw)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def total(x: Node) -> Node:
    """Sum of all elements, as a (1,) node."""
    def _bw(g):
        x._accumulate(np.broadcast_to(g.reshape(()), x.value.shape))

    return _make(np.asarray([x.value.sum()], dtype=x.value.dtype), (x,), _bw)


def mean_abs(x: Node) -> Node:
    """Mean of |x| over all elements, as a (1,) node."""
    n = x.value.size
    sign = np.sign(x.value)
    _log_kink(x.value > 0)

    def _bw(g):
        x._accumulate(g.reshape(()) * sign / n)

    val = np.asarray([np.abs(x.value).sum() / n], dtype=x.value.dtype)
    return _make(val, (x,), _bw)


# -- parameters and optimisation ----------------------------------------------

@dataclass
class Param:
    node: Node
    m: np.ndarray
    v: np.ndarray

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def grad(self) -> np.ndarray:
        if self.node.grad is None:
            self.node.zero_grad()
        return self.node.grad


@dataclass
class ParamStore:
    """Ordered collection of trainable tensors with their Adam moments."""

    entries: "OrderedDict[str, Param]" = field(default_factory=OrderedDict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Node:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value)
        node = Node(value, requires_grad=True, name=name)
        node.zero_grad()
        self.entries[name] = Param(node, np.zeros_like(value), np.zeros_like(value))
        return node

    def __getitem__(self, name: str) -> Node:
        return self.entries[name].node

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return ((k, p.node) for k, p in self.entries.items())

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def zero_grad(self):
        for p in self.entries.values():
            p.node.zero_grad()

    def num_scalars(self) -> int:
        return sum(p.value.size for p in self.entries.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(step=self.step)
        for name, p in self.entries.items():
            out.add(name, p.value.astype(dtype))
            out.entries[name].m = p.m.astype(dtype)
            out.entries[name].v = p.v.astype(dtype)
        return out


class Scope:
    """Name-prefixed view into a ParamStore (``scope["conv.weight"]``)."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, name: str) -> Node:
        return self.store[f"{self.prefix}.{name}"]

    def scope(self, name: str) -> "Scope":
        return Scope(self.store, f"{self.prefix}.{name}")


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of every parameter, then zero the gradients."""
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params.entries.values():
        g = p.grad
        dt = p.value.dtype
        p.m *= dt.type(beta1)
        p.m += dt.type(1 - beta1) * g
        p.v *= dt.type(beta2)
        p.v += dt.type(1 - beta2) * (g * g)
        mhat = p.m / dt.type(c1)
        vhat = p.v / dt.type(c2)
        p.node.value -= dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(eps))
        T.check_finite(p.node.value, f"adam_step({p.node.name})")
        p.node.zero_grad()


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: str = ""

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def grad_check(f, params: ParamStore, eps: float = 1e-6, max_coords: int | None = None,
               seed: int = 0) -> GradCheckResult:
    """Compare backward() gradients of ``f()`` with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  Up to
    ``max_coords`` coordinates per parameter are sampled (all if None).  A
    coordinate is skipped when the kink pattern at x+eps or x-eps differs
    from the one at x, i.e. when the difference quotient straddles a relu,
    soft-threshold or |.| kink.  Error is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    params.zero_grad()
    with record_kinks() as base:
        loss = f()
    backward(loss)
    analytic = {name: node.grad.copy() for name, node in params.items()}

    def probe():
        with no_grad(), record_kinks() as log:
            val = float(f().value.ravel()[0])
        return val, log

    rng = np.random.default_rng(seed)
    worst, worst_at, checked, skipped = 0.0, "", 0, 0
    for name, node in params.items():
        flat = node.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp, kp = probe()
            flat[i] = orig - eps
            fm, km = probe()
            flat[i] = orig
            if not (_same_pattern(kp, base) and _same_pattern(km, base)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[name].reshape(-1)[i])
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            checked += 1
            if err > worst:
                worst, worst_at = err, f"{name}[{i}]"
    params.zero_grad()
    return GradCheckResult(worst, checked, skipped, worst_at)


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
