"""Define-then-run reverse-mode automatic differentiation over numpy arrays.

Expressions are built from :class:`Node` objects and compiled into a
:class:`Graph`, which can then be evaluated any number of times against new
leaf bindings. :func:`grad` is symbolic: it returns new nodes, so the result
can itself be differentiated. That is what lets a hypergradient flow through
a one-step gradient update.

All values are float64 ndarrays. Gradients at the relu kink (input exactly 0)
are defined as 0.
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import NonFiniteGradient, NonFiniteResult, ShapeMismatch, UnknownLeaf, ZeroDirection

Tensor = np.ndarray

_ids = itertools.count()


class Node:
    __slots__ = ("op", "inputs", "attrs", "uid")

    def __init__(self, op: str, inputs: tuple = (), attrs: dict | None = None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.uid = next(_ids)

    @property
    def name(self):
        return self.attrs.get("name")

    def __repr__(self):
        if self.op == "leaf":
            return f"Node(leaf {self.name!r})"
        return f"Node({self.op}#{self.uid})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Node:
    if isinstance(x, Node):
        return x
    return const(x)


# ---------------------------------------------------------------- constructors


def leaf(name: str) -> Node:
    return Node("leaf", (), {"name": name})


def const(value) -> Node:
    return Node("const", (), {"value": np.asarray(value, dtype=np.float64)})


def add(a, b):
    return Node("add", (_lift(a), _lift(b)))


def sub(a, b):
    return Node("sub", (_lift(a), _lift(b)))


def mul(a, b):
    return Node("mul", (_lift(a), _lift(b)))


def div(a, b):
    return Node("div", (_lift(a), _lift(b)))


def neg(a):
    return Node("neg", (_lift(a),))


def matmul(a, b):
    return Node("matmul", (_lift(a), _lift(b)))


def transpose(a):
    return Node("transpose", (_lift(a),))


def tanh(a):
    return Node("tanh", (_lift(a),))


def relu(a):
    return Node("relu", (_lift(a),))


def sigmoid(a):
    return Node("sigmoid", (_lift(a),))


def exp(a):
    return Node("exp", (_lift(a),))


def log(a):
    return Node("log", (_lift(a),))


def step(a):
    """Heaviside step (1 where a > 0); carries no gradient."""
    return Node("step", (_lift(a),))


def softmax(a):
    """Softmax over the last axis."""
    return Node("softmax", (_lift(a),))


def log_softmax(a):
    return Node("log_softmax", (_lift(a),))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return Node("sum", (_lift(a),), {"axis": axis, "keepdims": keepdims})


def count(a, axis=None):
    """Number of elements reduced over ``axis``; constant w.r.t. ``a``."""
    return Node("count", (_lift(a),), {"axis": axis})


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    return div(sum(a, axis, keepdims), count(a, axis))


def sqnorm(a):
    a = _lift(a)
    return sum(a * a)


def cross_entropy(logits, onehot):
    """Per-row cross-entropy of ``logits`` against one-hot targets."""
    return neg(sum(mul(onehot, log_softmax(logits)), axis=-1))


def take(flat, start: int, shape: tuple) -> Node:
    """View ``flat[start:start+prod(shape)]`` reshaped to ``shape``."""
    shape = tuple(int(s) for s in shape)
    return Node("take", (_lift(flat),), {"start": int(start), "shape": shape})


def zeros_like(a):
    return Node("zeros_like", (_lift(a),))


def ones_like(a):
    return Node("ones_like", (_lift(a),))


def stop_gradient(a):
    return Node("stop_gradient", (_lift(a),))


# internal adjoint helpers
def _unbroadcast(g, ref):
    return Node("unbroadcast", (g, ref))


def _broadcast_like(g, ref):
    return Node("broadcast_like", (g, ref))


def _spread(g, ref, axis, keepdims):
    return Node("spread", (g, ref), {"axis": axis, "keepdims": keepdims})


def _place(g, ref, start, shape):
    return Node("place", (g, ref), {"start": start, "shape": shape})


# ---------------------------------------------------------------- forward rules


def _f_unbroadcast(g, ref):
    if g.shape == ref.shape:
        return g
    lead = g.ndim - ref.ndim
    if lead < 0:
        raise ValueError(f"cannot reduce {g.shape} to {ref.shape}")
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(ref.shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(ref.shape)


def _f_spread(g, ref, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, ref.shape).copy()


def _f_sum(a, axis, keepdims):
    return np.asarray(np.sum(a, axis=axis, keepdims=keepdims), dtype=np.float64)


def _f_count(a, axis):
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ValueError("reduction over zero elements")
    return np.asarray(float(n))


def _f_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul of {a.shape} and {b.shape}")
    return a @ b


def _f_transpose(a):
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got {a.shape}")
    return a.T.copy()


def _f_softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _f_log_softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _f_sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _f_take(a, start, shape):
    n = int(np.prod(shape)) if shape else 1
    if a.ndim != 1 or start + n > a.size:
        raise ValueError(f"take [{start}:{start + n}] from {a.shape}")
    return a[start:start + n].reshape(shape)


def _f_place(g, ref, start, shape):
    out = np.zeros(ref.size)
    out[start:start + g.size] = g.ravel()
    return out.reshape(ref.shape)


_FORWARD: dict[str, Callable] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "matmul": _f_matmul,
    "transpose": _f_transpose,
    "tanh": np.tanh,
    "relu": lambda a: np.maximum(a, 0.0),
    "sigmoid": _f_sigmoid,
    "exp": np.exp,
    "log": np.log,
    "step": lambda a: (a > 0).astype(np.float64),
    "softmax": _f_softmax,
    "log_softmax": _f_log_softmax,
    "sum": _f_sum,
    "count": _f_count,
    "take": _f_take,
    "zeros_like": np.zeros_like,
    "ones_like": np.ones_like,
    "stop_gradient": lambda a: a,
    "unbroadcast": _f_unbroadcast,
    "broadcast_like": lambda g, ref: np.broadcast_to(g, ref.shape).copy(),
    "spread": _f_spread,
    "place": _f_place,
}


# ---------------------------------------------------------------- adjoint rules
# Each rule maps (node, upstream gradient node) to one gradient node per input
# (None where the input receives no gradient). Rules only emit graph nodes, so
# they are themselves differentiable.


def _vjp(node: Node, g: Node):
    op = node.op
    x = node.inputs
    if op == "add":
        return _unbroadcast(g, x[0]), _unbroadcast(g, x[1])
    if op == "sub":
        return _unbroadcast(g, x[0]), _unbroadcast(neg(g), x[1])
    if op == "mul":
        return _unbroadcast(g * x[1], x[0]), _unbroadcast(g * x[0], x[1])
    if op == "div":
        a, b = x
        return _unbroadcast(g / b, x[0]), _unbroadcast(neg(g * a / (b * b)), x[1])
    if op == "neg":
        return (neg(g),)
    if op == "matmul":
        a, b = x
        return g @ transpose(b), transpose(a) @ g
    if op == "transpose":
        return (transpose(g),)
    if op == "tanh":
        return (g * (1.0 - node * node),)
    if op == "relu":
        return (g * step(x[0]),)
    if op == "sigmoid":
        return (g * node * (1.0 - node),)
    if op == "exp":
        return (g * node,)
    if op == "log":
        return (g / x[0],)
    if op == "softmax":
        return (node * (g - sum(g * node, axis=-1, keepdims=True)),)
    if op == "log_softmax":
        return (g - softmax(x[0]) * sum(g, axis=-1, keepdims=True),)
    if op == "sum":
        return (_spread(g, x[0], node.attrs["axis"], node.attrs["keepdims"]),)
    if op == "spread":
        return sum(g, node.attrs["axis"], node.attrs["keepdims"]), None
    if op == "unbroadcast":
        return _broadcast_like(g, x[0]), None
    if op == "broadcast_like":
        return _unbroadcast(g, x[0]), None
    if op == "take":
        return (_place(g, x[0], node.attrs["start"], node.attrs["shape"]),)
    if op == "place":
        return take(g, node.attrs["start"], node.attrs["shape"]), None
    # leaf, const, step, count, zeros_like, ones_like, stop_gradient
    return tuple(None for _ in x)


def _key(n: Node):
    return ("leaf", n.name) if n.op == "leaf" else n.uid


def grad(output: Node, wrt: Iterable[Node]) -> list[Node]:
    """Symbolic gradient of a scalar ``output`` with respect to ``wrt`` leaves.

    Leaves are matched by name. Leaves the output does not depend on get a
    zero tensor of their own shape.
    """
    wrt = list(wrt)
    order = _topo([output])
    adj: dict = {_key(output): ones_like(output)}
    for n in reversed(order):
        g = adj.get(_key(n))
        if g is None or not n.inputs:
            continue
        for inp, gi in zip(n.inputs, _vjp(n, g)):
            if gi is None:
                continue
            k = _key(inp)
            adj[k] = adj[k] + gi if k in adj else gi
    return [adj.get(_key(w)) or zeros_like(w) for w in wrt]


def _topo(outputs: Iterable[Node]) -> list[Node]:
    seen: set[int] = set()
    order: list[Node] = []
    for root in outputs:
        if root.uid in seen:
            continue
        stack = [(root, False)]
        while stack:
            n, expanded = stack.pop()
            if expanded:
                order.append(n)
                continue
            if n.uid in seen:
                continue
            seen.add(n.uid)
            stack.append((n, True))
            for i in reversed(n.inputs):
                if i.uid not in seen:
                    stack.append((i, False))
    return order


# ---------------------------------------------------------------- graphs


class Graph:
    """A compiled set of named output expressions.

    The node order is fixed at construction. :meth:`run` keeps its workspace
    local, so one graph can be evaluated concurrently with different bindings.
    """

    def __init__(self, outputs: Node | Mapping[str, Node]):
        if isinstance(outputs, Node):
            outputs = {"loss": outputs}
        self.outputs = dict(outputs)
        self.order = _topo(self.outputs.values())
        self.leaves: dict[str, Node] = {}
        for n in self.order:
            if n.op == "leaf":
                self.leaves.setdefault(n.name, n)
        self._grad_cache: dict = {}
        self._order_cache: dict = {}
        self._lock = threading.Lock()

    def run(self, bindings: Mapping[str, Tensor], outputs: Iterable[str] | None = None
            ) -> dict[str, Tensor]:
        names = list(self.outputs) if outputs is None else list(outputs)
        if outputs is None:
            order = self.order
        else:
            key = tuple(names)
            order = self._order_cache.get(key)
            if order is None:
                order = _topo([self.outputs[k] for k in names])
                with self._lock:
                    self._order_cache[key] = order
        vals: dict[int, Tensor] = {}
        with np.errstate(all="ignore"):
            for n in order:
                if n.op == "leaf":
                    try:
                        vals[n.uid] = np.asarray(bindings[n.name], dtype=np.float64)
                    except KeyError:
                        raise UnknownLeaf(f"leaf {n.name!r} is not bound") from None
                elif n.op == "const":
                    vals[n.uid] = n.attrs["value"]
                else:
                    args = [vals[i.uid] for i in n.inputs]
                    try:
                        vals[n.uid] = _FORWARD[n.op](*args, **n.attrs)
                    except (ValueError, IndexError) as exc:
                        raise ShapeMismatch(f"{n.op}: {exc}") from None
        out = {}
        for k in names:
            v = vals[self.outputs[k].uid]
            if not np.all(np.isfinite(v)):
                raise NonFiniteResult(f"output {k!r} is not finite")
            out[k] = v
        return out

    def with_gradients(self, wrt: Iterable[str], output: str = "loss") -> "Graph":
        """Graph computing ``output`` plus ``grad:<leaf>`` for each leaf in ``wrt``."""
        key = (output, tuple(wrt))
        with self._lock:
            g = self._grad_cache.get(key)
            if g is None:
                nodes = []
                for name in key[1]:
                    if name not in self.leaves:
                        raise UnknownLeaf(f"no leaf named {name!r}")
                    nodes.append(self.leaves[name])
                out = self.outputs[output]
                grads = grad(out, nodes)
                g = Graph({output: out, **{f"grad:{n}": d for n, d in zip(key[1], grads)}})
                self._grad_cache[key] = g
        return g


def forward_eval(graph: Graph, bindings: Mapping[str, Tensor], output: str = "loss") -> float:
    val = graph.run(bindings, [output])[output]
    if val.size != 1:
        raise ShapeMismatch(f"output {output!r} has shape {val.shape}, expected a scalar")
    return float(val.reshape(()))


def backward_grad(graph: Graph, bindings: Mapping[str, Tensor], wrt: Iterable[str],
                  output: str = "loss") -> dict[str, Tensor]:
    """Exact gradients of the scalar ``output``; a bound leaf the output does
    not read gets a zero gradient of its own shape."""
    wrt = list(wrt)
    for name in wrt:
        if name not in graph.leaves and name not in bindings:
            raise UnknownLeaf(f"no leaf named {name!r}")
    used = [n for n in wrt if n in graph.leaves]
    gg = graph.with_gradients(used, output)
    try:
        res = gg.run(bindings)
    except NonFiniteResult as exc:
        raise NonFiniteGradient(str(exc)) from None
    if res[output].size != 1:
        raise ShapeMismatch(f"output {output!r} is not a scalar")
    return {name: res[f"grad:{name}"] if name in graph.leaves
            else np.zeros_like(np.asarray(bindings[name], dtype=np.float64)) for name in wrt}


# ---------------------------------------------------------------- oracles


def finite_diff_grad(objective: Callable[[Mapping[str, Tensor]], float],
                     bindings: Mapping[str, Tensor], wrt: str, step: float = 1e-5) -> Tensor:
    """Central-difference gradient of ``objective`` w.r.t. one bound leaf.

    Not valid at kinks: for |x| at 0 it returns 0 by symmetry.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}
    x = base[wrt].copy()
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = objective({**base, wrt: x})
        flat[i] = orig - step
        fm = objective({**base, wrt: x})
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    if not np.all(np.isfinite(out)):
        raise NonFiniteResult("finite-difference gradient is not finite")
    return out.reshape(x.shape)


HVP_RADIUS = 0.01


def hvp_scale(direction: Tensor, radius: float = HVP_RADIUS) -> float:
    """Perturbation size radius / ||direction||_2 used by :func:`finite_diff_hvp`."""
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        raise ZeroDirection("direction has zero norm")
    return radius / norm


def finite_diff_hvp(grad_fn_outer: Callable[[Tensor], Tensor], params: Tensor,
                    direction: Tensor, radius: float = HVP_RADIUS) -> Tensor:
    """Approximate (d/dp grad_fn_outer(p)) . direction by central differences.

    The perturbation is p +/- alpha*direction with alpha = radius / ||direction||,
    so the perturbed points sit at distance ``radius`` (0.01 by default).
    """
    params = np.asarray(params, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != params.shape:
        raise ShapeMismatch(f"direction {direction.shape} vs params {params.shape}")
    alpha = hvp_scale(direction, radius)
    gp = np.asarray(grad_fn_outer(params + alpha * direction))
    gm = np.asarray(grad_fn_outer(params - alpha * direction))
    out = (gp - gm) / (2.0 * alpha)
    if not np.all(np.isfinite(out)):
        raise NonFiniteResult("finite-difference HVP is not finite")
    return out


def seeded_init(shape, scheme="zeros", seed: int = 0) -> Tensor:
    """Deterministic initial tensor.

    ``scheme`` is ``"zeros"``, ``("uniform", lo, hi)`` or ``("normal", mean, std)``.
    """
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    if scheme == "zeros" or scheme == ("zeros",):
        return np.zeros(shape)
    kind, a, b = scheme
    rng = np.random.default_rng(seed)
    if kind == "uniform":
        return rng.uniform(a, b, size=shape)
    if kind == "normal":
        return rng.normal(a, b, size=shape)
    raise ValueError(f"unknown init scheme {scheme!r}")
