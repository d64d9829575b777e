"""Scalar reverse-mode differentiation on an append-only tape.

Every recorded value is a :class:`Node` holding its local partials with
respect to its parents.  Because nodes are only ever appended, node ids are a
topological order and :meth:`Tape.backward` is a single reverse sweep.

This engine is the reference for everything the batched network code in
:mod:`shapetime.network` does; tests compare the two on small nets.

>>> tape = Tape()
>>> x, y = tape.var(3.0), tape.var(4.0)
>>> z = x * y
>>> g = tape.backward(z)
>>> g[x.id], g[y.id]
(4.0, 3.0)
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .errors import DomainError

OPS = ("input", "const", "add", "sub", "mul", "div", "neg", "exp", "log",
       "tanh", "sin", "cos", "pow", "softplus", "dot")


@dataclass
class Node:
    id: int
    value: float
    op: str
    parents: list = field(default_factory=list)  # (parent id, local partial)
    grad: float = 0.0


class Tape:
    """Append-only record of scalar operations."""

    def __init__(self, rng_seed=0):
        self.nodes = []
        self.rng_seed = rng_seed

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes = []

    def _append(self, value, op, parents=()):
        node = Node(len(self.nodes), float(value), op, list(parents))
        self.nodes.append(node)
        return node.id

    def var(self, value):
        """Create a leaf input and return it wrapped as a :class:`Var`."""
        return Var(self, self._append(value, "input"))

    def const(self, value):
        return Var(self, self._append(value, "const"))

    def value(self, i):
        return self.nodes[i].value

    def record(self, op, inputs, exponent=None):
        """Append one op applied to existing node ids and return the new id.

        ``dot`` takes ``2n`` inputs, the first ``n`` being one operand.  ``pow``
        takes one input and a constant ``exponent``, or two inputs (positive
        base raised to a recorded exponent).
        """
        inputs = [i.id if isinstance(i, Var) else int(i) for i in inputs]
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise IndexError(f"node {i} is not on the tape")
        x = [self.nodes[i].value for i in inputs]

        if op == "add":
            return self._append(x[0] + x[1], op, [(inputs[0], 1.0), (inputs[1], 1.0)])
        if op == "sub":
            return self._append(x[0] - x[1], op, [(inputs[0], 1.0), (inputs[1], -1.0)])
        if op == "mul":
            return self._append(x[0] * x[1], op, [(inputs[0], x[1]), (inputs[1], x[0])])
        if op == "div":
            if x[1] == 0.0:
                raise DomainError("division by zero")
            q = x[0] / x[1]
            return self._append(q, op, [(inputs[0], 1.0 / x[1]), (inputs[1], -q / x[1])])
        if op == "neg":
            return self._append(-x[0], op, [(inputs[0], -1.0)])
        if op == "exp":
            e = math.exp(x[0])
            return self._append(e, op, [(inputs[0], e)])
        if op == "log":
            if x[0] <= 0.0:
                raise DomainError(f"log of non-positive value {x[0]!r}")
            return self._append(math.log(x[0]), op, [(inputs[0], 1.0 / x[0])])
        if op == "tanh":
            th = math.tanh(x[0])
            return self._append(th, op, [(inputs[0], 1.0 - th * th)])
        if op == "sin":
            return self._append(math.sin(x[0]), op, [(inputs[0], math.cos(x[0]))])
        if op == "cos":
            return self._append(math.cos(x[0]), op, [(inputs[0], -math.sin(x[0]))])
        if op == "softplus":
            v = np.logaddexp(0.0, x[0])
            s = 0.5 * (1.0 + math.tanh(0.5 * x[0]))
            return self._append(v, op, [(inputs[0], s)])
        if op == "pow":
            if len(inputs) == 1:
                if exponent is None:
                    raise ValueError("pow with one input needs a constant exponent")
                if x[0] == 0.0 and exponent < 1:
                    raise DomainError("pow: zero base with exponent < 1")
                v = x[0] ** exponent
                return self._append(v, op, [(inputs[0], exponent * x[0] ** (exponent - 1))])
            if x[0] <= 0.0:
                raise DomainError("pow with recorded exponent needs a positive base")
            v = x[0] ** x[1]
            return self._append(v, op, [(inputs[0], x[1] * x[0] ** (x[1] - 1)),
                                        (inputs[1], v * math.log(x[0]))])
        if op == "dot":
            if len(inputs) % 2:
                raise ValueError("dot needs an even number of inputs")
            n = len(inputs) // 2
            v = math.fsum(x[k] * x[n + k] for k in range(n))
            parents = [(inputs[k], x[n + k]) for k in range(n)]
            parents += [(inputs[n + k], x[k]) for k in range(n)]
            return self._append(v, op, parents)
        raise ValueError(f"unknown op {op!r}")

    def matvec(self, rows, vec):
        """Dense matrix-vector product; ``rows`` is a list of rows of ids."""
        vec = [v.id if isinstance(v, Var) else v for v in vec]
        out = []
        for row in rows:
            row = [r.id if isinstance(r, Var) else r for r in row]
            if len(row) != len(vec):
                raise ValueError("matvec shape mismatch")
            out.append(Var(self, self.record("dot", row + vec)))
        return out

    def backward(self, root):
        """Accumulate adjoints of ``root`` into every node and return them.

        Returns a dict mapping each node id ``<= root`` to d(root)/d(node).
        """
        root = root.id if isinstance(root, Var) else int(root)
        for node in self.nodes:
            node.grad = 0.0
        adj = np.zeros(root + 1)
        adj[root] = 1.0
        for i in range(root, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            for j, local in self.nodes[i].parents:
                adj[j] += g * local
        for i in range(root + 1):
            self.nodes[i].grad = float(adj[i])
        return {i: float(adj[i]) for i in range(root + 1)}


class Var:
    """Operator-overloading handle on a tape node."""

    __slots__ = ("tape", "id")

    def __init__(self, tape, id):
        self.tape = tape
        self.id = id

    @property
    def value(self):
        return self.tape.nodes[self.id].value

    def __repr__(self):
        return f"Var(id={self.id}, value={self.value!r})"

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.tape.const(other)

    def _op(self, op, *others, **kw):
        ids = [self.id] + [self._lift(o).id for o in others]
        return Var(self.tape, self.tape.record(op, ids, **kw))

    def __add__(self, other):
        return self._op("add", other)

    def __radd__(self, other):
        return self._lift(other)._op("add", self)

    def __sub__(self, other):
        return self._op("sub", other)

    def __rsub__(self, other):
        return self._lift(other)._op("sub", self)

    def __mul__(self, other):
        return self._op("mul", other)

    def __rmul__(self, other):
        return self._lift(other)._op("mul", self)

    def __truediv__(self, other):
        return self._op("div", other)

    def __rtruediv__(self, other):
        return self._lift(other)._op("div", self)

    def __neg__(self):
        return self._op("neg")

    def __pow__(self, exponent):
        if isinstance(exponent, Var):
            return self._op("pow", exponent)
        return self._op("pow", exponent=float(exponent))

    def exp(self):
        return self._op("exp")

    def log(self):
        return self._op("log")

    def tanh(self):
        return self._op("tanh")

    def sin(self):
        return self._op("sin")

    def cos(self):
        return self._op("cos")

    def softplus(self):
        return self._op("softplus")


def dot(a, b):
    """Inner product of two equal-length lists of :class:`Var`."""
    tape = a[0].tape
    return Var(tape, tape.record("dot", [v.id for v in a] + [v.id for v in b]))


def grad_wrt_input(f, input_index, point):
    """Column of the Jacobian of ``f`` at ``point`` w.r.t. one input.

    ``f`` takes a list of :class:`Var` and returns a Var or a sequence of
    them; it is recorded on a fresh tape and swept once per output.
    """
    tape = Tape()
    xs = [tape.var(v) for v in point]
    out = f(xs)
    if isinstance(out, Var) or np.isscalar(out):
        out = [out]
    col = np.zeros(len(out))
    target = xs[input_index].id
    for k, y in enumerate(out):
        if not isinstance(y, Var):
            continue  # constant output
        col[k] = tape.backward(y).get(target, 0.0)
    return col
