"""Reverse-mode automatic differentiation over a dynamically built tape.

Every operation appends a :class:`Node` to the :class:`Tape` of its operands.
Nodes are appended in creation order, so the tape is already a topological
ordering and :func:`backward` simply walks it in reverse.

Values are dense ``float64`` arrays; scalars are 0-d arrays.  Broadcasting
follows numpy rules and adjoints are summed back onto the operand shape.

Example
-------
>>> tape = Tape()
>>> x = tape.param(2.0, "x")
>>> y = tape.param(3.0, "y")
>>> grads = backward(x * y)
>>> float(grads[x]), float(grads[y])
(3.0, 2.0)
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "StructuralError",
    "DomainError",
    "Node",
    "Tape",
    "GradCheck",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sqrt",
    "square",
    "minimum",
    "maximum",
    "affine",
    "relu",
    "softplus",
    "mean",
    "total",
    "interp",
    "reshape",
    "custom",
    "backward",
    "grad_check",
]


class StructuralError(ValueError):
    """Shapes, arities or graph structure do not fit the requested operation."""


class DomainError(ArithmeticError):
    """An operand lies outside the mathematical domain of an operation."""

    def __init__(self, op_tag: str, message: str, operands: tuple = ()):
        self.op_tag = op_tag
        self.operands = operands
        super().__init__(f"{op_tag}: {message}")


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


class Node:
    """One value in the computation graph.

    ``adjoint`` is materialized lazily; reading it before :func:`backward`
    returns zeros of the value's shape.
    """

    __slots__ = (
        "value",
        "_adjoint",
        "parents",
        "op_tag",
        "tape",
        "index",
        "name",
        "requires_grad",
        "_vjp",
        "_fwd",
    )

    # make ndarray <op> Node dispatch to the reflected Node method
    __array_ufunc__ = None

    def __init__(self, tape, value, parents, op_tag, vjp=None, fwd=None, name=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self._adjoint = None
        self.parents = parents
        self.op_tag = op_tag
        self.name = name
        self.requires_grad = requires_grad
        self._vjp = vjp
        self._fwd = fwd
        self.index = -1

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def adjoint(self) -> np.ndarray:
        if self._adjoint is None:
            return np.zeros_like(self.value)
        return self._adjoint

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = self.name or self.op_tag
        return f"Node({label}, shape={self.shape})"

    # arithmetic sugar; all of it routes through the module-level ops
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


class Tape:
    """Ordered record of nodes plus the branch decisions taken while building.

    Parameters
    ----------
    seed : int, optional
        Seed for :attr:`rng`, the handle any stochastic operation must draw from.
    """

    def __init__(self, seed: int | None = None):
        self.nodes: list[Node] = []
        self.rng = np.random.default_rng(seed)
        self.ties = 0
        self._branches: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def param(self, value, name: str | None = None) -> Node:
        """Leaf node whose adjoint is reported by :func:`backward`."""
        return self._append(Node(self, _as_array(value), (), "param", name=name, requires_grad=True))

    def const(self, value, name: str | None = None) -> Node:
        return self._append(Node(self, _as_array(value), (), "const", name=name))

    def record(self, value, parents, op_tag, vjp, fwd=None) -> Node:
        """Append an op result.  ``vjp(g)`` must return one adjoint (or None) per parent."""
        req = any(p.requires_grad for p in parents)
        return self._append(Node(self, value, tuple(parents), op_tag, vjp if req else None, fwd, requires_grad=req))

    def note_branch(self, mask: np.ndarray, ties: int = 0) -> None:
        self._branches.append(np.asarray(mask, dtype=bool))
        self.ties += int(ties)

    def branch_signature(self) -> str:
        """Digest of every ReLU/min/max branch taken; equal digests mean the same linear region."""
        h = hashlib.sha1()
        for m in self._branches:
            h.update(np.packbits(m.ravel()).tobytes())
            h.update(str(m.shape).encode())
        return h.hexdigest()

    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.op_tag == "param"]

    def replay(self) -> list[np.ndarray]:
        """Recompute every node value in tape order from the leaves."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node._fwd is None:
                values.append(node.value.copy())
            else:
                values.append(node._fwd(*(values[p.index] for p in node.parents)))
        return values


def _tape_of(*operands) -> Tape:
    for op in operands:
        if isinstance(op, Node):
            return op.tape
    raise StructuralError("at least one operand must be a Node")


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise StructuralError("operands belong to different tapes")
        return x
    return tape.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(tag: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise StructuralError(f"{tag}: shapes {a.shape} and {b.shape} do not conform") from None


def _binary(tag, a, b, fwd, vjp_builder):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(tag, a, b)
    value = fwd(a.value, b.value)
    return tape.record(value, (a, b), tag, vjp_builder(a, b, value), fwd)


def add(a, b) -> Node:
    return _binary("add", a, b, np.add, lambda a, b, v: lambda g: (g, g))


def sub(a, b) -> Node:
    return _binary("sub", a, b, np.subtract, lambda a, b, v: lambda g: (g, -g))


def mul(a, b) -> Node:
    return _binary("mul", a, b, np.multiply, lambda a, b, v: lambda g: (g * b.value, g * a.value))


def div(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("div", a, b)
    if np.any(b.value == 0.0):
        raise DomainError("div", "zero denominator", (a.value, b.value))
    value = a.value / b.value
    bv = b.value
    return tape.record(value, (a, b), "div", lambda g: (g / bv, -g * value / bv), np.divide)


def neg(a: Node) -> Node:
    return a.tape.record(-a.value, (a,), "neg", lambda g: (-g,), np.negative)


def square(a: Node) -> Node:
    av = a.value
    return a.tape.record(av * av, (a,), "square", lambda g: (2.0 * av * g,), np.square)


def sqrt(a: Node) -> Node:
    """Square root.  The derivative at exactly zero is taken as zero."""
    if np.any(a.value < 0.0):
        raise DomainError("sqrt", "negative argument", (a.value,))
    value = np.sqrt(a.value)
    with np.errstate(divide="ignore"):
        local = np.where(value > 0.0, 0.5 / np.where(value > 0.0, value, 1.0), 0.0)
    return a.tape.record(value, (a,), "sqrt", lambda g: (g * local,), np.sqrt)


def _select(tag, a, b, pick_first):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(tag, a, b)
    first = pick_first(a.value, b.value)
    ties = int(np.count_nonzero(a.value == b.value)) if a.shape == b.shape else int(
        np.count_nonzero(np.broadcast_to(a.value, first.shape) == np.broadcast_to(b.value, first.shape))
    )
    tape.note_branch(first, ties)
    value = np.where(first, a.value, b.value)

    def fwd(x, y):
        return np.where(pick_first(x, y), x, y)

    return tape.record(value, (a, b), tag, lambda g: (np.where(first, g, 0.0), np.where(first, 0.0, g)), fwd)


def minimum(a, b) -> Node:
    """Elementwise min; at a tie the whole adjoint goes to ``a``."""
    return _select("min", a, b, np.less_equal)


def maximum(a, b) -> Node:
    """Elementwise max; at a tie the whole adjoint goes to ``a``."""
    return _select("max", a, b, np.greater_equal)


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    a.tape.note_branch(mask)
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), "relu", lambda g: (g * mask,), lambda x: np.where(x > 0.0, x, 0.0))


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus(a: Node) -> Node:
    e = np.exp(-np.abs(a.value))
    sig = np.where(a.value >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return a.tape.record(_softplus(a.value), (a,), "softplus", lambda g: (g * sig,), _softplus)


def affine(W: Node, x, b: Node) -> Node:
    """``W @ x + b`` for a vector ``x`` or row-wise ``x @ W.T + b`` for a batch."""
    tape = _tape_of(W, x, b)
    W, x, b = _lift(tape, W), _lift(tape, x), _lift(tape, b)
    if W.value.ndim != 2 or b.value.ndim != 1 or x.value.ndim not in (1, 2):
        raise StructuralError(f"affine: bad ranks W{W.shape} x{x.shape} b{b.shape}")
    n_out, n_in = W.shape
    if x.shape[-1] != n_in or b.shape[0] != n_out:
        raise StructuralError(f"affine: W{W.shape} incompatible with x{x.shape}, b{b.shape}")

    def fwd(Wv, xv, bv):
        return xv @ Wv.T + bv

    Wv, xv = W.value, x.value
    value = fwd(Wv, xv, b.value)

    def vjp(g):
        if xv.ndim == 1:
            return np.outer(g, xv), g @ Wv, g
        return g.T @ xv, g @ Wv, g.sum(axis=0)

    return tape.record(value, (W, x, b), "affine", vjp, fwd)


def mean(a: Node) -> Node:
    n = a.value.size
    if n == 0:
        raise StructuralError("mean: empty operand")
    shape = a.shape
    return a.tape.record(_as_array(a.value.mean()), (a,), "mean", lambda g: (np.full(shape, g / n),), lambda x: _as_array(x.mean()))


def total(a: Node) -> Node:
    shape = a.shape
    return a.tape.record(_as_array(a.value.sum()), (a,), "sum", lambda g: (np.full(shape, g, dtype=np.float64),), lambda x: _as_array(x.sum()))


def interp(x, knots_x: np.ndarray, knots_y: np.ndarray) -> Node:
    """Piecewise-linear interpolation through fixed knots, clamped outside them.

    The derivative inside a segment is its slope and zero past the end knots.
    At an interior knot the slope of the segment to the right is used.
    """
    kx = np.asarray(knots_x, dtype=np.float64)
    ky = np.asarray(knots_y, dtype=np.float64)
    if kx.ndim != 1 or kx.size < 2 or ky.shape != kx.shape:
        raise StructuralError("interp: need at least two knots with matching shapes")
    tape = _tape_of(x)

    def fwd(xv):
        return np.interp(xv, kx, ky)

    xv = x.value
    seg = np.clip(np.searchsorted(kx, xv, side="right") - 1, 0, kx.size - 2)
    slope = (ky[seg + 1] - ky[seg]) / (kx[seg + 1] - kx[seg])
    slope = np.where((xv < kx[0]) | (xv > kx[-1]), 0.0, slope)
    return tape.record(fwd(xv), (x,), "interp", lambda g: (g * slope,), fwd)


def reshape(a: Node, shape: tuple) -> Node:
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise StructuralError(f"reshape: cannot view {old} as {shape}") from None
    return a.tape.record(value, (a,), "reshape", lambda g: (g.reshape(old),), lambda x: x.reshape(shape))


def custom(tag: str, parents: Iterable, value: np.ndarray, partials: Iterable, fwd: Callable | None = None) -> Node:
    """Fused op whose local Jacobian is diagonal: ``partials[i]`` is d value / d parents[i] elementwise."""
    parents = list(parents)
    tape = _tape_of(*parents)
    parents = [_lift(tape, p) for p in parents]
    partials = list(partials)
    if len(partials) != len(parents):
        raise StructuralError(f"{tag}: one partial per parent required")
    return tape.record(value, parents, tag, lambda g: tuple(g * d for d in partials), fwd)


def backward(output: Node) -> dict[Node, np.ndarray]:
    """Propagate adjoints from a scalar output back to every parameter leaf.

    Returns a mapping ``{param node: adjoint}`` covering all params on the tape,
    including those the output does not depend on (zero adjoint).
    """
    if output.value.size != 1:
        raise StructuralError(f"backward: output must be scalar, got shape {output.shape}")
    tape = output.tape
    nodes = tape.nodes
    for n in nodes:
        n._adjoint = None
    output._adjoint = np.ones_like(output.value)
    for node in reversed(nodes[: output.index + 1]):
        g = node._adjoint
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=np.float64), parent.shape)
            parent._adjoint = pg if parent._adjoint is None else parent._adjoint + pg
    return {n: n.adjoint for n in nodes if n.op_tag == "param"}


@dataclass(frozen=True)
class GradCheck:
    """Outcome of :func:`grad_check`.

    ``nondifferentiable`` is set when the base point sits on a min/max tie.
    ``kink_crossings`` lists entries whose +-h probes landed in a different
    ReLU/min/max region; they are excluded from ``max_rel_error``.
    """

    max_rel_error: float
    n_checked: int
    nondifferentiable: bool = False
    kink_crossings: tuple = field(default_factory=tuple)
    worst: tuple | None = None


def grad_check(
    f: Callable[[Tape, dict[str, Node]], Node],
    theta: Mapping[str, np.ndarray],
    h: float = 1e-6,
) -> GradCheck:
    """Compare :func:`backward` against central differences.

    ``f(tape, params)`` builds a scalar graph from param nodes named as in
    ``theta``.  The step for entry ``v`` is ``h * max(1, |v|)`` and the error
    is ``|AD - FD| / max(1, |FD|)``.
    """
    theta = {k: _as_array(v) for k, v in theta.items()}

    def evaluate(values):
        tape = Tape()
        params = {k: tape.param(v, k) for k, v in values.items()}
        try:
            out = f(tape, params)
        except DomainError as exc:
            raise DomainError(exc.op_tag, f"evaluation failed near theta ({exc})", exc.operands) from exc
        return tape, params, out

    tape, params, out = evaluate(theta)
    grads = backward(out)
    base_sig = tape.branch_signature()
    worst, worst_at, checked, crossings = 0.0, None, 0, []
    for name, value in theta.items():
        ad = grads[params[name]]
        for idx in np.ndindex(value.shape):
            step = h * max(1.0, abs(float(value[idx])))
            probes = []
            for sign in (1.0, -1.0):
                moved = dict(theta)
                moved[name] = value.copy()
                moved[name][idx] += sign * step
                t, _, o = evaluate(moved)
                probes.append((float(o.value), t.branch_signature()))
            if probes[0][1] != base_sig or probes[1][1] != base_sig:
                crossings.append((name, idx))
                continue
            fd = (probes[0][0] - probes[1][0]) / (2.0 * step)
            err = abs(float(ad[idx]) - fd) / max(1.0, abs(fd))
            checked += 1
            if err > worst:
                worst, worst_at = err, (name, idx)
    return GradCheck(worst, checked, tape.ties > 0, tuple(crossings), worst_at)
