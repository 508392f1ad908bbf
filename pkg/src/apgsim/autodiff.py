"""Reverse-mode automatic differentiation over numpy scalars, vectors, matrices.

A Tape records primitive applications eagerly (forward values computed at call
time); backward() replays them in reverse creation order, which is a reverse
topological order because every node's inputs precede it on the tape. Gradients
accumulate additively over fan-out.

The only square-root exposed is sqrt_eps(x) = sqrt(x + 1e-12), so every norm in
the code base stays differentiable at zero.
"""
from __future__ import annotations

import numpy as np

SQRT_EPS = 1e-12


class TapeError(ValueError):
    """Structural misuse of the tape: shape mismatch, cross-tape mixing."""


class GradientNaNError(ArithmeticError):
    """A non-finite value surfaced during backward, with the offending node."""


class Var:
    """Handle to one node on a tape: stable node id plus eager forward value."""

    __slots__ = ("tape", "nid", "value")

    def __init__(self, tape: "Tape", nid: int, value: np.ndarray):
        self.tape = tape
        self.nid = nid
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(nid={self.nid}, shape={self.value.shape})"

    # Operator sugar; constants are lifted onto the same tape as leaves.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self.tape), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self.tape), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)


class _Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Append-only record of operations; one per rollout or forward pass."""

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value) -> Var:
        """Register an input (constant or parameter) with no ancestry."""
        return self._record("leaf", (), np.asarray(value, dtype=np.float64), None)

    def custom(self, op: str, parents, value, vjp) -> Var:
        """Register an externally-computed primitive.

        parents are Vars on this tape; vjp(upstream) must return one gradient
        per parent (or None for no contribution).
        """
        for p in parents:
            if p.tape is not self:
                raise TapeError(f"custom op {op!r}: parent from a different tape")
        return self._record(op, tuple(p.nid for p in parents),
                            np.asarray(value, dtype=np.float64), vjp)

    def _record(self, op, parent_ids, value, vjp) -> Var:
        nid = len(self._nodes)
        self._nodes.append(_Node(op, parent_ids, vjp))
        return Var(self, nid, value)

    def backward(self, loss: Var) -> dict:
        """Gradients of a scalar loss w.r.t. every ancestor node.

        Returns {node id -> gradient array}; nodes the loss does not depend on
        are absent. Fan-out accumulates additively.
        """
        if loss.tape is not self:
            raise TapeError("loss lives on a different tape")
        if loss.value.shape != ():
            raise TapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if not np.isfinite(loss.value):
            raise GradientNaNError(
                f"loss value is not finite at node {loss.nid} ({self._nodes[loss.nid].op})"
            )
        nodes = self._nodes
        # Mark ancestors of the loss so unrelated nodes are skipped.
        needed = bytearray(loss.nid + 1)
        needed[loss.nid] = 1
        stack = [loss.nid]
        while stack:
            for p in nodes[stack.pop()].parents:
                if not needed[p]:
                    needed[p] = 1
                    stack.append(p)
        grads = {loss.nid: np.ones(())}
        for nid in range(loss.nid, -1, -1):
            if not needed[nid]:
                continue
            node = nodes[nid]
            if node.vjp is None:
                continue
            g = grads[nid]
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if not np.all(np.isfinite(pg)):
                    raise GradientNaNError(
                        f"non-finite gradient produced by node {nid} ({node.op}) "
                        f"for input node {p} ({nodes[p].op})"
                    )
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
        return grads


def grad_of(grads: dict, var: Var) -> np.ndarray:
    """Gradient for a Var from a backward() map; zeros when the loss ignores it."""
    g = grads.get(var.nid)
    if g is None:
        return np.zeros_like(var.value)
    return np.asarray(g)


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise TapeError("operands live on different tapes")
        return x
    return tape.leaf(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, a, b, fwd, vjp_maker):
    tape = _tape_of(a, b)
    a = _lift(a, tape)
    b = _lift(b, tape)
    try:
        value = fwd(a.value, b.value)
    except ValueError as e:
        raise TapeError(f"{op}: incompatible shapes {a.value.shape} and {b.value.shape}") from e
    return tape.custom(op, (a, b), value, vjp_maker(a.value, b.value, value))


def add(a, b) -> Var:
    return _binary(
        "add", a, b, np.add,
        lambda av, bv, out: lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b) -> Var:
    return _binary(
        "sub", a, b, np.subtract,
        lambda av, bv, out: lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a, b) -> Var:
    return _binary(
        "mul", a, b, np.multiply,
        lambda av, bv, out: lambda g: (
            _unbroadcast(g * bv, av.shape),
            _unbroadcast(g * av, bv.shape),
        ),
    )


def neg(a: Var) -> Var:
    return a.tape.custom("neg", (a,), -a.value, lambda g: (-g,))


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a = _lift(a, tape)
    b = _lift(b, tape)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise TapeError(f"matmul supports 1D/2D operands, got {av.shape} @ {bv.shape}")
    try:
        out = av @ bv
    except ValueError as e:
        raise TapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}") from e

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av  # 1D . 1D

    return tape.custom("matmul", (a, b), out, vjp)


def _unary(op, a, fwd, dfn):
    tape = _tape_of(a)
    out = fwd(a.value)
    return tape.custom(op, (a,), out, lambda g, out=out, av=a.value: (g * dfn(av, out),))


def tanh(a: Var) -> Var:
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a: Var) -> Var:
    return _unary("sigmoid", a, lambda x: 1.0 / (1.0 + np.exp(-x)), lambda x, y: y * (1.0 - y))


def exp(a: Var) -> Var:
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a: Var) -> Var:
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def sqrt_eps(a: Var) -> Var:
    """sqrt(x + 1e-12): positive and differentiable even at x = 0."""
    return _unary("sqrt_eps", a, lambda x: np.sqrt(x + SQRT_EPS), lambda x, y: 0.5 / y)


def atan2(y, x) -> Var:
    tape = _tape_of(y, x)
    y = _lift(y, tape)
    x = _lift(x, tape)
    if y.value.shape != x.value.shape:
        raise TapeError(f"atan2: mismatched shapes {y.value.shape} and {x.value.shape}")
    out = np.arctan2(y.value, x.value)
    denom = y.value * y.value + x.value * x.value

    def vjp(g):
        return g * x.value / denom, -g * y.value / denom

    return tape.custom("atan2", (y, x), out, vjp)


def clamp(a: Var, lo, hi) -> Var:
    """Clip values to [lo, hi] (scalars or per-component arrays); gradient is 1
    inside the range, 0 outside."""
    tape = _tape_of(a)
    out = np.clip(a.value, lo, hi)
    mask = (a.value >= lo) & (a.value <= hi)
    return tape.custom("clamp", (a,), out, lambda g: (g * mask,))


def softmax(a: Var, axis: int = -1) -> Var:
    tape = _tape_of(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return tape.custom("softmax", (a,), out, vjp)


def concat(vars, axis: int = 0) -> Var:
    vars = list(vars)
    tape = _tape_of(*vars)
    vars = [_lift(v, tape) for v in vars]
    out = np.concatenate([v.value for v in vars], axis=axis)
    sizes = [v.value.shape[axis] for v in vars]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return tape.custom("concat", tuple(vars), out, vjp)


def stack(vars) -> Var:
    """Stack 1D Vars of equal length into a 2D (N, d) Var."""
    vars = list(vars)
    tape = _tape_of(*vars)
    vars = [_lift(v, tape) for v in vars]
    out = np.stack([v.value for v in vars], axis=0)

    def vjp(g):
        return tuple(g[i] for i in range(len(vars)))

    return tape.custom("stack", tuple(vars), out, vjp)


def slice_(a: Var, key) -> Var:
    """Basic indexing (ints/slices); gradient scatters back into the source shape."""
    tape = _tape_of(a)
    out = a.value[key]

    def vjp(g):
        z = np.zeros_like(a.value)
        z[key] = g
        return (z,)

    return tape.custom("slice", (a,), np.asarray(out, dtype=np.float64), vjp)


def transpose(a: Var) -> Var:
    tape = _tape_of(a)
    if a.value.ndim != 2:
        raise TapeError(f"transpose needs a 2D Var, got shape {a.value.shape}")
    return tape.custom("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def sum_(a: Var, axis=None) -> Var:
    tape = _tape_of(a)
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    return tape.custom("sum", (a,), out, vjp)


def mean(a: Var, axis=None) -> Var:
    tape = _tape_of(a)
    out = a.value.mean(axis=axis)
    n = a.value.size if axis is None else a.value.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.value.shape).copy(),)

    return tape.custom("mean", (a,), out, vjp)


def l2_norm(a: Var) -> Var:
    """Euclidean norm of the whole array, epsilon-guarded: sqrt(sum(x^2) + 1e-12)."""
    tape = _tape_of(a)
    out = np.sqrt((a.value * a.value).sum() + SQRT_EPS)
    return tape.custom("l2_norm", (a,), out, lambda g: (g * a.value / out,))


def detach(a: Var) -> Var:
    """Same value, no ancestry: backward contributes nothing to a's inputs."""
    return a.tape.leaf(a.value)


def grad_check(f, inputs, h: float = 1e-6) -> float:
    """Max relative error between tape gradients of f and central differences.

    f(tape, vars) must return a scalar Var; inputs is a list of arrays. The
    error per coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    vars = [tape.leaf(x) for x in inputs]
    out = f(tape, vars)
    grads = tape.backward(out)

    def value_at(xs):
        t = Tape()
        return float(f(t, [t.leaf(x) for x in xs]).value)

    max_err = 0.0
    for i, x in enumerate(inputs):
        analytic = grad_of(grads, vars[i])
        flat = x.reshape(-1)
        for c in range(flat.size):
            orig = flat[c]
            probe = [v.copy() for v in inputs]
            probe[i].reshape(-1)[c] = orig + h
            fp = value_at(probe)
            probe[i].reshape(-1)[c] = orig - h
            fm = value_at(probe)
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
