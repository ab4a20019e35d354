"""
Reverse-mode differentiation on a recorded tape of numpy array operations.

Every vector-Jacobian product below is written with the same primitives it
differentiates, so a gradient taken with ``create_graph=True`` lands on the
tape as ordinary nodes and can be differentiated again. The trainer relies on
this to push the IRL loss gradient back through N inner gradient steps on the
action sequence (tape over tape).

All values are float64. A Tape belongs to one thread; recording can be
switched off per thread with ``no_record()``.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from errors import DivergenceError, NumericDomainError

logger = logging.getLogger(__name__)

REL_ERROR_FLOOR = 1e-8

_local = threading.local()


def _recording() -> bool:
    return getattr(_local, "recording", True)


@contextmanager
def _recording_as(flag: bool):
    previous = _recording()
    _local.recording = flag
    try:
        yield
    finally:
        _local.recording = previous


def no_record():
    """Context manager: operations inside produce constants only."""
    return _recording_as(False)


# ============================================================================
# NODES
# ============================================================================


class Var:
    """An array value, optionally recorded on a Tape.

    `parents` holds (parent, vjp) pairs where ``vjp(g, out)`` maps the
    cotangent of this node to the cotangent contribution of `parent`.
    """

    __slots__ = ("value", "tape", "parents", "index")
    __array_ufunc__ = None  # ndarray <op> Var defers to Var's reflected ops

    def __init__(self, value, tape: Optional["Tape"] = None, parents: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.index = -1
        if tape is not None:
            self.index = len(tape.nodes)
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Var":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        where = "const" if self.tape is None else f"#{self.index}"
        return f"Var({where}, shape={self.shape})"

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None) -> "Var":
        return vsum(self, axis)

    def mean(self, axis=None) -> "Var":
        return mean(self, axis)

    def reshape(self, *shape) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def const(value) -> Var:
    return Var(value)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents) -> Var:
    live = [(p, fn) for p, fn in parents if p.tape is not None]
    if not live or not _recording():
        return Var(value)
    tape = live[0][0].tape
    if any(p.tape is not tape for p, _ in live):
        raise ValueError("operands are recorded on different tapes")
    return Var(value, tape=tape, parents=tuple(live))


# ============================================================================
# PRIMITIVES
# ============================================================================


def _sum_to_value(value: np.ndarray, shape: tuple) -> np.ndarray:
    lead = value.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and value.shape[lead + i] != 1
    )
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    return value.reshape(shape)


def sum_to(x, shape) -> Var:
    """Sum a broadcast array back down to `shape`."""
    x = _lift(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _node(_sum_to_value(x.value, shape), [(x, lambda g, out: broadcast_to(g, x.shape))])


def broadcast_to(x, shape) -> Var:
    x = _lift(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _node(np.broadcast_to(x.value, shape).copy(), [(x, lambda g, out: sum_to(g, x.shape))])


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return _node(a.value + b.value, [
        (a, lambda g, out: sum_to(g, a.shape)),
        (b, lambda g, out: sum_to(g, b.shape)),
    ])


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return _node(a.value - b.value, [
        (a, lambda g, out: sum_to(g, a.shape)),
        (b, lambda g, out: sum_to(neg(g), b.shape)),
    ])


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return _node(a.value * b.value, [
        (a, lambda g, out: sum_to(g * b, a.shape)),
        (b, lambda g, out: sum_to(g * a, b.shape)),
    ])


def div(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return _node(a.value / b.value, [
        (a, lambda g, out: sum_to(g / b, a.shape)),
        (b, lambda g, out: sum_to(neg(g * out) / b, b.shape)),
    ])


def neg(x) -> Var:
    x = _lift(x)
    return _node(-x.value, [(x, lambda g, out: neg(g))])


def power(x, exponent) -> Var:
    """x ** p for a constant real p."""
    x = _lift(x)
    p = float(exponent)
    if p == 0.0:
        return Var(np.ones_like(x.value))
    return _node(x.value ** p, [(x, lambda g, out: g * (p * power(x, p - 1.0)))])


def exp(x) -> Var:
    x = _lift(x)
    return _node(np.exp(x.value), [(x, lambda g, out: g * out)])


def sin(x) -> Var:
    x = _lift(x)
    return _node(np.sin(x.value), [(x, lambda g, out: g * cos(x))])


def cos(x) -> Var:
    x = _lift(x)
    return _node(np.cos(x.value), [(x, lambda g, out: neg(g * sin(x)))])


def sigmoid(x) -> Var:
    x = _lift(x)
    value = np.exp(-np.logaddexp(0.0, -x.value))
    return _node(value, [(x, lambda g, out: g * (out * (1.0 - out)))])


def reshape(x, shape) -> Var:
    x = _lift(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _node(x.value.reshape(shape), [(x, lambda g, out: reshape(g, x.shape))])


def transpose(x) -> Var:
    x = _lift(x)
    if x.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _node(x.value.T.copy(), [(x, lambda g, out: transpose(g))])


def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[1:])
    return _node(a.value @ b.value, [
        (a, lambda g, out: matmul(g, transpose(b))),
        (b, lambda g, out: matmul(transpose(a), g)),
    ])


def vsum(x, axis: Optional[int] = None) -> Var:
    x = _lift(x)
    if axis is None:
        return sum_to(x, ())
    axis = axis % x.ndim
    kept = list(x.shape)
    kept[axis] = 1
    dropped = x.shape[:axis] + x.shape[axis + 1:]
    return reshape(sum_to(x, kept), dropped)


def mean(x, axis: Optional[int] = None) -> Var:
    x = _lift(x)
    count = x.size if axis is None else x.shape[axis]
    return vsum(x, axis) * (1.0 / count)


def flip(x, axis: int = 0) -> Var:
    x = _lift(x)
    return _node(np.flip(x.value, axis=axis).copy(), [(x, lambda g, out: flip(g, axis))])


def cumsum(x, axis: int = 0) -> Var:
    x = _lift(x)
    return _node(np.cumsum(x.value, axis=axis),
                 [(x, lambda g, out: flip(cumsum(flip(g, axis), axis), axis))])


def getitem(x, index) -> Var:
    x = _lift(x)
    return _node(np.array(x.value[index], dtype=np.float64),
                 [(x, lambda g, out: embed(g, index, x.shape))])


def embed(x, index, shape) -> Var:
    """Scatter-add `x` into zeros of `shape` at `index` (adjoint of indexing)."""
    x = _lift(x)
    shape = tuple(shape)
    value = np.zeros(shape)
    np.add.at(value, index, x.value)
    return _node(value, [(x, lambda g, out: getitem(g, index))])


# ============================================================================
# TAPE
# ============================================================================


class Tape:
    """Append-only record of operations, in creation (topological) order."""

    def __init__(self):
        self.nodes: List[Var] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value) -> Var:
        """Register an independent input on this tape."""
        return Var(np.array(value, dtype=np.float64), tape=self)

    def gradient(self, output: Var, wrt: Sequence[Var], create_graph: bool = False) -> List[Var]:
        """Gradients of scalar `output` with respect to each of `wrt`.

        With ``create_graph=True`` the backward pass is itself recorded, so the
        returned gradients are differentiable functions of the tape inputs.
        """
        if output.size != 1:
            raise ValueError("gradient needs a scalar output")
        for w in wrt:
            if w.tape is not self:
                raise ValueError("gradient requested for a value that is not on this tape")
        zeros = [Var(np.zeros_like(w.value)) for w in wrt]
        if output.tape is not self or not wrt:
            return zeros

        low = min(w.index for w in wrt)
        high = output.index
        if high < low:
            return zeros
        wanted = {w.index for w in wrt}

        depends = set(wanted)
        for node in self.nodes[low:high + 1]:
            if node.index not in depends and any(p.index in depends for p, _ in node.parents):
                depends.add(node.index)
        if high not in depends:
            return zeros

        grads = {high: Var(np.ones_like(output.value))}
        with _recording_as(create_graph):
            for node in reversed(self.nodes[low:high + 1]):
                g = grads.get(node.index) if node.index in wanted else grads.pop(node.index, None)
                if g is None:
                    continue
                for parent, vjp in node.parents:
                    if parent.index not in depends:
                        continue
                    contribution = vjp(g, node)
                    previous = grads.get(parent.index)
                    grads[parent.index] = contribution if previous is None else previous + contribution

        result = []
        for w, zero in zip(wrt, zeros):
            g = grads.get(w.index)
            result.append(zero if g is None else g)
        return result


# ============================================================================
# GRADIENT API
# ============================================================================

# f(inputs) -> scalar; parameters, if any, are bound by the caller
ScalarFunction = Callable[[Var], Var]
# f(params, inputs) -> scalar
ParametricFunction = Callable[[Var, Var], Var]


def _first_nonfinite(values: np.ndarray) -> Optional[int]:
    bad = np.flatnonzero(~np.isfinite(np.asarray(values, dtype=np.float64)))
    return int(bad[0]) if bad.size else None


def evaluate(fn: ScalarFunction, point) -> float:
    return float(fn(Var(np.array(point, dtype=np.float64))).value)


def value_and_grad(fn: ScalarFunction, point) -> Tuple[float, np.ndarray]:
    tape = Tape()
    x = tape.var(point)
    y = fn(x)
    (g,) = tape.gradient(y, [x])
    return float(y.value), g.value.copy()


def grad_wrt_actions(cost: ScalarFunction, actions) -> np.ndarray:
    """∇_u C at `actions`; raises NumericDomainError on non-finite values."""
    actions = np.asarray(actions, dtype=np.float64)
    bad = _first_nonfinite(actions)
    if bad is not None:
        raise NumericDomainError("action vector is not finite", bad)
    value, grad = value_and_grad(cost, actions)
    if not np.isfinite(value):
        raise NumericDomainError("cost is not finite at the evaluation point", _first_nonfinite(grad))
    bad = _first_nonfinite(grad)
    if bad is not None:
        raise NumericDomainError("cost gradient is not finite", bad)
    return grad


@dataclass(frozen=True)
class InnerLoop:
    """N plain gradient steps on the actions against a φ-dependent cost.

    `truncate` keeps only the last k steps differentiable with respect to φ;
    None differentiates through every step.
    """

    cost: ParametricFunction
    u0: np.ndarray
    alpha: float
    steps: int
    truncate: Optional[int] = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("inner steps must be >= 0")
        if self.truncate is not None and self.truncate < 1:
            raise ValueError("truncate must be >= 1 or None")

    def run(self, phi: Var) -> Var:
        tape = phi.tape if phi.tape is not None else Tape()
        u = tape.var(self.u0)
        first_tracked = 0 if self.truncate is None else max(self.steps - self.truncate, 0)
        with _recording_as(True):
            for step in range(self.steps):
                tracked = step >= first_tracked and phi.tape is not None
                c = self.cost(phi, u)
                (g,) = tape.gradient(c, [u], create_graph=tracked)
                u = u - self.alpha * g
                bad = _first_nonfinite(u.value)
                if bad is not None:
                    logger.error("inner loop diverged at step %d", step)
                    raise DivergenceError("inner loop diverged", step=step, index=bad)
                if not tracked:
                    u = tape.var(u.value)
        return u


def unrolled_value_and_grad(phi, inner: InnerLoop,
                            outer_loss: ScalarFunction) -> Tuple[float, np.ndarray, np.ndarray]:
    """(L, ∇_φ L, u_N) with L = outer_loss(u_N(φ)), differentiated through the inner loop."""
    tape = Tape()
    phi_var = tape.var(phi)
    u = inner.run(phi_var)
    loss = outer_loss(u)
    if not np.all(np.isfinite(loss.value)):
        raise NumericDomainError("outer loss is not finite")
    (g,) = tape.gradient(loss, [phi_var])
    bad = _first_nonfinite(g.value)
    if bad is not None:
        raise NumericDomainError("outer gradient is not finite", bad)
    logger.debug("unrolled %d inner steps on a tape of %d nodes", inner.steps, len(tape))
    return float(loss.value), g.value.copy(), u.value.copy()


def grad_through_inner_loop(phi, inner: InnerLoop, outer_loss: ScalarFunction) -> np.ndarray:
    return unrolled_value_and_grad(phi, inner, outer_loss)[1]


# ============================================================================
# VERIFICATION
# ============================================================================


@dataclass(frozen=True)
class GradientReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    eps: float

    def __post_init__(self):
        if self.analytic.shape != self.numeric.shape:
            raise ValueError("analytic and numeric gradients differ in length")

    def passed(self, tolerance: float) -> bool:
        return bool(self.max_rel_error < tolerance)


def finite_difference(fn: ScalarFunction, point, eps: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+εe_i) - f(x-εe_i)) / 2ε for every coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(point, dtype=np.float64)
    flat = x0.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        x = flat.copy()
        x[i] = flat[i] + eps
        f_plus = evaluate(fn, x.reshape(x0.shape))
        x[i] = flat[i] - eps
        f_minus = evaluate(fn, x.reshape(x0.shape))
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(x0.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return float("inf")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERROR_FLOOR)
    return float(np.max(np.abs(a - b) / denom))


def check_gradient(fn: ScalarFunction, point, eps: float = 1e-5) -> GradientReport:
    """Compare the tape gradient of `fn` at `point` with central differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = np.array(point, dtype=np.float64)
    _, analytic = value_and_grad(fn, point)
    numeric = finite_difference(fn, point, eps)
    return GradientReport(analytic=analytic, numeric=numeric,
                          max_rel_error=relative_error(analytic, numeric), eps=eps)
