"""Scalar expression graphs with symbolic differentiation and code generation.

Expressions are built with ordinary Python operators on :class:`Expr` nodes::

    x, y = symbols("x", 2)
    f = x * y + exp(x)
    grad = gradient(f, [x, y])           # list of Expr
    fn = compile_function([[x, y]], [f] + grad)
    fn(np.array([[1.0, 2.0], [3.0, 4.0]]))  # evaluated column-wise

Derivatives are themselves expression graphs, so they can be evaluated,
differentiated again or compiled. Compiled functions accept numpy arrays for
every symbol, which lets one graph be evaluated for many instances at once
(the MPC uses this to evaluate the per-stage dynamics for the whole horizon
in a single call).
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expr",
    "DomainError",
    "NonDifferentiableError",
    "ExpressionGraph",
    "symbol",
    "symbols",
    "const",
    "exp",
    "log",
    "sqrt",
    "minimum",
    "maximum",
    "smooth_min",
    "smooth_max",
    "topological_order",
    "evaluate",
    "gradient",
    "jacobian",
    "jvp",
    "hessian",
    "compile_function",
]

_counter = itertools.count()


class DomainError(ArithmeticError):
    """Raised when a node is evaluated outside its domain."""

    def __init__(self, node: "Expr", message: str):
        super().__init__(f"node {node.uid} ({node.op}): {message}")
        self.node = node


class NonDifferentiableError(ValueError):
    """Raised when differentiating through ``min``/``max``."""


class Expr:
    """A node of a scalar expression DAG.

    Operands always precede the node that uses them, since a node can only be
    created from existing nodes; the graph is therefore acyclic by construction.
    """

    __slots__ = ("op", "args", "value", "name", "uid")

    def __init__(self, op: str, args: tuple = (), value: float | None = None, name: str | None = None):
        self.op = op
        self.args = args
        self.value = value
        self.name = name
        self.uid = next(_counter)

    def __repr__(self) -> str:
        if self.op == "const":
            return repr(self.value)
        if self.op == "sym":
            return self.name
        return f"{self.op}({', '.join(map(repr, self.args))})"

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    def __add__(self, other):
        return _add(self, _wrap(other))

    def __radd__(self, other):
        return _add(_wrap(other), self)

    def __sub__(self, other):
        return _add(self, _neg(_wrap(other)))

    def __rsub__(self, other):
        return _add(_wrap(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    def __rmul__(self, other):
        return _mul(_wrap(other), self)

    def __truediv__(self, other):
        return _div(self, _wrap(other))

    def __rtruediv__(self, other):
        return _div(_wrap(other), self)

    def __neg__(self):
        return _neg(self)

    def __pos__(self):
        return self

    def __pow__(self, other):
        return _pow(self, _wrap(other))

    def __rpow__(self, other):
        return _pow(_wrap(other), self)


def const(value: float) -> Expr:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"non-finite constant {value!r}")
    return Expr("const", value=value)


def symbol(name: str) -> Expr:
    return Expr("sym", name=name)


def symbols(name: str, n: int) -> list[Expr]:
    return [Expr("sym", name=f"{name}[{i}]") for i in range(n)]


def _wrap(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return const(x)
    raise TypeError(f"cannot build an expression from {type(x).__name__}")


def _is(e: Expr, v: float) -> bool:
    return e.op == "const" and e.value == v


# constructors with light constant folding; folding keeps derivative graphs small


def _add(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return Expr("add", (a, b))


def _neg(a: Expr) -> Expr:
    if a.is_const:
        return const(-a.value)
    if a.op == "neg":
        return a.args[0]
    return Expr("neg", (a,))


def _mul(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return const(0.0)
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return _neg(b)
    if _is(b, -1.0):
        return _neg(a)
    return Expr("mul", (a, b))


def _div(a: Expr, b: Expr) -> Expr:
    if _is(b, 0.0):
        raise ZeroDivisionError("division by the constant zero")
    if a.is_const and b.is_const:
        return const(a.value / b.value)
    if _is(a, 0.0):
        return const(0.0)
    if _is(b, 1.0):
        return a
    return Expr("div", (a, b))


def _pow(a: Expr, b: Expr) -> Expr:
    if b.is_const:
        if b.value == 0.0:
            return const(1.0)
        if b.value == 1.0:
            return a
    if a.is_const and b.is_const:
        return const(a.value**b.value)
    return Expr("pow", (a, b))


def exp(a) -> Expr:
    a = _wrap(a)
    if a.is_const:
        return const(math.exp(a.value))
    return Expr("exp", (a,))


def log(a) -> Expr:
    a = _wrap(a)
    if a.is_const:
        return const(math.log(a.value))
    return Expr("log", (a,))


def sqrt(a) -> Expr:
    a = _wrap(a)
    if a.is_const:
        return const(math.sqrt(a.value))
    return Expr("sqrt", (a,))


def minimum(a, b) -> Expr:
    """Exact minimum. Evaluable, but refuses to be differentiated."""
    return Expr("min", (_wrap(a), _wrap(b)))


def maximum(a, b) -> Expr:
    """Exact maximum. Evaluable, but refuses to be differentiated."""
    return Expr("max", (_wrap(a), _wrap(b)))


def smooth_min(a, b, eps: float) -> Expr:
    """``(a + b - sqrt((a - b)**2 + eps**2)) / 2``, built from smooth nodes only.

    Underestimates ``min(a, b)`` by at most ``eps / 2``.
    """
    a, b = _wrap(a), _wrap(b)
    return 0.5 * (a + b - sqrt((a - b) ** 2 + eps**2))


def smooth_max(a, b, eps: float) -> Expr:
    """``(a + b + sqrt((a - b)**2 + eps**2)) / 2``; overestimates by at most ``eps / 2``."""
    a, b = _wrap(a), _wrap(b)
    return 0.5 * (a + b + sqrt((a - b) ** 2 + eps**2))


# ---------------------------------------------------------------------------
# traversal and evaluation


def topological_order(outputs: Iterable[Expr]) -> list[Expr]:
    """All nodes reachable from ``outputs``, operands before users."""
    order: list[Expr] = []
    seen: set[int] = set()
    for root in outputs:
        if root.uid in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for arg in reversed(node.args):
                if arg.uid not in seen:
                    stack.append((arg, False))
    return order


def _apply(node: Expr, vals: Sequence[float]) -> float:
    op = node.op
    if op == "add":
        return vals[0] + vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "neg":
        return -vals[0]
    if op == "div":
        if vals[1] == 0.0:
            raise DomainError(node, "division by zero")
        return vals[0] / vals[1]
    if op == "pow":
        base, ex = vals
        if base < 0.0 and not float(ex).is_integer():
            raise DomainError(node, f"negative base {base} with non-integer exponent {ex}")
        if base == 0.0 and ex < 0.0:
            raise DomainError(node, "zero raised to a negative power")
        return base**ex
    if op == "exp":
        try:
            return math.exp(vals[0])
        except OverflowError:
            raise DomainError(node, f"exp overflow at {vals[0]}") from None
    if op == "log":
        if vals[0] <= 0.0:
            raise DomainError(node, f"log of non-positive value {vals[0]}")
        return math.log(vals[0])
    if op == "sqrt":
        if vals[0] < 0.0:
            raise DomainError(node, f"sqrt of negative value {vals[0]}")
        return math.sqrt(vals[0])
    if op == "min":
        return min(vals)
    if op == "max":
        return max(vals)
    raise ValueError(f"unknown op {op!r}")


def evaluate(outputs: Sequence[Expr], env: Mapping[Expr, float]) -> list[float]:
    """Interpreted forward evaluation. ``env`` maps every reachable symbol to a value."""
    vals: dict[int, float] = {}
    for node in topological_order(outputs):
        if node.op == "const":
            vals[node.uid] = node.value
        elif node.op == "sym":
            try:
                v = float(env[node])
            except KeyError:
                raise KeyError(f"no value supplied for symbol {node.name!r}") from None
            if not math.isfinite(v):
                raise ValueError(f"non-finite value for symbol {node.name!r}")
            vals[node.uid] = v
        else:
            vals[node.uid] = _apply(node, [vals[a.uid] for a in node.args])
    return [vals[o.uid] for o in outputs]


# ---------------------------------------------------------------------------
# differentiation


def _partials(node: Expr) -> list[tuple[Expr, Expr]]:
    """(operand, d node / d operand) pairs, as expressions."""
    op, args = node.op, node.args
    if op == "add":
        return [(args[0], const(1.0)), (args[1], const(1.0))]
    if op == "mul":
        return [(args[0], args[1]), (args[1], args[0])]
    if op == "neg":
        return [(args[0], const(-1.0))]
    if op == "div":
        a, b = args
        return [(a, 1.0 / b), (b, -node / b)]
    if op == "pow":
        a, b = args
        out = [(a, b * a ** (b - 1.0))]
        if not b.is_const:
            out.append((b, node * log(a)))
        return out
    if op == "exp":
        return [(args[0], node)]
    if op == "log":
        return [(args[0], 1.0 / args[0])]
    if op == "sqrt":
        return [(args[0], 0.5 / node)]
    if op in ("min", "max"):
        raise NonDifferentiableError(f"node {node.uid} ({op}) is not differentiable")
    return []


def gradient(output: Expr, wrt: Sequence[Expr]) -> list[Expr]:
    """Reverse-mode symbolic gradient of a scalar expression."""
    order = topological_order([output])
    adj: dict[int, Expr] = {output.uid: const(1.0)}
    for node in reversed(order):
        bar = adj.get(node.uid)
        if bar is None or node.op in ("const", "sym"):
            continue
        for arg, partial in _partials(node):
            if arg.is_const:
                continue
            contrib = bar * partial
            prev = adj.get(arg.uid)
            adj[arg.uid] = contrib if prev is None else prev + contrib
    return [adj.get(w.uid, const(0.0)) for w in wrt]


def jacobian(outputs: Sequence[Expr], wrt: Sequence[Expr]) -> list[list[Expr]]:
    return [gradient(o, wrt) for o in outputs]


def jvp(outputs: Sequence[Expr], wrt: Sequence[Expr], tangent: Sequence) -> list[Expr]:
    """Forward-mode symbolic directional derivative of ``outputs`` along ``tangent``."""
    dot: dict[int, Expr] = {}
    for w, t in zip(wrt, tangent):
        t = _wrap(t)
        if not _is(t, 0.0):
            dot[w.uid] = t
    if not dot:
        return [const(0.0) for _ in outputs]
    for node in topological_order(outputs):
        if node.op in ("const", "sym"):
            continue
        acc = None
        for arg, partial in _partials_lazy(node, dot):
            term = partial * dot[arg.uid]
            acc = term if acc is None else acc + term
        if acc is not None:
            dot[node.uid] = acc
    return [dot.get(o.uid, const(0.0)) for o in outputs]


def _partials_lazy(node: Expr, dot: dict[int, Expr]):
    # only build partials for operands that carry a tangent
    if not any(a.uid in dot for a in node.args):
        return []
    return [(a, p) for a, p in _partials(node) if a.uid in dot]


def hessian(output: Expr, wrt: Sequence[Expr], lower_only: bool = False) -> list[list[Expr]]:
    """Forward-over-reverse symbolic Hessian of a scalar expression."""
    grad = gradient(output, wrt)
    n = len(wrt)
    H: list[list[Expr]] = [[const(0.0)] * n for _ in range(n)]
    for j in range(n):
        e = [0.0] * n
        e[j] = 1.0
        col = jvp(grad[j:] if lower_only else grad, wrt, e)
        if lower_only:
            for i, h in enumerate(col, start=j):
                H[i][j] = h
                H[j][i] = h
        else:
            for i in range(n):
                H[i][j] = col[i]
    return H


# ---------------------------------------------------------------------------
# graph container


class ExpressionGraph:
    """Designated outputs over declared variable and parameter symbols."""

    def __init__(self, outputs: Sequence[Expr], variables: Sequence[Expr], parameters: Sequence[Expr] = ()):
        self.outputs = list(outputs)
        self.variables = list(variables)
        self.parameters = list(parameters)
        declared = {s.uid for s in self.variables} | {s.uid for s in self.parameters}
        self.nodes = topological_order(self.outputs)
        for node in self.nodes:
            if node.op == "sym" and node.uid not in declared:
                raise ValueError(f"undeclared symbol {node.name!r} in graph")

    def evaluate(self, x: Sequence[float], p: Sequence[float] = ()) -> np.ndarray:
        x, p = np.asarray(x, dtype=float).ravel(), np.asarray(p, dtype=float).ravel()
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise ValueError("inputs must be finite")
        env = dict(zip(self.variables, x))
        env.update(zip(self.parameters, p))
        return np.array(evaluate(self.outputs, env))

    def differentiate(self, order: int = 1) -> "ExpressionGraph":
        """First order: Jacobian graph (row-major). Second order: Hessian of the single output."""
        if order == 1:
            outs = [d for row in jacobian(self.outputs, self.variables) for d in row]
        elif order == 2:
            if len(self.outputs) != 1:
                raise ValueError("second derivatives require a scalar output")
            outs = [h for row in hessian(self.outputs[0], self.variables, lower_only=True) for h in row]
        else:
            raise ValueError("order must be 1 or 2")
        return ExpressionGraph(outs, self.variables, self.parameters)

    def compile(self) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        fn = compile_function([self.variables, self.parameters], self.outputs)

        def call(x, p=()):
            x = np.asarray(x, dtype=float)
            p = np.asarray(p, dtype=float)
            return fn(x.reshape(len(self.variables), -1), p.reshape(len(self.parameters), -1))[:, 0]

        return call


# ---------------------------------------------------------------------------
# code generation

_NP_FUNCS = {"exp": "_exp", "log": "_log", "sqrt": "_sqrt"}


def compile_function(inputs: Sequence[Sequence[Expr]], outputs: Sequence[Expr], name: str = "fn"):
    """Generate straight-line numpy code for ``outputs``.

    The returned callable takes one array per entry of ``inputs``; row ``i`` of
    the k-th array holds the values of ``inputs[k][i]`` for every instance
    (shape ``(len(inputs[k]), K)``, or ``(len(inputs[k]),)`` for a single
    instance broadcast). It returns an array of shape ``(len(outputs), K)``.
    Structurally identical subexpressions are emitted once.
    """
    sym_src: dict[int, str] = {}
    for k, group in enumerate(inputs):
        for i, s in enumerate(group):
            if s.op != "sym":
                raise ValueError("inputs must be symbols")
            sym_src[s.uid] = f"a{k}[{i}]"

    lines: list[str] = []
    names: dict[int, str] = {}  # uid -> expression text or temp name
    canon: dict[tuple, str] = {}
    n_tmp = 0
    for node in topological_order(outputs):
        if node.op == "const":
            names[node.uid] = repr(node.value)
            continue
        if node.op == "sym":
            if node.uid not in sym_src:
                raise ValueError(f"symbol {node.name!r} is not an input")
            names[node.uid] = sym_src[node.uid]
            continue
        argn = [names[a.uid] for a in node.args]
        key = (node.op, *argn)
        if key in canon:
            names[node.uid] = canon[key]
            continue
        op = node.op
        if op == "add":
            src = f"{argn[0]} + {argn[1]}"
        elif op == "mul":
            src = f"{argn[0]} * {argn[1]}"
        elif op == "neg":
            src = f"-{argn[0]}"
        elif op == "div":
            src = f"{argn[0]} / {argn[1]}"
        elif op == "pow":
            b = node.args[1]
            if b.is_const and b.value == 2.0:
                src = f"{argn[0]} * {argn[0]}"
            else:
                src = f"_pow({argn[0]}, {argn[1]})"
        elif op in _NP_FUNCS:
            src = f"{_NP_FUNCS[op]}({argn[0]})"
        elif op == "min":
            src = f"_minimum({argn[0]}, {argn[1]})"
        elif op == "max":
            src = f"_maximum({argn[0]}, {argn[1]})"
        else:
            raise ValueError(f"unknown op {op!r}")
        tmp = f"t{n_tmp}"
        n_tmp += 1
        lines.append(f"    {tmp} = {src}")
        names[node.uid] = tmp
        canon[key] = tmp

    args = ", ".join(f"a{k}" for k in range(len(inputs)))
    body = [f"def {name}({args}):"]
    body.append(f"    K = _ninst(({args},))")
    body.extend(lines)
    body.append(f"    out = _empty(({len(outputs)}, K))")
    for i, o in enumerate(outputs):
        body.append(f"    out[{i}] = {names[o.uid]}")
    body.append("    return out")
    namespace = {
        "_exp": np.exp,
        "_log": np.log,
        "_sqrt": np.sqrt,
        "_pow": np.power,
        "_minimum": np.minimum,
        "_maximum": np.maximum,
        "_empty": np.empty,
        "_ninst": _n_instances,
    }
    exec(compile("\n".join(body), f"<autodiff:{name}>", "exec"), namespace)
    return namespace[name]


def _n_instances(arrays) -> int:
    k = 1
    for a in arrays:
        a = np.asarray(a)
        if a.ndim >= 2:
            k = max(k, a.shape[1])
    return k
