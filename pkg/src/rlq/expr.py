"""Coefficient expressions and matrix-valued functions of ``(t, w)``.

Expressions use a tiny grammar: real literals, the variables ``t`` and ``w``,
``+ - * /``, parentheses and ``sin``, ``cos``, ``exp``.  They are parsed with
:mod:`ast` and compiled to closures that broadcast over numpy arrays.
"""
import ast
import numbers

import numpy as np

from .errors import DimensionError, ParseError

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
}


class Expression:
    """A compiled scalar expression in ``t`` and ``w``."""

    def __init__(self, text, field=None):
        self.text = str(text)
        try:
            tree = ast.parse(self.text.strip(), mode="eval")
        except SyntaxError as exc:
            raise ParseError(f"cannot parse expression {self.text!r}: {exc.msg}", field=field) from None
        self.variables = set()
        self._fn = self._compile(tree.body, field)

    def _compile(self, node, field):
        if isinstance(node, ast.Constant) and isinstance(node.value, numbers.Real) \
                and not isinstance(node.value, bool):
            value = float(node.value)
            return lambda t, w: value
        if isinstance(node, ast.Name):
            if node.id == "t":
                self.variables.add("t")
                return lambda t, w: t
            if node.id == "w":
                self.variables.add("w")
                return lambda t, w: w
            raise ParseError(f"unknown variable {node.id!r} in {self.text!r}", field=field)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            left = self._compile(node.left, field)
            right = self._compile(node.right, field)
            return lambda t, w: op(left(t, w), right(t, w))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = self._compile(node.operand, field)
            if isinstance(node.op, ast.USub):
                return lambda t, w: np.negative(inner(t, w))
            return inner
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords:
            fn = _FUNCS[node.func.id]
            arg = self._compile(node.args[0], field)
            return lambda t, w: fn(arg(t, w))
        raise ParseError(f"unsupported syntax in expression {self.text!r}", field=field)

    @property
    def is_constant(self):
        return not self.variables

    def __call__(self, t, w=0.0):
        return self._fn(t, w)

    def __repr__(self):
        return f"Expression({self.text!r})"


def _as_entry(value, field):
    if isinstance(value, str):
        return Expression(value, field)
    if isinstance(value, numbers.Real) and not isinstance(value, bool):
        return float(value)
    raise ParseError(f"matrix entry must be a number or expression string, got {value!r}", field=field)


class MatrixFunction:
    """Matrix- or vector-valued coefficient ``f(t, w)``.

    Calling with array-valued ``t``/``w`` broadcasts them and appends the
    coefficient shape, i.e. ``f(t, w).shape == np.broadcast(t, w).shape + f.shape``.
    """

    def __init__(self, shape, *, const=None, entries=None, fn=None, source=None,
                 symmetric=False, uses_w=False, uses_t=False):
        self.shape = tuple(shape)
        self._const = None if const is None else np.asarray(const, dtype=float).reshape(self.shape)
        self._entries = entries
        self._fn = fn
        self.source = source
        self.symmetric = symmetric
        self.uses_w = uses_w
        self.uses_t = uses_t

    # -- constructors -------------------------------------------------
    @classmethod
    def constant(cls, value, shape=None, symmetric=False):
        arr = np.array(value, dtype=float)
        if shape is not None:
            shape = tuple(shape)
            if arr.size == 1 and arr.shape != shape:
                arr = np.full(shape, float(arr.reshape(-1)[0])) if arr.ndim == 0 else arr.reshape(shape)
            if arr.shape != shape:
                raise DimensionError(f"expected shape {shape}, got {arr.shape}")
        if symmetric:
            arr = 0.5 * (arr + arr.T)
        return cls(arr.shape, const=arr, source=arr.tolist(), symmetric=symmetric)

    @classmethod
    def zeros(cls, shape):
        return cls.constant(np.zeros(shape))

    @classmethod
    def from_literal(cls, literal, shape, field=None, symmetric=False):
        """Build from a config literal: nested lists of numbers/strings, or a bare scalar for size-1 shapes."""
        shape = tuple(shape)
        size = int(np.prod(shape))
        if isinstance(literal, (str, numbers.Real)) and not isinstance(literal, bool):
            if size != 1:
                raise DimensionError(f"{field}: scalar given for shape {shape}")
            flat = [literal]
        else:
            flat = _flatten(literal, shape, field)
        entries = [_as_entry(v, field) for v in flat]
        source = np.array(flat, dtype=object).reshape(shape).tolist()
        if all(isinstance(e, float) for e in entries):
            arr = np.array(entries, dtype=float).reshape(shape)
            if symmetric:
                arr = 0.5 * (arr + arr.T)
            return cls(shape, const=arr, source=source, symmetric=symmetric)
        uses_w = any(isinstance(e, Expression) and "w" in e.variables for e in entries)
        uses_t = any(isinstance(e, Expression) and "t" in e.variables for e in entries)
        return cls(shape, entries=entries, source=source, symmetric=symmetric,
                   uses_w=uses_w, uses_t=uses_t)

    @classmethod
    def from_callable(cls, fn, shape, uses_w=True, uses_t=True, symmetric=False):
        """Wrap ``fn(t, w)`` returning ``batch + shape`` arrays (not serialisable)."""
        return cls(shape, fn=fn, uses_w=uses_w, uses_t=uses_t, symmetric=symmetric)

    # -- evaluation ---------------------------------------------------
    @property
    def is_constant(self):
        return self._const is not None

    def __call__(self, t, w=0.0):
        t = np.asarray(t, dtype=float)
        w = np.asarray(w, dtype=float)
        batch = np.broadcast_shapes(t.shape, w.shape)
        if self._const is not None:
            return np.broadcast_to(self._const, batch + self.shape).copy()
        if self._fn is not None:
            out = np.asarray(self._fn(t, w), dtype=float)
            out = np.broadcast_to(out, batch + self.shape).copy()
        else:
            vals = [np.broadcast_to(e(t, w) if isinstance(e, Expression) else e, batch)
                    for e in self._entries]
            out = np.stack(vals, axis=-1).reshape(batch + self.shape)
        if self.symmetric:
            out = 0.5 * (out + np.swapaxes(out, -1, -2))
        return out

    def is_zero(self):
        return self._const is not None and not np.any(self._const)

    def serialisable(self):
        return self.source is not None

    def __repr__(self):
        kind = "const" if self._const is not None else ("expr" if self._entries else "callable")
        return f"MatrixFunction(shape={self.shape}, {kind})"


def _flatten(literal, shape, field):
    if len(shape) == 1:
        if not isinstance(literal, (list, tuple)) or len(literal) != shape[0]:
            raise DimensionError(f"{field}: expected a vector of length {shape[0]}, got {literal!r}")
        if any(isinstance(v, (list, tuple)) for v in literal):
            raise DimensionError(f"{field}: expected a flat vector, got nested lists")
        return list(literal)
    rows, cols = shape
    if not isinstance(literal, (list, tuple)) or len(literal) != rows:
        raise DimensionError(f"{field}: expected {rows} rows for shape {shape}, got {literal!r}")
    flat = []
    for r, row in enumerate(literal):
        if not isinstance(row, (list, tuple)) or len(row) != cols:
            got = len(row) if isinstance(row, (list, tuple)) else 1
            raise DimensionError(f"{field}: row {r + 1} has {got} entries, expected {cols}")
        flat.extend(row)
    return flat


def as_matrix_function(value, shape, symmetric=False, field=None):
    """Coerce arrays, scalars, literals, callables or MatrixFunctions to a :class:`MatrixFunction`."""
    if isinstance(value, MatrixFunction):
        if value.shape != tuple(shape):
            raise DimensionError(f"{field}: expected shape {tuple(shape)}, got {value.shape}")
        return value
    if value is None:
        return MatrixFunction.zeros(shape)
    if callable(value) and not isinstance(value, Expression):
        return MatrixFunction.from_callable(value, shape, symmetric=symmetric)
    if isinstance(value, np.ndarray) and value.dtype != object:
        return MatrixFunction.constant(value, shape, symmetric=symmetric)
    if isinstance(value, numbers.Real) and not isinstance(value, bool):
        arr = np.asarray(float(value))
        if int(np.prod(shape)) != 1:
            raise DimensionError(f"{field}: scalar given for shape {tuple(shape)}")
        return MatrixFunction.constant(arr.reshape(shape), shape, symmetric=symmetric)
    return MatrixFunction.from_literal(value, shape, field=field, symmetric=symmetric)
