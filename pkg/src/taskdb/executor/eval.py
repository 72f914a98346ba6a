"""Expression evaluation, aggregates, window functions and ordering.

Semantics, kept deliberately small:

* NULL (``None``) propagates through arithmetic and comparisons; a filter
  keeps a row only when its predicate is exactly true. AND/OR use SQL
  three-valued logic.
* Values of different kinds (number, text, tensor) compare unequal and are
  unordered.
* Division or modulo by zero yields NULL.
* SUM and AVG use correctly rounded summation, so results do not depend on
  row order.
"""

from __future__ import annotations

import functools
import math
import operator
from typing import Callable, Sequence

from taskdb.errors import PlanError
from taskdb.planner.dsl import Binary, Call, Literal, Ref, Unary
from taskdb.tensor import Mvec


def value_kind(v) -> int:
    """1 number, 2 text, 3 tensor, 4 anything else."""
    if isinstance(v, (bool, int, float)):
        return 1
    if isinstance(v, str):
        return 2
    if isinstance(v, Mvec):
        return 3
    return 4


def truth(v):
    return None if v is None else bool(v)


_ORDERING = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}


def compare(op: str, a, b):
    if a is None or b is None:
        return None
    same = value_kind(a) == value_kind(b)
    if op == "=":
        return same and a == b
    if op == "!=":
        return not (same and a == b)
    if not same or isinstance(a, Mvec):
        return None
    return _ORDERING[op](a, b)


def arith(op: str, a, b):
    if a is None or b is None:
        return None
    if op == "+" and isinstance(a, str) and isinstance(b, str):
        return a + b
    if value_kind(a) != 1 or value_kind(b) != 1:
        raise TypeError(f"cannot apply {op!r} to {type(a).__name__} and {type(b).__name__}")
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0:
        return None
    if op == "/":
        return a / b
    return a % b


def _scalar(name: str, args: list):
    if any(a is None for a in args):
        return None
    x = args[0]
    if name == "abs":
        return abs(x)
    if name == "lower":
        return str(x).lower()
    if name == "upper":
        return str(x).upper()
    if name == "length":
        return x.size if isinstance(x, Mvec) else len(str(x))
    if name == "round":
        return round(x, int(args[1])) if len(args) > 1 else round(x)
    raise PlanError(f"unknown function {name!r}")


def compile_expr(e) -> Callable[[dict], object]:
    """Turn a resolved expression into a function of one row dict."""
    if isinstance(e, Literal):
        v = e.value
        return lambda row: v
    if isinstance(e, Ref):
        key = e.key
        return lambda row: row[key]
    if isinstance(e, Unary):
        f = compile_expr(e.operand)
        if e.op == "not":
            def neg(row):
                v = truth(f(row))
                return None if v is None else not v
            return neg

        def minus(row):
            v = f(row)
            return None if v is None else -v
        return minus
    if isinstance(e, Binary):
        lf, rf = compile_expr(e.left), compile_expr(e.right)
        op = e.op
        if op == "and":
            def and_(row):
                a = truth(lf(row))
                if a is False:
                    return False
                b = truth(rf(row))
                if b is False:
                    return False
                return None if a is None or b is None else True
            return and_
        if op == "or":
            def or_(row):
                a = truth(lf(row))
                if a is True:
                    return True
                b = truth(rf(row))
                if b is True:
                    return True
                return None if a is None or b is None else False
            return or_
        if op in ("=", "!=", "<", "<=", ">", ">="):
            return lambda row: compare(op, lf(row), rf(row))
        return lambda row: arith(op, lf(row), rf(row))
    if isinstance(e, Call) and e.over is None and e.name in ("abs", "lower", "upper", "length", "round"):
        fs = [compile_expr(a) for a in e.args]
        name = e.name
        return lambda row: _scalar(name, [f(row) for f in fs])
    raise PlanError(f"expression cannot be evaluated row by row: {e!r}")


# -- aggregates ----------------------------------------------------------------

def _numeric_sum(values: list):
    if all(isinstance(v, int) for v in values):
        return sum(values)
    return math.fsum(values)


def aggregate(call: Call, rows: Sequence[dict], arg_fn: Callable | None) -> object:
    if call.star:
        return len(rows)
    values = [v for v in (arg_fn(r) for r in rows) if v is not None]
    if call.distinct:
        seen, uniq = set(), []
        for v in values:
            if v not in seen:
                seen.add(v)
                uniq.append(v)
        values = uniq
    name = call.name
    if name == "count":
        return len(values)
    if not values:
        return None
    if name == "sum":
        return _numeric_sum(values)
    if name == "avg":
        return math.fsum(values) / len(values)
    if name == "min":
        return min(values, key=sort_key)
    if name == "max":
        return max(values, key=sort_key)
    raise PlanError(f"unknown aggregate {name!r}")


# -- ordering ------------------------------------------------------------------

def sort_key(v):
    """Total order across kinds: NULL < numbers < text < tensors."""
    k = value_kind(v) if v is not None else 0
    if k == 3:
        return (3, v.shape, v.data.tobytes())
    if k == 4:
        return (4, repr(v))
    return (k, v)


def compare_keys(a: tuple, b: tuple, desc: Sequence[bool]) -> int:
    for x, y, d in zip(a, b, desc):
        kx, ky = sort_key(x), sort_key(y)
        if kx != ky:
            c = -1 if kx < ky else 1
            return -c if d else c
    return 0


def sort_rows(rows: list, key_fns: Sequence[Callable], desc: Sequence[bool]) -> list:
    """Stable sort of rows by evaluated keys."""
    keyed = [(tuple(f(r) for f in key_fns), r) for r in rows]
    keyed.sort(key=functools.cmp_to_key(lambda a, b: compare_keys(a[0], b[0], desc)))
    return [r for _, r in keyed]


# -- window functions ----------------------------------------------------------

def window_values(call: Call, rows: list) -> list:
    """Value of an analytic window call for each row, in input order.

    Partitions follow first appearance. With ORDER BY, aggregates run over
    the partition prefix up to and including the current row's peers;
    without it they cover the whole partition.
    """
    over = call.over
    part_fns = [compile_expr(e) for e in over.partition_by]
    order_fns = [compile_expr(o.expr) for o in over.order_by]
    desc = [o.desc for o in over.order_by]
    arg_fn = compile_expr(call.args[0]) if call.args else None
    parts: dict = {}
    for i, r in enumerate(rows):
        parts.setdefault(tuple(f(r) for f in part_fns), []).append(i)
    out = [None] * len(rows)
    for members in parts.values():
        keyed = [(tuple(f(rows[i]) for f in order_fns), i) for i in members]
        keyed.sort(key=functools.cmp_to_key(lambda a, b: compare_keys(a[0], b[0], desc)))
        n = len(keyed)
        # peer groups share order keys
        ends, start = [0] * n, 0
        while start < n:
            end = start
            while end + 1 < n and compare_keys(keyed[end + 1][0], keyed[start][0], desc) == 0:
                end += 1
            for j in range(start, end + 1):
                ends[j] = end
            start = end + 1
        for pos, (_, i) in enumerate(keyed):
            if call.name == "row_number":
                out[i] = pos + 1
            elif call.name == "rank":
                first = pos
                while first > 0 and ends[first - 1] == ends[pos]:
                    first -= 1
                out[i] = first + 1
            else:
                upto = ends[pos] + 1 if order_fns else n
                frame = [rows[keyed[j][1]] for j in range(upto)]
                out[i] = aggregate(call, frame, arg_fn)
    return out
