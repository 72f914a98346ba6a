"""Lexer, AST and recursive-descent parser for the task query language.

The language is a small SQL subset. Task calls look like scalar functions,
``sentiment(r.comment)``, and may carry a batching window
``OVER (ROWS BETWEEN CURRENT ROW AND 15 FOLLOWING)``. Identifiers are
case-insensitive and normalized to lower case.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from taskdb.errors import QuerySyntaxError

# -- AST ---------------------------------------------------------------------


class Expr:
    __slots__ = ()


@dataclass(frozen=True)
class Literal(Expr):
    value: object


@dataclass(frozen=True)
class Column(Expr):
    """Unresolved ``qualifier.name`` or bare ``name`` reference."""

    qualifier: str | None
    name: str


@dataclass(frozen=True)
class Ref(Expr):
    """Resolved reference to a concrete row column, e.g. ``"r.comment"`` or ``"__p3"``."""

    key: str


@dataclass(frozen=True)
class Star(Expr):
    qualifier: str | None = None


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    operand: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Over:
    partition_by: tuple = ()
    order_by: tuple = ()          # of OrderItem
    following: int | None = None  # ROWS BETWEEN CURRENT ROW AND n FOLLOWING


@dataclass(frozen=True)
class Call(Expr):
    name: str
    args: tuple = ()
    star: bool = False
    distinct: bool = False
    over: Over | None = None


@dataclass(frozen=True)
class OrderItem:
    expr: Expr
    desc: bool = False


@dataclass(frozen=True)
class SelectItem:
    expr: Expr
    alias: str | None = None


@dataclass(frozen=True)
class TableRef:
    name: str
    alias: str


@dataclass(frozen=True)
class Select:
    items: tuple
    tables: tuple                 # of TableRef, FROM order
    join_on: tuple = ()           # ON conditions of INNER JOINs
    where: Expr | None = None
    group_by: tuple = ()
    having: Expr | None = None
    order_by: tuple = ()
    limit: int | None = None
    distinct: bool = False


@dataclass(frozen=True)
class CreateTask:
    name: str
    input_type: str
    output_labels: tuple | None   # None means numeric output
    task_type: str
    model_id: int | None = None


@dataclass(frozen=True)
class SelectModel:
    task: str


@dataclass(frozen=True)
class Explain:
    statement: object


AGGREGATES = frozenset({"avg", "count", "sum", "min", "max"})
RANKING = frozenset({"row_number", "rank"})
SCALARS = frozenset({"abs", "lower", "upper", "length", "round"})

# -- lexer -------------------------------------------------------------------

KEYWORDS = frozenset("""
    select from where group by having order limit as and or not join inner on asc desc distinct
    over partition rows between current row following create task model for explain in true false null
""".split())

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+|--[^\n]*)
  | (?P<number>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<qident>`[^`]*`)
  | (?P<string>'(?:[^']|'')*'|"(?:[^"]|"")*")
  | (?P<op><>|!=|<=|>=|[-+*/%=<>(),.;])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str   # "kw", "ident", "number", "string", "op", "eof"
    value: object
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens, pos, line, line_start = [], 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind, raw = m.lastgroup, m.group()
        col = pos - line_start + 1
        if kind == "ident":
            low = raw.lower()
            tokens.append(Token("kw" if low in KEYWORDS else "ident", low, line, col))
        elif kind == "qident":
            tokens.append(Token("ident", raw[1:-1].lower(), line, col))
        elif kind == "number":
            value = float(raw) if any(c in raw for c in ".eE") else int(raw)
            tokens.append(Token("number", value, line, col))
        elif kind == "string":
            q = raw[0]
            tokens.append(Token("string", raw[1:-1].replace(q + q, q), line, col))
        elif kind == "op":
            tokens.append(Token("op", "!=" if raw == "<>" else raw, line, col))
        newlines = raw.count("\n")
        if newlines:
            line += newlines
            line_start = pos + raw.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", None, line, pos - line_start + 1))
    return tokens


# -- parser ------------------------------------------------------------------

_INPUT_TYPES = {"text": "Text", "text_blob": "Text", "image": "Image", "image_blob": "Image",
                "series": "Series", "time_series": "Series", "tensor": "Tensor"}


@dataclass
class _Parser:
    tokens: list
    pos: int = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.value)
        raise QuerySyntaxError(f"{msg}, found {found}", tok.line, tok.col)

    def is_kw(self, *words) -> bool:
        return self.tok.kind == "kw" and self.tok.value in words

    def is_op(self, *ops) -> bool:
        return self.tok.kind == "op" and self.tok.value in ops

    def advance(self) -> Token:
        tok = self.tok
        self.pos += 1
        return tok

    def accept_kw(self, word) -> bool:
        if self.is_kw(word):
            self.pos += 1
            return True
        return False

    def accept_op(self, op) -> bool:
        if self.is_op(op):
            self.pos += 1
            return True
        return False

    def expect_kw(self, word):
        if not self.accept_kw(word):
            self.error(f"expected {word.upper()}")

    def expect_op(self, op):
        if not self.accept_op(op):
            self.error(f"expected {op!r}")

    def ident(self, what="identifier") -> str:
        if self.tok.kind != "ident":
            self.error(f"expected {what}")
        return self.advance().value

    def integer(self, what="integer") -> int:
        if self.tok.kind != "number" or not isinstance(self.tok.value, int):
            self.error(f"expected {what}")
        return self.advance().value

    # statements

    def statement(self):
        if self.accept_kw("explain"):
            stmt = Explain(self.statement_body())
        else:
            stmt = self.statement_body()
        self.accept_op(";")
        if self.tok.kind != "eof":
            self.error("expected end of statement")
        return stmt

    def statement_body(self):
        if self.is_kw("create"):
            return self.create_task()
        if self.is_kw("select"):
            if self.tokens[self.pos + 1].kind == "kw" and self.tokens[self.pos + 1].value == "model":
                return self.select_model()
            return self.select()
        self.error("expected SELECT, CREATE TASK or EXPLAIN")

    def select_model(self) -> SelectModel:
        self.expect_kw("select")
        self.expect_kw("model")
        self.expect_kw("for")
        self.expect_kw("task")
        return SelectModel(self.ident("task name"))

    def create_task(self) -> CreateTask:
        self.expect_kw("create")
        self.expect_kw("task")
        name = self.ident("task name")
        self.expect_op("(")
        opts: dict = {}
        while True:
            tok = self.tok
            if self.accept_kw("model"):
                self.expect_op("=")
                opts["model"] = self.integer("model id")
            elif self.is_kw("in") or tok.kind not in ("ident", "kw"):
                self.error("expected a task option")
            else:
                key = self.advance().value
                if key == "output" and self.accept_kw("in"):
                    opts["output"] = self.string_value("quoted label list")
                elif key in ("input", "output", "type"):
                    self.expect_op("=")
                    if self.tok.kind in ("string", "ident"):
                        opts[key] = self.advance().value
                    else:
                        self.error(f"expected a value for {key.upper()}")
                else:
                    self.error("expected INPUT, OUTPUT, TYPE or MODEL", tok)
            if not self.accept_op(","):
                break
        self.expect_op(")")
        if "input" not in opts:
            self.error("CREATE TASK needs INPUT=")
        input_type = _INPUT_TYPES.get(str(opts["input"]).lower())
        if input_type is None:
            raise QuerySyntaxError(f"unknown input type {opts['input']!r}", self.tok.line, self.tok.col)
        task_type = str(opts.get("type", "Classification")).strip().lower()
        if task_type not in ("classification", "regression"):
            raise QuerySyntaxError(f"unknown task type {opts.get('type')!r}", self.tok.line, self.tok.col)
        output = opts.get("output", "numeric")
        labels = None
        if str(output).strip().lower() != "numeric":
            labels = tuple(s.strip() for s in str(output).split(",") if s.strip())
        if task_type == "classification" and not labels:
            raise QuerySyntaxError("a classification task needs OUTPUT in '<labels>'", self.tok.line, self.tok.col)
        return CreateTask(name, input_type, labels, task_type.capitalize(), opts.get("model"))

    def string_value(self, what) -> str:
        if self.tok.kind != "string":
            self.error(f"expected {what}")
        return self.advance().value

    def select(self) -> Select:
        self.expect_kw("select")
        distinct = self.accept_kw("distinct")
        items = [self.select_item()]
        while self.accept_op(","):
            items.append(self.select_item())
        self.expect_kw("from")
        tables, join_on = [self.table_ref()], []
        while True:
            if self.accept_op(","):
                tables.append(self.table_ref())
            elif self.is_kw("join", "inner"):
                if self.accept_kw("inner"):
                    self.expect_kw("join")
                else:
                    self.advance()
                tables.append(self.table_ref())
                self.expect_kw("on")
                join_on.append(self.expr())
            else:
                break
        where = self.expr() if self.accept_kw("where") else None
        group_by = []
        if self.accept_kw("group"):
            self.expect_kw("by")
            group_by = self.expr_list()
        having = self.expr() if self.accept_kw("having") else None
        order_by = []
        if self.accept_kw("order"):
            self.expect_kw("by")
            order_by = self.order_list()
        limit = self.integer("LIMIT count") if self.accept_kw("limit") else None
        return Select(tuple(items), tuple(tables), tuple(join_on), where, tuple(group_by), having,
                      tuple(order_by), limit, distinct)

    def select_item(self) -> SelectItem:
        if self.accept_op("*"):
            return SelectItem(Star())
        if (self.tok.kind == "ident" and self.tokens[self.pos + 1].value == "."
                and self.tokens[self.pos + 2].value == "*"):
            qual = self.advance().value
            self.pos += 2
            return SelectItem(Star(qual))
        e = self.expr()
        alias = None
        if self.accept_kw("as"):
            alias = self.ident("column alias")
        elif self.tok.kind == "ident":
            alias = self.advance().value
        return SelectItem(e, alias)

    def table_ref(self) -> TableRef:
        name = self.ident("table name")
        alias = name
        if self.accept_kw("as"):
            alias = self.ident("table alias")
        elif self.tok.kind == "ident":
            alias = self.advance().value
        return TableRef(name, alias)

    def expr_list(self) -> list:
        out = [self.expr()]
        while self.accept_op(","):
            out.append(self.expr())
        return out

    def order_list(self) -> list:
        out = []
        while True:
            e = self.expr()
            desc = False
            if self.accept_kw("desc"):
                desc = True
            else:
                self.accept_kw("asc")
            out.append(OrderItem(e, desc))
            if not self.accept_op(","):
                return out

    # expressions, lowest precedence first

    def expr(self) -> Expr:
        left = self.and_expr()
        while self.accept_kw("or"):
            left = Binary("or", left, self.and_expr())
        return left

    def and_expr(self) -> Expr:
        left = self.not_expr()
        while self.accept_kw("and"):
            left = Binary("and", left, self.not_expr())
        return left

    def not_expr(self) -> Expr:
        if self.accept_kw("not"):
            return Unary("not", self.not_expr())
        return self.comparison()

    def comparison(self) -> Expr:
        left = self.additive()
        if self.is_op("=", "!=", "<", "<=", ">", ">="):
            op = self.advance().value
            left = Binary(op, left, self.additive())
            if self.is_op("=", "!=", "<", "<=", ">", ">="):
                self.error("comparisons do not chain")
        return left

    def additive(self) -> Expr:
        left = self.term()
        while self.is_op("+", "-"):
            op = self.advance().value
            left = Binary(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.is_op("*", "/", "%"):
            op = self.advance().value
            left = Binary(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.accept_op("-"):
            operand = self.unary()
            if isinstance(operand, Literal) and isinstance(operand.value, (int, float)) \
                    and not isinstance(operand.value, bool):
                return Literal(-operand.value)
            return Unary("-", operand)
        self.accept_op("+")
        return self.primary()

    def primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "number" or tok.kind == "string":
            self.advance()
            return Literal(tok.value)
        if self.accept_kw("true"):
            return Literal(True)
        if self.accept_kw("false"):
            return Literal(False)
        if self.accept_kw("null"):
            return Literal(None)
        if self.accept_op("("):
            e = self.expr()
            self.expect_op(")")
            return e
        if tok.kind == "ident":
            name = self.advance().value
            if self.accept_op("("):
                return self.call(name)
            if self.accept_op("."):
                return Column(name, self.ident("column name"))
            return Column(None, name)
        self.error("expected an expression")

    def call(self, name: str) -> Call:
        star = distinct = False
        args = []
        if self.accept_op("*"):
            star = True
        elif not self.is_op(")"):
            distinct = self.accept_kw("distinct")
            args = self.expr_list()
        self.expect_op(")")
        over = self.over() if self.accept_kw("over") else None
        if star and name != "count":
            raise QuerySyntaxError(f"{name.upper()}(*) is not allowed", self.tok.line, self.tok.col)
        return Call(name, tuple(args), star, distinct, over)

    def over(self) -> Over:
        self.expect_op("(")
        partition, order, following = [], [], None
        if self.accept_kw("partition"):
            self.expect_kw("by")
            partition = self.expr_list()
        if self.accept_kw("order"):
            self.expect_kw("by")
            order = self.order_list()
        if self.accept_kw("rows"):
            self.expect_kw("between")
            self.expect_kw("current")
            self.expect_kw("row")
            self.expect_kw("and")
            following = self.integer("row count")
            self.expect_kw("following")
        self.expect_op(")")
        return Over(tuple(partition), tuple(order), following)


def parse(text: str):
    """Parse one statement into its AST (no catalog resolution)."""
    return _Parser(tokenize(text)).statement()


# -- rendering ---------------------------------------------------------------

_PREC = {"or": 1, "and": 2, "=": 4, "!=": 4, "<": 4, "<=": 4, ">": 4, ">=": 4, "+": 5, "-": 5,
         "*": 6, "/": 6, "%": 6}


def render(e, prec: int = 0) -> str:
    """Canonical SQL text of an expression; also used as the default column name."""
    if isinstance(e, Literal):
        v = e.value
        if v is None:
            return "NULL"
        if isinstance(v, bool):
            return "TRUE" if v else "FALSE"
        if isinstance(v, str):
            return "'" + v.replace("'", "''") + "'"
        return repr(v)
    if isinstance(e, Column):
        return f"{e.qualifier}.{e.name}" if e.qualifier else e.name
    if isinstance(e, Ref):
        return e.key
    if isinstance(e, Star):
        return f"{e.qualifier}.*" if e.qualifier else "*"
    if isinstance(e, Unary):
        if e.op == "not":
            s = "NOT " + render(e.operand, 3)
            return f"({s})" if prec > 3 else s
        return "-" + render(e.operand, 7)
    if isinstance(e, Binary):
        p = _PREC[e.op]
        op = e.op.upper() if e.op in ("and", "or") else e.op
        s = f"{render(e.left, p)} {op} {render(e.right, p + 1)}"
        return f"({s})" if p < prec else s
    if isinstance(e, Call):
        inner = "*" if e.star else ", ".join(render(a) for a in e.args)
        if e.distinct:
            inner = "DISTINCT " + inner
        s = f"{e.name}({inner})"
        if e.over is not None:
            s += " OVER (" + render_over(e.over) + ")"
        return s
    raise TypeError(f"cannot render {e!r}")


def render_over(o: Over) -> str:
    parts = []
    if o.partition_by:
        parts.append("PARTITION BY " + ", ".join(render(x) for x in o.partition_by))
    if o.order_by:
        parts.append("ORDER BY " + ", ".join(render(x.expr) + (" DESC" if x.desc else "") for x in o.order_by))
    if o.following is not None:
        parts.append(f"ROWS BETWEEN CURRENT ROW AND {o.following} FOLLOWING")
    return " ".join(parts)


def walk(e):
    """Pre-order traversal of an expression tree (window specs included)."""
    yield e
    if isinstance(e, Unary):
        yield from walk(e.operand)
    elif isinstance(e, Binary):
        yield from walk(e.left)
        yield from walk(e.right)
    elif isinstance(e, Call):
        for a in e.args:
            yield from walk(a)
        if e.over is not None:
            for a in e.over.partition_by:
                yield from walk(a)
            for o in e.over.order_by:
                yield from walk(o.expr)


def transform(e, fn):
    """Bottom-up rewrite: ``fn`` sees each node after its children and may replace it."""
    if isinstance(e, Unary):
        e = Unary(e.op, transform(e.operand, fn))
    elif isinstance(e, Binary):
        e = Binary(e.op, transform(e.left, fn), transform(e.right, fn))
    elif isinstance(e, Call):
        over = e.over
        if over is not None:
            over = Over(tuple(transform(a, fn) for a in over.partition_by),
                        tuple(OrderItem(transform(o.expr, fn), o.desc) for o in over.order_by),
                        over.following)
        e = Call(e.name, tuple(transform(a, fn) for a in e.args), e.star, e.distinct, over)
    out = fn(e)
    return e if out is None else out


def replace_exprs(e, mapping: dict):
    """Top-down substitution of whole subtrees found in ``mapping``."""
    if e in mapping:
        return mapping[e]
    if isinstance(e, Unary):
        return Unary(e.op, replace_exprs(e.operand, mapping))
    if isinstance(e, Binary):
        return Binary(e.op, replace_exprs(e.left, mapping), replace_exprs(e.right, mapping))
    if isinstance(e, Call):
        over = e.over
        if over is not None:
            over = Over(tuple(replace_exprs(a, mapping) for a in over.partition_by),
                        tuple(OrderItem(replace_exprs(o.expr, mapping), o.desc) for o in over.order_by),
                        over.following)
        return Call(e.name, tuple(replace_exprs(a, mapping) for a in e.args), e.star, e.distinct, over)
    return e


def conjuncts(e) -> list:
    if e is None:
        return []
    if isinstance(e, Binary) and e.op == "and":
        return conjuncts(e.left) + conjuncts(e.right)
    return [e]


# -- JSON codec (plan text format) ---------------------------------------------

def expr_to_json(e):
    if e is None:
        return None
    if isinstance(e, Literal):
        return {"lit": e.value}
    if isinstance(e, Ref):
        return {"ref": e.key}
    if isinstance(e, Column):
        return {"col": e.name, "q": e.qualifier}
    if isinstance(e, Star):
        return {"star": e.qualifier}
    if isinstance(e, Unary):
        return {"un": e.op, "x": expr_to_json(e.operand)}
    if isinstance(e, Binary):
        return {"bin": e.op, "l": expr_to_json(e.left), "r": expr_to_json(e.right)}
    if isinstance(e, Call):
        out = {"call": e.name, "args": [expr_to_json(a) for a in e.args]}
        if e.star:
            out["star"] = True
        if e.distinct:
            out["distinct"] = True
        if e.over is not None:
            out["over"] = {"p": [expr_to_json(a) for a in e.over.partition_by],
                           "o": [[expr_to_json(o.expr), o.desc] for o in e.over.order_by],
                           "f": e.over.following}
        return out
    raise TypeError(f"cannot encode {e!r}")


def expr_from_json(j):
    if j is None:
        return None
    if "lit" in j:
        return Literal(j["lit"])
    if "ref" in j:
        return Ref(j["ref"])
    if "col" in j:
        return Column(j["q"], j["col"])
    if "star" in j and "call" not in j:
        return Star(j["star"])
    if "un" in j:
        return Unary(j["un"], expr_from_json(j["x"]))
    if "bin" in j:
        return Binary(j["bin"], expr_from_json(j["l"]), expr_from_json(j["r"]))
    if "call" in j:
        over = None
        if "over" in j:
            o = j["over"]
            over = Over(tuple(expr_from_json(a) for a in o["p"]),
                        tuple(OrderItem(expr_from_json(x), d) for x, d in o["o"]), o["f"])
        return Call(j["call"], tuple(expr_from_json(a) for a in j["args"]), j.get("star", False),
                    j.get("distinct", False), over)
    raise ValueError(f"bad expression record {j!r}")
