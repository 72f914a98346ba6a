"""Name resolution, operator DAG construction and the plan text format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from taskdb.backends.cost import CostEstimate, DeviceKind, DeviceProfile
from taskdb.errors import PlanError, UnknownColumn, UnknownTable, UnknownTask
from taskdb.planner import dsl
from taskdb.planner.dsl import (
    AGGREGATES,
    RANKING,
    SCALARS,
    Binary,
    Call,
    Column,
    Literal,
    OrderItem,
    Ref,
    Select,
    SelectItem,
    Star,
    conjuncts,
    render,
    replace_exprs,
    transform,
    walk,
)

KINDS = ("SCAN", "FILTER", "JOIN", "AGGREGATE", "GROUPBY", "WINDOW", "PREDICT", "PROJECT", "OUTPUT")
DATA = "DataDependency"
CONTROL = "ControlDependency"
PLAN_HEADER = "TASKDB-PLAN v1"


# -- plan graph ----------------------------------------------------------------

@dataclass
class OperatorNode:
    node_id: int
    kind: str
    params: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)   # producers whose tuples this node reads, by port
    assigned_device: DeviceProfile | None = None
    batch_size: int | None = None
    est_rows: int | None = None
    cost: CostEstimate | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlanError(f"unknown operator kind {self.kind!r}")


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    label: str = DATA


@dataclass
class PlanDag:
    nodes: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)
    output_names: list = field(default_factory=list)

    def add_node(self, kind: str, params: dict | None = None, inputs: list | None = None) -> OperatorNode:
        node = OperatorNode(len(self.nodes) + 1 if not self.nodes else max(self.nodes) + 1, kind,
                            params or {}, list(inputs or []))
        self.nodes[node.node_id] = node
        for src in node.inputs:
            self.edges.append(Edge(src, node.node_id, DATA))
        return node

    def add_edge(self, src: int, dst: int, label: str | None = None) -> None:
        if src not in self.nodes or dst not in self.nodes:
            raise PlanError(f"edge {src}->{dst} references a missing node")
        if label is None:
            label = DATA if src in self.nodes[dst].inputs else CONTROL
        self.edges.append(Edge(src, dst, label))

    def producers(self, node_id: int) -> list[int]:
        return sorted({e.src for e in self.edges if e.dst == node_id})

    def consumers(self, node_id: int) -> list[int]:
        return sorted({e.dst for e in self.edges if e.src == node_id})

    @property
    def output(self) -> OperatorNode:
        outs = [n for n in self.nodes.values() if n.kind == "OUTPUT"]
        if len(outs) != 1:
            raise PlanError(f"a plan needs exactly one OUTPUT node, found {len(outs)}")
        return outs[0]

    def validate(self) -> None:
        """Structural invariants: edge endpoints exist, one OUTPUT, everything reaches it."""
        for e in self.edges:
            if e.src not in self.nodes or e.dst not in self.nodes:
                raise PlanError(f"edge {e.src}->{e.dst} references a missing node")
        out = self.output.node_id
        reach, stack = {out}, [out]
        while stack:
            v = stack.pop()
            for u in self.producers(v):
                if u not in reach:
                    reach.add(u)
                    stack.append(u)
        stray = sorted(set(self.nodes) - reach)
        if stray:
            raise PlanError(f"nodes {stray} do not reach OUTPUT")

    def predict_nodes(self) -> list[OperatorNode]:
        return [n for _, n in sorted(self.nodes.items()) if n.kind == "PREDICT"]

    # -- text format ---------------------------------------------------------

    def to_text(self) -> str:
        lines = [PLAN_HEADER, "output " + json.dumps(self.output_names)]
        for nid, n in sorted(self.nodes.items()):
            dev = "-" if n.assigned_device is None else json.dumps(_device_json(n.assigned_device), sort_keys=True)
            lines.append(f"node {nid} {n.kind} inputs={json.dumps(n.inputs)} device={dev} "
                         f"batch={'-' if n.batch_size is None else n.batch_size} "
                         f"params={json.dumps(_enc(n.params), sort_keys=True)}")
        for e in self.edges:
            lines.append(f"edge {e.src} {e.dst} {e.label}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PlanDag":
        lines = text.splitlines()
        if not lines or lines[0].strip() != PLAN_HEADER:
            raise PlanError("not a plan file (bad header)")
        g = cls()
        for line in lines[1:]:
            if not line.strip():
                continue
            word, rest = line.split(" ", 1)
            if word == "output":
                g.output_names = json.loads(rest)
            elif word == "node":
                nid, kind, rest = rest.split(" ", 2)
                inputs, rest = _field(rest, "inputs=", " device=")
                dev, rest = _field(rest, "device=", " batch=")
                batch, rest = _field(rest, "batch=", " params=")
                params = rest[len("params="):]
                node = OperatorNode(int(nid), kind, _dec(json.loads(params)), json.loads(inputs),
                                    None if dev == "-" else _device_from_json(json.loads(dev)),
                                    None if batch == "-" else int(batch))
                g.nodes[node.node_id] = node
            elif word == "edge":
                src, dst, label = rest.split()
                g.edges.append(Edge(int(src), int(dst), label))
            else:
                raise PlanError(f"unrecognised plan line {line!r}")
        return g


def _field(s: str, prefix: str, stop: str) -> tuple[str, str]:
    if not s.startswith(prefix):
        raise PlanError(f"expected {prefix!r} in plan line")
    end = s.index(stop)
    return s[len(prefix):end], s[end + 1:]


def _device_json(d: DeviceProfile) -> dict:
    j = asdict(d)
    j["kind"] = d.kind.value
    return j


def _device_from_json(j: dict) -> DeviceProfile:
    return DeviceProfile(**{**j, "kind": DeviceKind(j["kind"])})


def _enc(v):
    if isinstance(v, dsl.Expr):
        return {"$e": dsl.expr_to_json(v)}
    if isinstance(v, OrderItem):
        return {"$o": [dsl.expr_to_json(v.expr), v.desc]}
    if isinstance(v, dict):
        return {k: _enc(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_enc(x) for x in v]
    return v


def _dec(v):
    if isinstance(v, dict):
        if "$e" in v:
            return dsl.expr_from_json(v["$e"])
        if "$o" in v:
            return OrderItem(dsl.expr_from_json(v["$o"][0]), v["$o"][1])
        return {k: _dec(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_dec(x) for x in v]
    return v


# -- resolution ----------------------------------------------------------------

@dataclass(frozen=True)
class TaskBinding:
    """What a function name in a query resolves to."""

    name: str
    model_id: int
    labels: tuple | None = None
    task_type: str | None = None   # None: a model called directly, output is the raw tensor


@dataclass
class PlanContext:
    """Catalog snapshot the planner resolves names against."""

    schemas: dict                                   # table -> column names
    tasks: object = None                            # TaskRegistry or None
    models: dict = field(default_factory=dict)      # model name -> id, for direct calls
    row_counts: dict = field(default_factory=dict)  # table -> rows

    def binding(self, name: str) -> TaskBinding:
        if self.tasks is not None and name in self.tasks:
            e = self.tasks.get(name)
            return TaskBinding(name, e.model_id, e.spec.output_labels, e.spec.task_type)
        if name in self.models:
            return TaskBinding(name, self.models[name])
        raise UnknownTask(f"unknown task or model {name!r}")


@dataclass
class LogicalPlan:
    select: Select                  # every column resolved to a Ref, stars expanded
    aliases: dict                   # alias -> table, FROM order
    output_names: list
    bindings: dict                  # task/model name -> TaskBinding
    context: PlanContext


def is_task_call(e) -> bool:
    return isinstance(e, Call) and e.name not in AGGREGATES and e.name not in RANKING and e.name not in SCALARS


def is_aggregate(e) -> bool:
    return isinstance(e, Call) and e.name in AGGREGATES and e.over is None


def is_window(e) -> bool:
    return isinstance(e, Call) and e.over is not None and not is_task_call(e)


def resolve(stmt: Select, ctx: PlanContext) -> LogicalPlan:
    aliases: dict = {}
    for t in stmt.tables:
        if t.name not in ctx.schemas:
            raise UnknownTable(f"unknown table {t.name!r}")
        if t.alias in aliases:
            raise PlanError(f"alias {t.alias!r} is used twice")
        aliases[t.alias] = t.name
    bindings: dict = {}

    def col(e):
        if isinstance(e, Column):
            if e.qualifier is not None:
                if e.qualifier not in aliases:
                    raise UnknownTable(f"unknown table or alias {e.qualifier!r}")
                if e.name not in ctx.schemas[aliases[e.qualifier]]:
                    raise UnknownColumn(f"{aliases[e.qualifier]!r} has no column {e.name!r}")
                return Ref(f"{e.qualifier}.{e.name}")
            owners = [a for a, t in aliases.items() if e.name in ctx.schemas[t]]
            if not owners:
                raise UnknownColumn(f"unknown column {e.name!r}")
            if len(owners) > 1:
                raise PlanError(f"column {e.name!r} is ambiguous between {owners}")
            return Ref(f"{owners[0]}.{e.name}")
        if is_task_call(e):
            if len(e.args) != 1 or e.star or e.distinct:
                raise PlanError(f"task call {e.name}() takes exactly one argument")
            if e.over is not None and (e.over.partition_by or e.over.order_by or e.over.following is None):
                raise PlanError(f"{e.name}(): only ROWS BETWEEN CURRENT ROW AND n FOLLOWING applies to tasks")
            if e.name not in bindings:
                bindings[e.name] = ctx.binding(e.name)
        elif isinstance(e, Call) and e.name in RANKING:
            if e.over is None:
                raise PlanError(f"{e.name}() needs an OVER clause")
            if e.args:
                raise PlanError(f"{e.name}() takes no arguments")
        elif isinstance(e, Call) and e.over is not None and e.over.following is not None:
            raise PlanError(f"{e.name}(): row frames are only supported on task calls")
        return None

    def res(e):
        return None if e is None else transform(e, col)

    items, names = [], []
    for item in stmt.items:
        if isinstance(item.expr, Star):
            targets = [item.expr.qualifier] if item.expr.qualifier else list(aliases)
            for a in targets:
                if a not in aliases:
                    raise UnknownTable(f"unknown table or alias {a!r}")
                for c in ctx.schemas[aliases[a]]:
                    items.append(SelectItem(Ref(f"{a}.{c}")))
                    names.append((c, f"{a}.{c}"))
        else:
            e = res(item.expr)
            items.append(SelectItem(e, item.alias))
            if item.alias:
                names.append((item.alias, item.alias))
            elif isinstance(item.expr, Column):
                names.append((item.expr.name, e.key))
            else:
                names.append((render(item.expr), render(item.expr)))
    short = [s for s, _ in names]
    output_names = []
    for s, full in names:
        name = s if short.count(s) == 1 else full
        while name in output_names:
            name += "_"
        output_names.append(name)

    def order_item(o: OrderItem) -> OrderItem:
        e = o.expr
        if isinstance(e, Literal) and isinstance(e.value, int) and not isinstance(e.value, bool):
            if not 1 <= e.value <= len(items):
                raise PlanError(f"ORDER BY position {e.value} is out of range")
            return OrderItem(items[e.value - 1].expr, o.desc)
        if isinstance(e, Column) and e.qualifier is None:
            for item, name in zip(items, output_names):
                if item.alias == e.name or (name == e.name and not isinstance(item.expr, Ref)):
                    return OrderItem(item.expr, o.desc)
        return OrderItem(res(e), o.desc)

    def having_col(e):
        if isinstance(e, Column) and e.qualifier is None:
            for item in items:
                if item.alias == e.name:
                    return item.expr
        return col(e)

    sel = Select(tuple(items), stmt.tables, tuple(res(e) for e in stmt.join_on), res(stmt.where),
                 tuple(res(e) for e in stmt.group_by),
                 None if stmt.having is None else transform(stmt.having, having_col),
                 tuple(order_item(o) for o in stmt.order_by), stmt.limit, stmt.distinct)
    for e in list(conjuncts(sel.where)) + list(sel.join_on) + list(sel.group_by):
        if any(is_aggregate(x) or is_window(x) for x in walk(e)):
            raise PlanError(f"aggregates and window functions are not allowed in {render(e)}")
    return LogicalPlan(sel, aliases, output_names, bindings, ctx)


def parse_query(text: str, ctx: PlanContext | None = None):
    """Parse a statement; SELECT statements are resolved against ``ctx`` when given."""
    stmt = dsl.parse(text)
    inner = stmt.statement if isinstance(stmt, dsl.Explain) else stmt
    if ctx is not None and isinstance(inner, Select):
        plan = resolve(inner, ctx)
        return dsl.Explain(plan) if isinstance(stmt, dsl.Explain) else plan
    return stmt


# -- DAG construction ------------------------------------------------------------

def _aliases_of(e) -> set:
    return {x.key.split(".", 1)[0] for x in walk(e) if isinstance(x, Ref) and "." in x.key}


def _has_task(e) -> bool:
    return any(is_task_call(x) for x in walk(e))


def _equi_sides(e, joined: set, alias: str):
    """``(left, right)`` when ``e`` is ``left = right`` joining ``joined`` to ``alias``."""
    if not (isinstance(e, Binary) and e.op == "=") or _has_task(e):
        return None
    la, ra = _aliases_of(e.left), _aliases_of(e.right)
    if la and ra and la <= joined and ra == {alias}:
        return e.left, e.right
    if la and ra and ra <= joined and la == {alias}:
        return e.right, e.left
    return None


class _Builder:
    def __init__(self, plan: LogicalPlan):
        self.plan = plan
        self.g = PlanDag(output_names=list(plan.output_names))
        self.predicted: dict = {}    # (task, arg) -> hidden column Ref

    def hoist(self, head: int, exprs: list) -> tuple[int, list]:
        """Add PREDICT nodes for every task call in ``exprs``; returns rewritten exprs."""
        calls = []
        for e in exprs:
            transform(e, lambda x: calls.append(x) if is_task_call(x) else None)  # inner calls first
        for x in calls:
            arg = self.rewrite(x.args[0])
            key = (x.name, arg)
            if key in self.predicted:
                continue
            if any(is_aggregate(y) or is_window(y) for y in walk(arg)):
                raise PlanError(f"task call {render(x)} may not take an aggregate or window input")
            b = self.plan.bindings[x.name]
            window = None if x.over is None else x.over.following + 1
            node = self.g.add_node("PREDICT", {
                "task": x.name, "model_id": b.model_id, "arg": arg, "labels": b.labels,
                "task_type": b.task_type, "window": window}, [head])
            node.params["out"] = f"__p{node.node_id}"
            node.batch_size = window
            self.predicted[key] = Ref(node.params["out"])
            head = node.node_id
        return head, [self.rewrite(e) for e in exprs]

    def rewrite(self, e):
        """Replace already-hoisted task calls with their hidden columns."""
        return transform(e, lambda x: self.predicted.get((x.name, x.args[0])) if is_task_call(x) else None)

    def filter(self, head: int, preds: list) -> int:
        if not preds:
            return head
        head, preds = self.hoist(head, preds)
        pred = preds[0]
        for p in preds[1:]:
            pred = Binary("and", pred, p)
        return self.g.add_node("FILTER", {"predicate": pred}, [head]).node_id

    def build(self) -> PlanDag:
        s, g = self.plan.select, self.g
        aliases = list(self.plan.aliases)
        heads = {}
        for a in aliases:
            table = self.plan.aliases[a]
            cols = [f"{a}.{c}" for c in self.plan.context.schemas[table]]
            heads[a] = g.add_node("SCAN", {"table": table, "alias": a, "columns": cols}).node_id

        preds = list(s.join_on) + conjuncts(s.where)
        single = {a: [] for a in aliases}
        single_task = {a: [] for a in aliases}
        constant, multi = [], []
        for p in preds:
            al = _aliases_of(p)
            if not al:
                constant.append(p)
            elif len(al) == 1:
                (a,) = al
                (single_task if _has_task(p) else single)[a].append(p)
            else:
                multi.append(p)
        for a in aliases:   # pushdown: cheap predicates first, then predicted ones
            heads[a] = self.filter(heads[a], single[a])
            heads[a] = self.filter(heads[a], single_task[a])

        joined, head = {aliases[0]}, heads[aliases[0]]
        remaining = aliases[1:]
        head = self.filter(head, self._covered(multi, joined))
        while remaining:
            pick, keys = remaining[0], []
            for a in remaining:
                keys = [(p, sides) for p in multi if (sides := _equi_sides(p, joined, a))]
                if keys:
                    pick = a
                    break
            for p, _ in keys:
                multi.remove(p)
            remaining.remove(pick)
            node = g.add_node("JOIN", {"keys": [[l, r] for _, (l, r) in keys]}, [head, heads[pick]])
            joined.add(pick)
            head = self.filter(node.node_id, self._covered(multi, joined))
        head = self.filter(head, constant)

        # task calls in the projection, grouping, ordering and window specs
        rest = [i.expr for i in s.items] + list(s.group_by) + [o.expr for o in s.order_by]
        if s.having is not None:
            rest.append(s.having)
        head, _ = self.hoist(head, rest)
        items = [SelectItem(self.rewrite(i.expr), i.alias) for i in s.items]
        order = [OrderItem(self.rewrite(o.expr), o.desc) for o in s.order_by]
        group_by = [self.rewrite(e) for e in s.group_by]
        having = None if s.having is None else self.rewrite(s.having)

        windows = []
        for e in [i.expr for i in items] + [o.expr for o in order]:
            for x in walk(e):
                if is_window(x) and x not in windows:
                    windows.append(x)
        if windows:
            if group_by or any(is_aggregate(x) for i in items for x in walk(i.expr)):
                raise PlanError("window functions cannot be combined with GROUP BY or aggregates")
            wmap = {w: Ref(f"__w{i}") for i, w in enumerate(windows)}
            head = g.add_node("WINDOW", {"windows": [[f"__w{i}", w] for i, w in enumerate(windows)]},
                              [head]).node_id
            items = [SelectItem(replace_exprs(i.expr, wmap), i.alias) for i in items]
            order = [OrderItem(replace_exprs(o.expr, wmap), o.desc) for o in order]

        aggs = []
        for e in [i.expr for i in items] + [o.expr for o in order] + ([having] if having is not None else []):
            for x in walk(e):
                if is_aggregate(x) and x not in aggs:
                    if any(is_aggregate(y) for y in walk(x) if y is not x):
                        raise PlanError(f"nested aggregate in {render(x)}")
                    aggs.append(x)
        if group_by or aggs:
            keys = [[f"__g{i}", e] for i, e in enumerate(group_by)]
            amap = {e: Ref(f"__g{i}") for i, e in enumerate(group_by)}
            amap.update({a: Ref(f"__a{i}") for i, a in enumerate(aggs)})
            kind = "GROUPBY" if group_by else "AGGREGATE"
            head = g.add_node(kind, {"keys": keys, "aggs": [[f"__a{i}", a] for i, a in enumerate(aggs)]},
                              [head]).node_id
            items = [SelectItem(replace_exprs(i.expr, amap), i.alias) for i in items]
            order = [OrderItem(replace_exprs(o.expr, amap), o.desc) for o in order]
            if having is not None:
                having = replace_exprs(having, amap)
            for e in [i.expr for i in items] + [o.expr for o in order] + ([having] if having is not None else []):
                for x in walk(e):
                    if isinstance(x, Ref) and not x.key.startswith(("__g", "__a")):
                        raise PlanError(f"column {x.key} must appear in GROUP BY or inside an aggregate")
            if having is not None:
                head = g.add_node("FILTER", {"predicate": having}, [head]).node_id
        elif having is not None:
            raise PlanError("HAVING needs GROUP BY or an aggregate")

        g.add_node("OUTPUT", {"items": [[n, i.expr] for n, i in zip(self.plan.output_names, items)],
                              "order_by": order, "limit": s.limit, "distinct": s.distinct}, [head])
        g.validate()
        return g

    @staticmethod
    def _covered(multi: list, joined: set) -> list:
        out = [p for p in multi if _aliases_of(p) <= joined]
        for p in out:
            multi.remove(p)
        return out


def build_dag(plan: LogicalPlan) -> PlanDag:
    """Operator DAG for a resolved query.

    Single-table predicates are pushed down to their scans, task calls are
    hoisted into PREDICT nodes that feed hidden ``__pN`` columns, and tables
    are joined greedily in FROM order, preferring ones connected by an
    equality predicate.
    """
    return _Builder(plan).build()
