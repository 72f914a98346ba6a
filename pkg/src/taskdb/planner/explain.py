"""Human-readable plan reports."""

from __future__ import annotations

from taskdb.planner.dag import PlanDag
from taskdb.planner.dsl import OrderItem, render
from taskdb.planner.schedule import discover_dependencies


def _describe(n) -> str:
    p = n.params
    if n.kind == "SCAN":
        return f"{p['table']} AS {p['alias']}"
    if n.kind == "FILTER":
        return render(p["predicate"])
    if n.kind == "JOIN":
        keys = " AND ".join(f"{render(l)} = {render(r)}" for l, r in p.get("keys", []))
        return keys or "cross product"
    if n.kind == "PREDICT":
        return f"{p['out']} := {p['task']}({render(p['arg'])}) model={p['model_id']}"
    if n.kind in ("GROUPBY", "AGGREGATE"):
        keys = ", ".join(f"{k} := {render(e)}" for k, e in p.get("keys", []))
        aggs = ", ".join(f"{k} := {render(e)}" for k, e in p.get("aggs", []))
        return "; ".join(x for x in (f"keys {keys}" if keys else "", f"aggs {aggs}" if aggs else "") if x)
    if n.kind == "WINDOW":
        return ", ".join(f"{k} := {render(e)}" for k, e in p["windows"])
    if n.kind == "OUTPUT":
        cols = ", ".join(f"{name} := {render(e)}" for name, e in p["items"])
        extra = ""
        if p.get("order_by"):
            extra += " ORDER BY " + ", ".join(render(o.expr if isinstance(o, OrderItem) else o[0])
                                             + (" DESC" if (o.desc if isinstance(o, OrderItem) else o[1]) else "")
                                             for o in p["order_by"])
        if p.get("limit") is not None:
            extra += f" LIMIT {p['limit']}"
        return cols + extra
    return ""


def explain_plan(g: PlanDag) -> str:
    """Nodes in execution order with devices, batch sizes and cost breakdowns, then labelled edges."""
    sched = discover_dependencies(g)
    lines = ["PLAN", "order: " + " ".join(str(v) for v in sched.order)]
    for v in sched.order:
        n = g.nodes[v]
        dev = n.assigned_device.name if n.assigned_device is not None else "unassigned"
        head = f"  [{v}] {n.kind:<9} {_describe(n)}"
        attrs = [f"device={dev}"]
        if n.kind == "PREDICT":
            attrs.append(f"batch={n.batch_size if n.batch_size is not None else 'unset'}")
        if n.est_rows is not None:
            attrs.append(f"rows~{n.est_rows}")
        lines.append(head)
        lines.append("        " + " ".join(attrs))
        if n.cost is not None:
            c = n.cost
            lines.append(f"        cost: exec={c.exec_time:.6g}s + trans={c.trans_cost:.6g}s "
                         f"= {c.total:.6g}s over {c.nrows} rows")
    lines.append("edges:")
    for e in sorted(g.edges, key=lambda e: (e.src, e.dst)):
        lines.append(f"  {e.src} -> {e.dst} {sched.labels[(e.src, e.dst)]}")
    return "\n".join(lines) + "\n"
