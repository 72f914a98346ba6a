"""Dependency discovery and execution ordering over a plan DAG."""

from __future__ import annotations

from dataclasses import dataclass

from taskdb.errors import CycleDetected, PlanError
from taskdb.planner.dag import CONTROL, DATA, Edge, PlanDag

_WHITE, _GRAY, _BLACK = 0, 1, 2


@dataclass(frozen=True)
class Schedule:
    order: list          # sigma: every node after all of its dependencies
    deps: dict           # node -> sorted producers D(v)
    labels: dict         # (u, v) -> DataDependency | ControlDependency

    def position(self) -> dict:
        return {v: i for i, v in enumerate(self.order)}


def is_data_dependency(g: PlanDag, u: int, v: int) -> bool:
    """True when ``v`` consumes ``u``'s tuple stream (``u`` is one of its input ports)."""
    return u in g.nodes[v].inputs


def discover_dependencies(g: PlanDag) -> Schedule:
    """Label every edge and return a canonical topological order.

    The order comes from a colored depth-first search over dependencies:
    roots and dependencies are both visited in ascending node id, and a
    node is emitted once all of its dependencies have been.
    """
    if not g.nodes:
        raise PlanError("cannot schedule an empty plan")
    deps: dict = {v: set() for v in g.nodes}
    labels: dict = {}
    for e in g.edges:
        if e.src not in g.nodes or e.dst not in g.nodes:
            raise PlanError(f"edge {e.src}->{e.dst} references a missing node")
        deps[e.dst].add(e.src)
        labels[(e.src, e.dst)] = DATA if is_data_dependency(g, e.src, e.dst) else CONTROL
    deps = {v: sorted(d) for v, d in deps.items()}

    color = {v: _WHITE for v in g.nodes}
    order: list = []
    for root in sorted(g.nodes):
        if color[root] != _WHITE:
            continue
        color[root] = _GRAY
        stack = [(root, iter(deps[root]))]
        while stack:
            v, it = stack[-1]
            for u in it:
                if color[u] == _WHITE:
                    color[u] = _GRAY
                    stack.append((u, iter(deps[u])))
                    break
                if color[u] == _GRAY:
                    path = [w for w, _ in stack]
                    # the DFS walks edges backwards; report the cycle in edge direction
                    cycle = path[path.index(u):] + [u]
                    raise CycleDetected(list(reversed(cycle)))
            else:
                color[v] = _BLACK
                order.append(v)
                stack.pop()
    return Schedule(order, deps, labels)


def relabel(g: PlanDag) -> None:
    """Rewrite edge labels in place from the data-dependency rule."""
    g.edges = [Edge(e.src, e.dst, DATA if is_data_dependency(g, e.src, e.dst) else CONTROL) for e in g.edges]
