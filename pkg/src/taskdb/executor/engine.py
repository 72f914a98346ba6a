"""Sequential and pipelined execution of placed operator DAGs, plus run metrics.

Time is simulated: each operator books its cost instead of sleeping (unless
the runtime is in realtime mode). Sequential execution runs node after node,
so its makespan is the sum of node times. Pipelined execution runs stages on
threads joined by bounded channels; each stage keeps its own simulated clock
and every message carries the time it became ready, so the makespan is the
latest stage clock and does not depend on thread scheduling.
"""

from __future__ import annotations

import json
import math
import threading
from collections import deque
from dataclasses import dataclass, field

from taskdb.errors import ExecutionError, PlanError
from taskdb.executor.operators import Operator, Runtime, make_operator
from taskdb.executor.table import RowBatch
from taskdb.planner.dag import PlanDag
from taskdb.planner.schedule import discover_dependencies

DEFAULT_CAPACITY = 4


# -- metrics ---------------------------------------------------------------------

@dataclass
class NodeMetrics:
    node_id: int
    kind: str
    device: str | None
    batch_size: int | None
    seconds: float
    rows_in: int
    rows_out: int
    batches: int


@dataclass
class RunMetrics:
    mode: str                              # "sequential" or "pipelined"
    nodes: dict = field(default_factory=dict)
    makespan: float = 0.0
    input_rows: int = 0
    extractor_calls: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    stages: list = field(default_factory=list)

    @property
    def total_seconds(self) -> float:
        return math.fsum(n.seconds for n in self.nodes.values())

    @property
    def throughput(self) -> float:
        return self.input_rows / self.makespan if self.makespan > 0 else math.inf

    @property
    def cache_hit_rate(self) -> float:
        total = self.cache_hits + self.cache_misses
        return self.cache_hits / total if total else 0.0

    @property
    def batches(self) -> int:
        return sum(n.batches for n in self.nodes.values())

    def as_dict(self) -> dict:
        out = {"mode": self.mode, "makespan": self.makespan, "total_seconds": self.total_seconds,
               "input_rows": self.input_rows, "throughput": self.throughput, "batches": self.batches,
               "extractor_calls": self.extractor_calls, "cache_hits": self.cache_hits,
               "cache_misses": self.cache_misses, "cache_hit_rate": self.cache_hit_rate,
               "stages": len(self.stages)}
        for n in self.nodes.values():
            p = f"node.{n.node_id}."
            out[p + "kind"] = n.kind
            out[p + "device"] = n.device or "-"
            out[p + "batch_size"] = n.batch_size if n.batch_size is not None else "-"
            out[p + "seconds"] = n.seconds
            out[p + "rows_in"] = n.rows_in
            out[p + "rows_out"] = n.rows_out
            out[p + "batches"] = n.batches
        return out

    def to_kv(self) -> str:
        """One ``key=value`` line per metric; floats use their shortest round-trip form."""
        return "\n".join(f"{k}={_fmt(v)}" for k, v in self.as_dict().items()) + "\n"

    def to_json(self) -> str:
        return json.dumps({k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                           for k, v in self.as_dict().items()}, sort_keys=False)

    def to_table(self) -> str:
        head = f"{'node':>4}  {'kind':<9} {'device':<8} {'batch':>5} {'rows_in':>8} {'rows_out':>8} " \
               f"{'batches':>7} {'seconds':>12}"
        lines = [head, "-" * len(head)]
        for n in self.nodes.values():
            lines.append(f"{n.node_id:>4}  {n.kind:<9} {n.device or '-':<8} "
                         f"{n.batch_size if n.batch_size is not None else '-':>5} {n.rows_in:>8} "
                         f"{n.rows_out:>8} {n.batches:>7} {n.seconds:>12.6g}")
        lines.append("-" * len(head))
        lines.append(f"mode={self.mode} makespan={self.makespan:.6g}s total={self.total_seconds:.6g}s "
                     f"rows={self.input_rows} throughput={self.throughput:.6g} rows/s")
        lines.append(f"extractor_calls={self.extractor_calls} cache_hits={self.cache_hits} "
                     f"cache_misses={self.cache_misses} hit_rate={self.cache_hit_rate:.3f}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _node_metrics(g: PlanDag, ops: dict) -> dict:
    out = {}
    for nid in sorted(ops):
        node, op = g.nodes[nid], ops[nid]
        dev = node.assigned_device.name if node.assigned_device is not None else None
        out[nid] = NodeMetrics(nid, node.kind, dev, node.batch_size if node.kind == "PREDICT" else None,
                               op.seconds, op.rows_in, op.rows_out, op.batches)
    return out


def _finish_metrics(m: RunMetrics, g: PlanDag, ops: dict, rt: Runtime, before: tuple) -> RunMetrics:
    m.nodes = _node_metrics(g, ops)
    m.input_rows = sum(ops[n].rows_out for n in ops if g.nodes[n].kind == "SCAN")
    m.extractor_calls = rt.extractor_calls - before[0]
    m.cache_hits = rt.cache_hits - before[1]
    m.cache_misses = rt.cache_misses - before[2]
    return m


def _counters(rt: Runtime) -> tuple:
    return rt.extractor_calls, rt.cache_hits, rt.cache_misses


def _result(g: PlanDag, batches: list) -> RowBatch:
    names = [n for n, _ in g.output.params["items"]]
    return RowBatch.concat(names, batches)


def check_order(g: PlanDag, order: list) -> None:
    if sorted(order) != sorted(g.nodes):
        raise PlanError("schedule must list every plan node exactly once")
    pos = {v: i for i, v in enumerate(order)}
    for e in g.edges:
        if pos[e.src] >= pos[e.dst]:
            raise PlanError(f"schedule runs node {e.dst} before its dependency {e.src}")


def _consumer(g: PlanDag, nid: int):
    for c in g.consumers(nid):
        if nid in g.nodes[c].inputs:
            return c
    return None


# -- sequential -----------------------------------------------------------------

def execute(g: PlanDag, rt: Runtime, sigma: list | None = None) -> tuple[RowBatch, RunMetrics]:
    """Run the plan node by node in schedule order, materializing each node's output."""
    order = list(sigma) if sigma is not None else discover_dependencies(g).order
    check_order(g, order)
    before = _counters(rt)
    ops: dict = {}
    outputs: dict = {}
    for nid in order:
        node = g.nodes[nid]
        try:
            op = ops[nid] = make_operator(node, rt)
            out = []
            if node.kind == "SCAN":
                out = list(op.source())
            for port, src in enumerate(node.inputs):
                for b in outputs[src]:
                    out += op.push(port, b)
                out += op.end(port)
        except ExecutionError:
            raise
        except Exception as exc:
            raise ExecutionError(nid, exc) from exc
        outputs[nid] = out
    m = _finish_metrics(RunMetrics("sequential"), g, ops, rt, before)
    m.makespan = m.total_seconds
    m.stages = [[n] for n in order]
    return _result(g, outputs[g.output.node_id]), m


# -- pipelined --------------------------------------------------------------------

class _Aborted(Exception):
    pass


_END = object()


class Channel:
    """Bounded single-producer, single-consumer queue that also carries simulated time.

    A producer may place item ``j`` only after the consumer took item
    ``j - capacity``; in simulated time it therefore waits until that take,
    which is how backpressure shows up in the clocks.
    """

    def __init__(self, capacity: int, abort: threading.Event):
        if capacity < 1:
            raise ValueError("channel capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque()
        self._takes: list = []
        self._puts = 0
        self._cond = threading.Condition()
        self._abort = abort
        self.max_depth = 0
        self.stalls = 0

    def _wait(self, ready) -> None:
        while not ready():
            if self._abort.is_set():
                raise _Aborted()
            self._cond.wait(0.05)

    def put(self, item, clock: float) -> float:
        """Enqueue ``item`` ready at ``clock``; returns the producer clock after any stall."""
        with self._cond:
            self._wait(lambda: len(self._items) < self.capacity)
            j = self._puts
            self._puts += 1
            if j >= self.capacity and self._takes[j - self.capacity] > clock:
                self.stalls += 1
                clock = self._takes[j - self.capacity]
            self._items.append((item, clock))
            self.max_depth = max(self.max_depth, len(self._items))
            self._cond.notify_all()
            return clock

    def get(self, clock: float) -> tuple:
        """Dequeue the next item; returns ``(item, consumer clock at take)``."""
        with self._cond:
            self._wait(lambda: bool(self._items))
            item, ready = self._items.popleft()
            take = max(clock, ready)
            self._takes.append(take)
            self._cond.notify_all()
            return item, take


def default_stages(g: PlanDag, sigma: list | None = None) -> list:
    """One stage per PREDICT node and one per connected group of relational nodes.

    Stages come back in an order where every cross-stage edge points forward.
    """
    order = list(sigma) if sigma is not None else discover_dependencies(g).order
    pos = {v: i for i, v in enumerate(order)}
    parent = {v: v for v in g.nodes}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for e in g.edges:
        if g.nodes[e.src].kind != "PREDICT" and g.nodes[e.dst].kind != "PREDICT":
            parent[find(e.src)] = find(e.dst)
    groups: dict = {}
    for v in order:
        groups.setdefault(find(v), []).append(v)
    return order_stages(g, list(groups.values()), pos)


def order_stages(g: PlanDag, stages: list, pos: dict | None = None) -> list:
    """Topologically order stages; raises PlanError if they do not partition the plan acyclically."""
    flat = [v for s in stages for v in s]
    if sorted(flat) != sorted(g.nodes):
        raise PlanError("stages must partition the plan's nodes")
    pos = pos or {v: i for i, v in enumerate(discover_dependencies(g).order)}
    stage_of = {v: i for i, s in enumerate(stages) for v in s}
    succ = {i: set() for i in range(len(stages))}
    indeg = {i: 0 for i in range(len(stages))}
    for e in g.edges:
        a, b = stage_of[e.src], stage_of[e.dst]
        if a != b and b not in succ[a]:
            succ[a].add(b)
            indeg[b] += 1
    ready = sorted((i for i in indeg if indeg[i] == 0), key=lambda i: min(pos[v] for v in stages[i]))
    out = []
    while ready:
        i = ready.pop(0)
        out.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
        ready.sort(key=lambda i: min(pos[v] for v in stages[i]))
    if len(out) != len(stages):
        raise PlanError("stages depend on each other cyclically")
    return [sorted(stages[i], key=pos.get) for i in out]


class _Stage:
    def __init__(self, index, nodes, g, ops, channels, results):
        self.index = index
        self.nodes = nodes
        self.members = set(nodes)
        self.g = g
        self.ops = ops
        self.channels = channels      # (src, dst) -> Channel
        self.results = results
        self.clock = 0.0
        self.current = None

    def _call(self, nid, fn, *args) -> list:
        self.current = nid
        op: Operator = self.ops[nid]
        t0 = op.seconds
        out = fn(*args)
        self.clock += op.seconds - t0
        return out

    def _forward(self, nid, batches) -> None:
        c = _consumer(self.g, nid)
        for b in batches:
            if c is None:
                self.results.append(b)
            elif c in self.members:
                port = self.g.nodes[c].inputs.index(nid)
                self._forward(c, self._call(c, self.ops[c].push, port, b))
            else:
                self.clock = self.channels[(nid, c)].put(b, self.clock)

    def _forward_end(self, nid) -> None:
        c = _consumer(self.g, nid)
        if c is None:
            return
        if c in self.members:
            self._end(c, self.g.nodes[c].inputs.index(nid))
        else:
            self.clock = self.channels[(nid, c)].put(_END, self.clock)

    def _end(self, nid, port) -> None:
        op = self.ops[nid]
        self._forward(nid, self._call(nid, op.end, port))
        if len(op._ended) == op.n_ports:
            self._forward_end(nid)

    def run(self) -> None:
        for nid in self.nodes:
            if self.g.nodes[nid].kind == "SCAN":
                self.current = nid
                op = self.ops[nid]
                it = op.source()
                while True:
                    t0 = op.seconds
                    chunk = next(it, None)
                    self.clock += op.seconds - t0
                    if chunk is None:
                        break
                    self._forward(nid, [chunk])
                self._forward_end(nid)
        inbound = [(src, dst) for (src, dst) in self.channels if dst in self.members]
        inbound.sort(key=lambda k: (self.nodes.index(k[1]), self.g.nodes[k[1]].inputs.index(k[0])))
        for src, dst in inbound:
            ch = self.channels[(src, dst)]
            port = self.g.nodes[dst].inputs.index(src)
            while True:
                item, self.clock = ch.get(self.clock)
                if item is _END:
                    self._end(dst, port)
                    break
                self._forward(dst, self._call(dst, self.ops[dst].push, port, item))


def pipeline_run(g: PlanDag, rt: Runtime, stages: list | None = None, capacity: int = DEFAULT_CAPACITY,
                 sigma: list | None = None) -> tuple[RowBatch, RunMetrics]:
    """Run stages concurrently, connected by bounded channels, and return the same rows as ``execute``.

    The plan is a tree, so every stage drains its inputs one after another
    without deadlock: a blocked producer never waits on the stage it feeds.
    """
    order = list(sigma) if sigma is not None else discover_dependencies(g).order
    check_order(g, order)
    pos = {v: i for i, v in enumerate(order)}
    stages = default_stages(g, order) if stages is None else order_stages(g, [list(s) for s in stages], pos)
    before = _counters(rt)
    abort = threading.Event()
    ops = {}
    for nid in order:
        try:
            ops[nid] = make_operator(g.nodes[nid], rt)
        except Exception as exc:
            raise ExecutionError(nid, exc) from exc
    stage_of = {v: i for i, s in enumerate(stages) for v in s}
    channels = {}
    for nid, node in g.nodes.items():
        for src in node.inputs:
            if stage_of[src] != stage_of[nid]:
                channels[(src, nid)] = Channel(capacity, abort)
    results: list = []
    workers = [_Stage(i, s, g, ops, channels, results) for i, s in enumerate(stages)]
    errors: list = []

    def run(stage: _Stage):
        try:
            stage.run()
        except _Aborted:
            pass
        except BaseException as exc:  # noqa: BLE001 - reported to the caller below
            err = exc if isinstance(exc, ExecutionError) else ExecutionError(stage.current, exc)
            if not isinstance(exc, ExecutionError):
                err.__cause__ = exc
            errors.append(err)
            abort.set()

    threads = [threading.Thread(target=run, args=(w,), name=f"taskdb-stage-{w.index}", daemon=True)
               for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    m = _finish_metrics(RunMetrics("pipelined"), g, ops, rt, before)
    m.makespan = max((w.clock for w in workers), default=0.0)
    m.stages = [list(s) for s in stages]
    return _result(g, results), m
