"""Push-based physical operators.

Every operator consumes row batches on numbered input ports and returns the
batches it emits:

* ``push(port, batch) -> list[RowBatch]``
* ``end(port) -> list[RowBatch]``: that port is exhausted; once every port
  has ended the operator flushes whatever it still holds.

``seconds`` accumulates the operator's simulated time. Relational work is
charged per input row; inference is charged per batch by the device cost
model; feature extraction is charged per extractor invocation.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from taskdb.backends.cost import CPU_DEFAULT, ModelProfile, batch_seconds
from taskdb.backends.remote import RemoteClient
from taskdb.backends.stub import StubModel, run_stacked
from taskdb.errors import PlanError, UnknownTable
from taskdb.executor.cache import EmbeddingCache, content_key, extract
from taskdb.executor.eval import aggregate, compile_expr, sort_rows, truth, value_kind, window_values
from taskdb.executor.table import RowBatch
from taskdb.executor.window import WindowState, window_accumulate, window_cleanup, window_infer
from taskdb.model_repo import StorageKind
from taskdb.tensor import Mvec

REL_ROW_SECONDS = 1e-7          # simulated CPU time per relational input row
DEFAULT_EXTRACT_SECONDS = 1e-3  # simulated time per feature-extractor invocation


# -- model handles ----------------------------------------------------------------

@dataclass
class LocalHandle:
    model: StubModel
    realtime: bool = False

    @property
    def input_shape(self):
        return self.model.input_shape

    def run(self, stacked: np.ndarray, device):
        out, elapsed = run_stacked(self.model, stacked, device or CPU_DEFAULT, self.realtime)
        return [Mvec((self.model.output_dim,), row) for row in out], elapsed


@dataclass
class RemoteHandle:
    client: RemoteClient
    profile: ModelProfile
    input_shape: tuple | None = None

    def run(self, stacked: np.ndarray, device):
        rows = [Mvec.from_array(r) for r in stacked]
        out = self.client.invoke(rows)
        return out, batch_seconds(self.profile, device, len(rows))


# -- runtime ----------------------------------------------------------------------

@dataclass
class Runtime:
    """Everything operators need beyond the plan itself."""

    tables: dict                          # name -> Table
    repo: object = None                   # ModelRepo
    extractor: object = None              # has extractor_id and extract(raw)
    cache: EmbeddingCache | None = None
    extract_cost: float = DEFAULT_EXTRACT_SECONDS
    chunk_rows: int = 256
    realtime: bool = False
    workers: int = 4
    handles: dict = field(default_factory=dict)   # model_id -> handle, preloaded or lazily filled
    extractor_calls: int = 0
    cache_hits: int = 0
    cache_misses: int = 0

    def __post_init__(self):
        if self.extractor is None:
            from taskdb.selection.regress import HashingExtractor
            self.extractor = HashingExtractor()
        if self.chunk_rows < 1:
            raise ValueError("chunk_rows must be >= 1")
        self._lock = threading.Lock()
        self._pool = None

    @property
    def pool(self) -> ThreadPoolExecutor:
        with self._lock:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="taskdb-convert")
            return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def handle(self, model_id: int):
        with self._lock:
            h = self.handles.get(model_id)
            if h is not None:
                return h
            if self.repo is None:
                raise PlanError(f"no model catalog to load model {model_id} from")
            rec = self.repo.get(model_id)
            if rec.storage_kind is StorageKind.API:
                h = RemoteHandle(RemoteClient(rec.api), rec.profile)
            else:
                h = LocalHandle(StubModel.from_assembled(self.repo.load_model(model_id)), self.realtime)
            self.handles[model_id] = h
            return h

    def count(self, calls: int = 0, hits: int = 0, misses: int = 0) -> None:
        with self._lock:
            self.extractor_calls += calls
            self.cache_hits += hits
            self.cache_misses += misses

    def embed(self, raws: list) -> tuple[list, int]:
        """Embeddings for raw values, in order; returns them with the extractor call count.

        With a cache, distinct inputs are looked up once and only misses are
        extracted. Without one, every row is extracted. Extraction fans out
        over the worker pool.
        """
        ex = self.extractor
        if self.cache is None:
            out = list(self.pool.map(lambda r: extract(ex, r), raws))
            self.count(calls=len(raws))
            return out, len(raws)
        keys = [content_key(ex.extractor_id, r) for r in raws]
        found, todo = {}, {}
        for k, r in zip(keys, raws):
            if k in found or k in todo:
                continue
            hit = self.cache.get(k)
            if hit is None:
                todo[k] = r
            else:
                found[k] = hit
        computed = list(self.pool.map(lambda r: extract(ex, r), todo.values()))
        for k, v in zip(todo, computed):
            self.cache.put(k, v)
            found[k] = v
        self.count(calls=len(todo), hits=len(keys) - len(todo), misses=len(todo))
        return [found[k] for k in keys], len(todo)


# -- operators ----------------------------------------------------------------------

class Operator:
    n_ports = 1

    def __init__(self, node, rt: Runtime):
        self.node = node
        self.rt = rt
        self.seconds = 0.0
        self.rows_in = 0
        self.rows_out = 0
        self.batches = 0          # model batches executed
        self._ended: set = set()

    def push(self, port: int, batch: RowBatch) -> list:
        self.rows_in += batch.row_count
        self.seconds += REL_ROW_SECONDS * batch.row_count
        return self._emit(self.consume(port, batch))

    def end(self, port: int) -> list:
        self._ended.add(port)
        if len(self._ended) == self.n_ports:
            return self._emit(self.flush())
        return self._emit(self.port_done(port))

    def _emit(self, batches: list) -> list:
        out = [b for b in batches if b.row_count]
        self.rows_out += sum(b.row_count for b in out)
        return out

    # subclasses override these
    def consume(self, port: int, batch: RowBatch) -> list:
        return [batch]

    def port_done(self, port: int) -> list:
        return []

    def flush(self) -> list:
        return []


def _from_dicts(rows: list) -> RowBatch:
    if not rows:
        return RowBatch({})
    return RowBatch.from_rows(list(rows[0]), rows)


class Scan(Operator):
    n_ports = 0

    def source(self):
        """Yield the table in chunks, with columns qualified by the alias."""
        p = self.node.params
        table = self.rt.tables.get(p["table"])
        if table is None:
            raise UnknownTable(f"table {p['table']!r} is not loaded")
        alias = p["alias"]
        cols = {f"{alias}.{c}": v for c, v in table.columns.items()}
        cols = {c: cols[c] for c in p["columns"]}
        whole = RowBatch(cols)
        n, step = whole.row_count, self.rt.chunk_rows
        for start in range(0, n, step):
            chunk = whole.slice(start, min(n, start + step))
            self.rows_in += chunk.row_count
            self.rows_out += chunk.row_count
            self.seconds += REL_ROW_SECONDS * chunk.row_count
            yield chunk


class Filter(Operator):
    def __init__(self, node, rt):
        super().__init__(node, rt)
        self.pred = compile_expr(node.params["predicate"])

    def consume(self, port, batch):
        return [_from_dicts([r for r in batch.rows() if truth(self.pred(r)) is True])]


def row_key(values: tuple) -> tuple:
    """Hashable grouping key in which NULLs match each other and kinds never mix."""
    return tuple((0, None) if v is None else (value_kind(v), v) for v in values)


def _join_key(values: tuple):
    """Like ``row_key`` but None when any part is NULL: NULL never joins."""
    return None if any(v is None for v in values) else row_key(values)


class Join(Operator):
    """Hash equi-join (cross product when no keys). Port 0 probes, port 1 builds."""

    n_ports = 2

    def __init__(self, node, rt):
        super().__init__(node, rt)
        keys = node.params["keys"]
        self.left = [compile_expr(l) for l, _ in keys]
        self.right = [compile_expr(r) for _, r in keys]
        self.table: dict = {}
        self.build_rows: list = []
        self.built = False
        self.pending: list = []

    def _probe(self, rows) -> list:
        out = []
        for r in rows:
            if self.left:
                k = _join_key(tuple(f(r) for f in self.left))
                matches = self.table.get(k, ()) if k is not None else ()
            else:
                matches = self.build_rows
            for m in matches:
                out.append({**r, **m})
        return [_from_dicts(out)]

    def consume(self, port, batch):
        if port == 1:
            for r in batch.rows():
                if self.right:
                    k = _join_key(tuple(f(r) for f in self.right))
                    if k is not None:
                        self.table.setdefault(k, []).append(r)
                else:
                    self.build_rows.append(r)
            return []
        if not self.built:
            self.pending.append(batch)
            return []
        return self._probe(batch.rows())

    def port_done(self, port):
        if port != 1:
            return []
        self.built = True
        out = []
        for b in self.pending:
            out += self._probe(b.rows())
        self.pending = []
        return out

    def flush(self):
        return self.port_done(1) if not self.built else []


def decode_output(y: Mvec, task_type, labels):
    """Map a raw model output row to the task's result value."""
    if y is None:
        return None
    if task_type is None:
        return y
    v = y.data
    if task_type == "Regression":
        return float(v[0])
    if labels:
        return labels[int(np.argmax(v[:len(labels)]))]
    return int(np.argmax(v))


class Predict(Operator):
    """Window-function batch inference: accumulate, infer the stacked batch, release."""

    def __init__(self, node, rt):
        super().__init__(node, rt)
        p = node.params
        self.arg = compile_expr(p["arg"])
        self.out = p["out"]
        self.task_type = p.get("task_type")
        self.labels = p.get("labels")
        self.state = WindowState(node.batch_size or 1)
        self.device = node.assigned_device
        self.model = rt.handle(p["model_id"])

    def _convert(self, values: list) -> list:
        out = [None] * len(values)
        raw_idx = [i for i, v in enumerate(values) if isinstance(v, (str, bytes, bytearray))]
        if raw_idx:
            embedded, calls = self.rt.embed([values[i] for i in raw_idx])
            self.seconds += calls * self.rt.extract_cost
            for i, m in zip(raw_idx, embedded):
                out[i] = m
        for i, v in enumerate(values):
            if isinstance(v, Mvec):
                out[i] = v
            elif isinstance(v, (bool, int, float)):
                out[i] = Mvec((1,), [float(v)])
            elif v is not None and out[i] is None:
                raise PlanError(f"row {self.state.start_index + i}: cannot feed {type(v).__name__} to a model")
        return out

    def _run(self) -> list:
        before = self.state.elapsed
        window_infer(self.state, self.model, self.device, self._convert)
        self.seconds += self.state.elapsed - before
        self.batches = self.state.batches
        rows = []
        for row, y in window_cleanup(self.state):
            row = dict(row)
            row[self.out] = decode_output(y, self.task_type, self.labels)
            rows.append(row)
        return [_from_dicts(rows)]

    def consume(self, port, batch):
        out = []
        for r in batch.rows():
            if window_accumulate(self.state, r, self.arg(r)) is not None:
                out += self._run()
        return out

    def flush(self):
        return self._run() if self.state.rows else []


class _Blocking(Operator):
    """Buffers its whole input and computes on flush."""

    def __init__(self, node, rt):
        super().__init__(node, rt)
        self.rows: list = []

    def consume(self, port, batch):
        self.rows.extend(batch.rows())
        return []


class GroupBy(_Blocking):
    """Hash grouping (GROUPBY) or a single global group (AGGREGATE)."""

    def __init__(self, node, rt):
        super().__init__(node, rt)
        self.keys = [(name, compile_expr(e)) for name, e in node.params["keys"]]
        self.aggs = [(name, call, compile_expr(call.args[0]) if call.args and not call.star else None)
                     for name, call in node.params["aggs"]]

    def flush(self):
        groups: dict = {}
        for r in self.rows:
            vals = tuple(f(r) for _, f in self.keys)
            groups.setdefault(row_key(vals), (vals, []))[1].append(r)
        if not self.keys and not groups:
            groups[()] = ((), [])
        out = []
        for vals, members in groups.values():
            row = {name: v for (name, _), v in zip(self.keys, vals)}
            for name, call, fn in self.aggs:
                row[name] = aggregate(call, members, fn)
            out.append(row)
        names = [n for n, _ in self.keys] + [n for n, _, _ in self.aggs]
        return [RowBatch.from_rows(names, out)]


class Window(_Blocking):
    def flush(self):
        if not self.rows:
            return []
        rows = [dict(r) for r in self.rows]
        for name, call in self.node.params["windows"]:
            for r, v in zip(rows, window_values(call, self.rows)):
                r[name] = v
        return [_from_dicts(rows)]


class Output(_Blocking):
    """Projection, ORDER BY, DISTINCT and LIMIT; emits the named result columns."""

    def __init__(self, node, rt):
        super().__init__(node, rt)
        p = node.params
        self.items = [(name, compile_expr(e)) for name, e in p["items"]]
        self.names = [n for n, _ in self.items]
        self.order = [compile_expr(o.expr) for o in p.get("order_by") or []]
        self.desc = [o.desc for o in p.get("order_by") or []]
        self.limit = p.get("limit")
        self.distinct = p.get("distinct", False)

    def flush(self):
        rows = self.rows
        if self.order:
            rows = sort_rows(rows, self.order, self.desc)
        out = [tuple(f(r) for _, f in self.items) for r in rows]
        if self.distinct:
            seen, uniq = set(), []
            for t in out:
                k = row_key(t)
                if k not in seen:
                    seen.add(k)
                    uniq.append(t)
            out = uniq
        if self.limit is not None:
            out = out[: self.limit]
        return [RowBatch({n: [t[i] for t in out] for i, n in enumerate(self.names)})]

    def _emit(self, batches):
        # the result keeps its schema even when empty
        self.rows_out += sum(b.row_count for b in batches)
        return batches


OPERATORS = {
    "SCAN": Scan,
    "FILTER": Filter,
    "JOIN": Join,
    "PREDICT": Predict,
    "GROUPBY": GroupBy,
    "AGGREGATE": GroupBy,
    "WINDOW": Window,
    "OUTPUT": Output,
}


def make_operator(node, rt: Runtime) -> Operator:
    cls = OPERATORS.get(node.kind)
    if cls is None:
        raise PlanError(f"node {node.node_id}: no operator for kind {node.kind}")
    return cls(node, rt)
