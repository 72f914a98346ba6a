"""High-level engine: a data directory holding the model catalog, task
registry, tables and trained selectors, plus query planning and execution.

Data directory layout::

    catalog/            model catalog
    tasks.jsonl         task registry
    tables/             <table>.csv plus <table>.<column>.mvec sidecars
    selectors/<name>/   trained selectors, one per model family
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from taskdb.backends.cost import default_devices
from taskdb.backends.zoo import IMAGE_SHAPE, PROFILES, SERIES_LEN, TEXT_DIM, make_transfer_problem, register_family
from taskdb.errors import PlanError, SelectionUnavailable
from taskdb.executor.cache import EmbeddingCache
from taskdb.executor.engine import RunMetrics, execute, pipeline_run
from taskdb.executor.operators import DEFAULT_EXTRACT_SECONDS, Runtime
from taskdb.executor.table import RowBatch, Table, load_tables, save_table
from taskdb.fixtures import IMAGE_LABELS, SENTIMENT_LABELS, demo_tables
from taskdb.model_repo import ModelRepo, StorageKind
from taskdb.planner.dag import LogicalPlan, PlanContext, PlanDag, build_dag, parse_query
from taskdb.planner.dsl import CreateTask, Explain, SelectModel
from taskdb.planner.explain import explain_plan
from taskdb.planner.placement import (
    DEFAULT_CANDIDATES,
    DEFAULT_MEM_BUDGET,
    api_device,
    estimate_cardinalities,
    place_operators,
)
from taskdb.planner.tasks import TaskEntry, TaskRegistry, TaskSpec, register_task, reselect
from taskdb.selection.io import Selector
from taskdb.selection.regress import HashingExtractor

# which selector family serves a task input type
FAMILY_OF_INPUT = {"Text": "text", "Image": "image", "Series": "series", "Tensor": "image"}


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


# read by ``taskdb.kernels`` at import, not engine settings
IMPORT_TIME_ENV = frozenset({"TASKDB_PURE_PYTHON"})


@dataclass
class EngineConfig:
    data_dir: Path = Path("taskdb-data")
    devices: list = field(default_factory=default_devices)
    default_k: int | None = None
    batch_candidates: tuple = DEFAULT_CANDIDATES
    batch_size: int | None = None          # force every PREDICT to this batch size
    cache_capacity: int = 4096
    mem_budget: float = DEFAULT_MEM_BUDGET
    realtime: bool = False
    seed: int = 0
    pipeline: bool = True
    queue_capacity: int = 4
    chunk_rows: int = 256
    extract_cost: float = DEFAULT_EXTRACT_SECONDS

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        self.batch_candidates = tuple(int(b) for b in self.batch_candidates)
        if not self.batch_candidates or min(self.batch_candidates) < 1:
            raise ValueError("batch candidates must be positive integers")
        if self.cache_capacity < 1 or self.queue_capacity < 1 or self.chunk_rows < 1:
            raise ValueError("cache_capacity, queue_capacity and chunk_rows must be >= 1")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "EngineConfig":
        """Build from flat string settings; ``cpu_<field>``/``gpu_<field>`` tune the device profiles."""
        kw, dev = {}, {}
        for key, raw in values.items():
            key = key.strip().lower()
            if key.startswith(("cpu_", "gpu_")):
                dev[key] = float(raw)
            elif key == "data_dir":
                kw[key] = Path(raw)
            elif key in ("default_k", "batch_size"):
                kw[key] = None if str(raw).strip().lower() in ("", "none", "auto") else int(raw)
            elif key == "batch_candidates":
                kw[key] = tuple(int(x) for x in str(raw).replace(" ", "").split(",") if x)
            elif key in ("cache_capacity", "seed", "queue_capacity", "chunk_rows"):
                kw[key] = int(raw)
            elif key in ("mem_budget", "extract_cost"):
                kw[key] = float(raw)
            elif key in ("realtime", "pipeline"):
                kw[key] = _as_bool(raw)
            else:
                raise ValueError(f"unknown config key {key!r}")
        if dev:
            kw["devices"] = default_devices(**dev)
        return cls(**kw)

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, env: Mapping[str, str] | None = None,
             **overrides) -> "EngineConfig":
        """File settings, then ``TASKDB_*`` environment overrides, then keyword overrides."""
        values: dict = {}
        if path is not None:
            for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                k, v = line.split("=", 1)
                values[k.strip().lower()] = v.strip()
        env = os.environ if env is None else env
        for k, v in env.items():
            if k.startswith("TASKDB_") and k not in IMPORT_TIME_ENV:
                values[k[len("TASKDB_"):].lower()] = v
        cfg = cls.from_mapping(values)
        typed = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(cfg, **typed) if typed else cfg


@dataclass
class QueryResult:
    rows: RowBatch
    metrics: RunMetrics
    plan: PlanDag


def model_function_name(name: str) -> str:
    """Identifier under which a catalog model can be called directly in a query."""
    return re.sub(r"\W", "_", name.lower())


class Engine:
    def __init__(self, config: EngineConfig | None = None):
        self.config = config or EngineConfig()
        root = self.config.data_dir
        root.mkdir(parents=True, exist_ok=True)
        self.repo = ModelRepo(root / "catalog")
        self.tasks = TaskRegistry(root / "tasks.jsonl")
        self.tables: dict = load_tables(root / "tables")
        self.cache = EmbeddingCache(self.config.cache_capacity)
        self.extractor = HashingExtractor(TEXT_DIM, self.config.seed)
        self._handles: dict = {}

    # -- tables and selectors -------------------------------------------------------

    @property
    def tables_dir(self) -> Path:
        return self.config.data_dir / "tables"

    def add_table(self, table: Table, persist: bool = True) -> None:
        self.tables[table.name] = table
        if persist:
            save_table(table, self.tables_dir)

    def selector_dir(self, name: str) -> Path:
        return self.config.data_dir / "selectors" / name

    def save_selector(self, name: str, selector: Selector) -> Path:
        path = self.selector_dir(name)
        selector.save(path)
        return path

    def selector(self, name: str) -> Selector:
        return Selector.load(self.selector_dir(name))

    # -- tasks ----------------------------------------------------------------------

    def create_task(self, ddl: str | CreateTask, model_id: int | None = None, features=None,
                    selector_name: str | None = None) -> TaskEntry:
        stmt = parse_query(ddl) if isinstance(ddl, str) else ddl
        if not isinstance(stmt, CreateTask):
            raise PlanError("expected a CREATE TASK statement")
        spec = TaskSpec.from_ddl(stmt)
        if model_id is None and stmt.model_id is not None:
            model_id = int(stmt.model_id)
        selector = None
        if model_id is None:
            selector_name = selector_name or FAMILY_OF_INPUT.get(spec.input_type, "default")
            selector = self.selector(selector_name)
        else:
            self.repo.get(model_id)     # fail early on unknown ids
        return register_task(self.tasks, spec, selector, features, model_id, selector_name)

    def select_model(self, task: str, rebind: bool = False) -> int:
        entry = self.tasks.get(task)
        if entry.selector is None:
            raise SelectionUnavailable(f"task {task!r} was bound explicitly, not by a selector")
        return reselect(self.tasks, task, self.selector(entry.selector), rebind)

    # -- planning -------------------------------------------------------------------

    def context(self) -> PlanContext:
        models = {}
        for rec in self.repo.list_models():
            models.setdefault(model_function_name(rec.name), rec.model_id)
        return PlanContext(
            schemas={n: t.column_names for n, t in self.tables.items()},
            tasks=self.tasks,
            models=models,
            row_counts={n: t.row_count for n, t in self.tables.items()},
        )

    def plan(self, sql: str, batch_size: int | None = None) -> PlanDag:
        plan = parse_query(sql, self.context())
        if isinstance(plan, Explain):
            plan = plan.statement
        if not isinstance(plan, LogicalPlan):
            raise PlanError("expected a SELECT query")
        g = build_dag(plan)
        self.place(g, plan.context.row_counts, batch_size)
        return g

    def place(self, g: PlanDag, row_counts: Mapping[str, int], batch_size: int | None = None) -> PlanDag:
        cards = estimate_cardinalities(g, row_counts)
        profiles, remote = {}, {}
        for n in g.predict_nodes():
            mid = n.params["model_id"]
            rec = self.repo.get(mid)
            profiles[mid] = rec.profile
            if rec.storage_kind is StorageKind.API:
                remote[mid] = api_device(rec.api.expected_latency)
        bs = batch_size if batch_size is not None else self.config.batch_size
        place_operators(g, self.config.devices, profiles, cards, remote, self.config.mem_budget,
                        self.config.batch_candidates, bs)
        return g

    def explain(self, sql: str, batch_size: int | None = None) -> str:
        return explain_plan(self.plan(sql, batch_size))

    # -- execution ------------------------------------------------------------------

    def runtime(self, cache: bool = True) -> Runtime:
        return Runtime(tables=self.tables, repo=self.repo, extractor=self.extractor,
                       cache=self.cache if cache else None, extract_cost=self.config.extract_cost,
                       chunk_rows=self.config.chunk_rows, realtime=self.config.realtime,
                       handles=self._handles)

    def run(self, g: PlanDag, pipeline: bool | None = None, cache: bool = True) -> tuple[RowBatch, RunMetrics]:
        rt = self.runtime(cache)
        try:
            if self.config.pipeline if pipeline is None else pipeline:
                return pipeline_run(g, rt, capacity=self.config.queue_capacity)
            return execute(g, rt)
        finally:
            rt.close()

    def query(self, sql: str, batch_size: int | None = None, pipeline: bool | None = None,
              cache: bool = True) -> QueryResult:
        g = self.plan(sql, batch_size)
        rows, metrics = self.run(g, pipeline, cache)
        return QueryResult(rows, metrics, g)

    def statement(self, sql: str):
        """Run any statement: SELECT, EXPLAIN, CREATE TASK or SELECT MODEL FOR."""
        stmt = parse_query(sql)
        if isinstance(stmt, CreateTask):
            return self.create_task(stmt)
        if isinstance(stmt, SelectModel):
            return self.select_model(stmt.task)
        if isinstance(stmt, Explain):
            return self.explain(sql)
        return self.query(sql)


# -- demo data --------------------------------------------------------------------

DEMO_TASKS = (
    ("text", "CREATE TASK sentiment_classifier (INPUT=Text_Blob, OUTPUT in '%s', Type='Classification')"
     % ", ".join(SENTIMENT_LABELS)),
    ("image", "CREATE TASK imagerecognition (INPUT=Image, OUTPUT in '%s', Type='Classification')"
     % ", ".join(IMAGE_LABELS)),
    ("series", "CREATE TASK forecast (INPUT=Series, Type='Regression')"),
)

# family -> (base name, layer widths, profile, input shape)
DEMO_FAMILIES = {
    "text": ("textnet", [TEXT_DIM, 16, len(SENTIMENT_LABELS)], PROFILES["text_light"], (TEXT_DIM,)),
    "image": ("imgnet", [int(np.prod(IMAGE_SHAPE)), 32, len(IMAGE_LABELS)], PROFILES["image"], IMAGE_SHAPE),
    "series": ("seriesnet", [SERIES_LEN, 8, 1], PROFILES["series"], (SERIES_LEN,)),
}


def seed_demo(engine: Engine, variants: int = 4, blob_variants: int = 1, n_reviews: int = 100,
              tables: dict | None = None) -> dict:
    """Populate an empty engine with model families, trained selectors, tasks and tables.

    Returns ``{family: [model ids]}``. Deterministic for a fixed config seed.
    """
    seed = engine.config.seed
    rng = np.random.default_rng(seed)
    families = {}
    for fam, (base, widths, profile, shape) in DEMO_FAMILIES.items():
        ids = register_family(engine.repo, base, widths, variants, profile, rng, shape, blob_variants)
        families[fam] = ids
        problem = make_transfer_problem(n_models=len(ids), n_tasks=15, k=3, seed=seed, model_ids=ids,
                                        n_holdout=4)
        sel = Selector.train(problem.train, problem.train_features, k=engine.config.default_k or 3, seed=seed)
        engine.save_selector(fam, sel)
        families[fam + ".features"] = problem.holdout_features[0]
    for fam, ddl in DEMO_TASKS:
        engine.create_task(ddl, features=families.pop(fam + ".features"), selector_name=fam)
    for t in (tables or demo_tables(n_reviews=n_reviews, seed=seed)).values():
        engine.add_table(t)
    return families


__all__ = [
    "DEMO_FAMILIES",
    "DEMO_TASKS",
    "Engine",
    "EngineConfig",
    "QueryResult",
    "model_function_name",
    "seed_demo",
]
