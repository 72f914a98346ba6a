"""Desk-scale benchmark sweeps over simulated time.

Each suite returns a ``BenchReport``: a title, column names, rows and notes.
Reports render as aligned text and as plot-ready CSV. Every suite except
``kernels`` books simulated seconds only, so its output is identical across
runs with the same seed; ``kernels`` measures wall-clock time.
"""

from __future__ import annotations

import csv
import io
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from taskdb import kernels
from taskdb.backends.cost import CPU_DEFAULT, GPU_DEFAULT, choose_device, find_crossover, total_cost
from taskdb.backends.zoo import PROFILES, affine_layers, perturb
from taskdb.model_repo import ApiModelSpec, BaseModel, ModelRepo, pack_blob
from taskdb.planner.placement import batch_objective

BATCH_SWEEP = (4, 8, 16, 32, 64, 128)
SUITES = ("batch", "devices", "cache", "storage", "kernels")


@dataclass
class BenchReport:
    name: str
    columns: list
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [[str(c) for c in self.columns]] + [[_cell(v) for v in r] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.columns))]
        lines = [f"== {self.name} =="]
        for j, row in enumerate(cells):
            lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
            if j == 0:
                lines.append("  ".join("-" * w for w in widths))
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def _cell(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def is_unimodal(values) -> bool:
    """Non-increasing then non-decreasing; empty and single-point curves count."""
    i, n = 0, len(values)
    if n < 2:
        return True
    while i + 1 < n and values[i + 1] <= values[i]:
        i += 1
    while i + 1 < n and values[i + 1] >= values[i]:
        i += 1
    return i == n - 1


# -- suites -------------------------------------------------------------------------

def bench_batch(nrows: int = 10_000, executed_rows: int = 2_000, seed: int = 0) -> BenchReport:
    """Simulated cost of the image workload on the GPU for each batch size.

    ``objective`` is the planner's closed form over ``nrows``; ``executed`` is
    the executor's booked model time for an image query over ``executed_rows``.
    """
    from taskdb.engine import Engine, EngineConfig
    from taskdb.fixtures import big_product_table

    profile = PROFILES["image"]
    rep = BenchReport("batch size sweep (image model on gpu)", ["batch_size", "objective_s", "executed_s"])
    with tempfile.TemporaryDirectory() as d:
        eng = Engine(EngineConfig(data_dir=Path(d), seed=seed))
        _seed_image_only(eng, seed)
        eng.add_table(big_product_table(executed_rows, seed), persist=False)
        for B in BATCH_SWEEP:
            res = eng.query("SELECT imagerecognition(p.img) FROM product p", batch_size=B, pipeline=False)
            predict = [n for n in res.metrics.nodes.values() if n.kind == "PREDICT"][0]
            rep.rows.append([B, batch_objective(profile, GPU_DEFAULT, nrows, B), predict.seconds])
    obj = rep.column("objective_s")
    best = BATCH_SWEEP[int(np.argmin(obj))]
    rep.notes.append(f"minimum at B={best}; unimodal={is_unimodal(obj)}")
    return rep


def _seed_image_only(eng, seed: int) -> None:
    from taskdb.engine import DEMO_FAMILIES, DEMO_TASKS

    base, widths, profile, shape = DEMO_FAMILIES["image"]
    from taskdb.backends.zoo import register_family

    ids = register_family(eng.repo, base, widths, 1, profile, np.random.default_rng(seed), shape)
    ddl = dict(DEMO_TASKS)["image"]
    eng.create_task(ddl, model_id=ids[0])


def bench_devices(rows=(1, 10, 100, 1_000, 10_000, 100_000)) -> BenchReport:
    """CPU and GPU totals per workload family and the device each row count picks."""
    rep = BenchReport("device placement sweep", ["profile", "nrows", "cpu_s", "gpu_s", "chosen"])
    devices = [CPU_DEFAULT, GPU_DEFAULT]
    for name, prof in PROFILES.items():
        for n in rows:
            rep.rows.append([name, n, total_cost(prof, CPU_DEFAULT, n).total, total_cost(prof, GPU_DEFAULT, n).total,
                             choose_device(prof, devices, n).name])
        x = find_crossover(prof, CPU_DEFAULT, GPU_DEFAULT)
        rep.notes.append(f"{name}: gpu wins from {x} rows" if x is not None else f"{name}: cpu always wins")
    return rep


def bench_cache(n_reviews: int = 2_000, seed: int = 0) -> BenchReport:
    """A text query run without the cache, then twice with it (cold, warm)."""
    from taskdb.engine import Engine, EngineConfig, seed_demo

    rep = BenchReport("embedding cache", ["run", "extractor_calls", "cache_hits", "makespan_s", "rows"])
    sql = "SELECT r.id, sentiment_classifier(r.comment) FROM review r"
    with tempfile.TemporaryDirectory() as d:
        eng = Engine(EngineConfig(data_dir=Path(d), seed=seed))
        seed_demo(eng, n_reviews=n_reviews)
        results = []
        for label, cache in (("no-cache", False), ("cold", True), ("warm", True)):
            res = eng.query(sql, pipeline=False, cache=cache)
            results.append(sorted(res.rows.tuples()))
            m = res.metrics
            rep.rows.append([label, m.extractor_calls, m.cache_hits, m.makespan, res.rows.row_count])
    rep.notes.append(f"identical results across runs: {all(r == results[0] for r in results)}")
    return rep


def bench_storage(seed: int = 0, widths=(192, 64, 32, 4)) -> BenchReport:
    """Disk bytes for one architecture stored as blob, as decoupled variants, and as an API entry."""
    rep = BenchReport("storage usage", ["model", "kind", "bytes"])
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory() as d:
        repo = ModelRepo(Path(d), clock=lambda: 0.0)   # fixed timestamps keep catalog lines equal in size
        root = affine_layers(rng, list(widths))
        repo.register_base(BaseModel.of_layers("arch", root))
        ids = [("arch-ft0", repo.register_decoupled_model("arch-ft0", "1", "arch", perturb(root, rng))),
               ("arch-ft1", repo.register_decoupled_model("arch-ft1", "1", "arch", perturb(root, rng)))]
        blob = pack_blob({"base": "arch", "input_shape": [widths[0]]}, perturb(root, rng))
        ids.append(("arch-blob", repo.register_blob_model("arch-blob", "1", blob)))
        ids.append(("arch-api", repo.register_api_model("arch-api", "1",
                                                        ApiModelSpec("http://127.0.0.1:9/infer"))))
        for name, mid in ids:
            rec = repo.get(mid)
            rep.rows.append([name, rec.storage_kind.value, repo.disk_usage(mid)])
        rep.rows.append(["arch (base template)", "Base", repo.base_disk_usage("arch")])
    return rep


def bench_kernels(repeats: int = 5, seed: int = 0) -> BenchReport:
    """Wall-clock comparison of the compiled kernels against the numpy fallback."""
    rep = BenchReport("kernels (wall clock)", ["kernel", "backend", "best_ms"])
    rng = np.random.default_rng(seed)
    V = rng.uniform(0, 1, size=(200, 150))
    W0, H0 = rng.uniform(0, 1, size=(200, 5)), rng.uniform(0, 1, size=(150, 5))
    A0, B0 = V @ H0, H0.T @ H0      # the factor update W <- HALS(W; V H, H^T H)
    W, b = rng.normal(size=(64, 192)), rng.normal(size=64)
    rows = rng.normal(size=(256, 192))
    data = rng.integers(0, 256, size=4096, dtype=np.uint8).tobytes()
    for name, mod in kernels.available_backends().items():
        cases = {
            "hals_update": lambda: mod.hals_update(W0.copy(), A0, B0, 20, 1e-12, 0.01),
            "affine_rows": lambda: mod.affine_rows(W, b, rows),
            "hash_features": lambda: (mod.hash_features(data, 32, 0) if name == "python"
                                      else mod.hash_features(np.frombuffer(data, dtype=np.uint8), 32, 0)),
        }
        for kname, fn in cases.items():
            best = min(_timed(fn) for _ in range(repeats))
            rep.rows.append([kname, name, best * 1e3])
    rep.notes.append(f"active backend: {kernels.BACKEND}")
    return rep


def _timed(fn) -> float:
    t = time.perf_counter()
    fn()
    return time.perf_counter() - t


def run_suites(names, out_dir: str | Path | None = None, seed: int = 0) -> list[BenchReport]:
    fns = {"batch": lambda: bench_batch(seed=seed), "devices": bench_devices,
           "cache": lambda: bench_cache(seed=seed), "storage": lambda: bench_storage(seed=seed),
           "kernels": lambda: bench_kernels(seed=seed)}
    reports = []
    for n in names:
        try:
            reports.append(fns[n]())
        except Exception as exc:  # noqa: BLE001 - a failing suite is flagged, the rest still run
            reports.append(BenchReport(n, ["error"], [[f"{type(exc).__name__}: {exc}"]], ["partial: suite failed"]))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rep in zip(names, reports):
            (out / f"{name}.csv").write_text(rep.to_csv())
            (out / f"{name}.txt").write_text(rep.to_text())
    return reports
