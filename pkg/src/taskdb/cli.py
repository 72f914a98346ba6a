"""Command-line interface.

Exit codes: 0 success, 1 runtime error, 2 usage error.

Output formats for result rows (``--format``):

* ``table``: aligned text columns.
* ``csv``: RFC 4180 with a header row.
* ``jsonlike``: one JSON object per line (JSON Lines). Tensors appear as
  ``{"shape": [...], "data": [...]}``; floats keep their shortest
  round-trip form.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from taskdb import __version__
from taskdb.backends.cost import ModelProfile
from taskdb.engine import Engine, EngineConfig, seed_demo
from taskdb.errors import QuerySyntaxError, TaskDBError
from taskdb.executor.table import RowBatch, load_table
from taskdb.model_repo import ApiModelSpec, BaseModel, LayerRecord, StorageKind
from taskdb.selection.io import Selector, read_transfer_csv
from taskdb.selection.regress import PrecomputedExtractor
from taskdb.tensor import Mvec, read_frames


class UsageError(Exception):
    """Arguments parse but do not make sense together."""


# -- rendering --------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, Mvec):
        return {"shape": list(v.shape), "data": [float(x) for x in v.data]}
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, np.generic):
        return v.item()
    return v


def _text(v) -> str:
    if v is None:
        return "NULL"
    if isinstance(v, Mvec):
        return f"Mvec{list(v.shape)}"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_rows(rows: RowBatch, names: list, fmt: str) -> str:
    tuples = rows.tuples()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for t in tuples:
            w.writerow(["" if v is None else json.dumps(_jsonable(v)) if isinstance(v, Mvec) else _text(v)
                        for v in t])
        return buf.getvalue()
    if fmt == "jsonlike":
        return "".join(json.dumps({n: _jsonable(v) for n, v in zip(names, t)}) + "\n" for t in tuples)
    cells = [list(names)] + [[_text(v) for v in t] for t in tuples]
    widths = [max(len(r[i]) for r in cells) for i in range(len(names))] if names else []
    lines = []
    for j, r in enumerate(cells):
        lines.append(" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if j == 0:
            lines.append("-+-".join("-" * w for w in widths))
    lines.append(f"({len(tuples)} row{'s' if len(tuples) != 1 else ''})")
    return "\n".join(lines) + "\n"


def render_records(records: list, fmt: str) -> str:
    """Key/value records (model listings, bindings) in the chosen format."""
    if not records:
        return "" if fmt != "table" else "(none)\n"
    names = list(records[0])
    return render_rows(RowBatch({n: [r[n] for r in records] for n in names}), names, fmt)


# -- commands ---------------------------------------------------------------------

def _profile(args) -> ModelProfile | None:
    if args.flops is None and args.size is None and args.row_bytes is None:
        return None
    return ModelProfile(args.flops or 0.0, args.size or 0.0, args.row_bytes or 0.0)


def _read_layers(path: Path, base: BaseModel | None) -> list:
    """Layers from a file of concatenated frames: weight then (if the base says so) bias, per layer.

    Without a base every layer is a weight followed by a bias.
    """
    frames = read_frames(Path(path).read_bytes())
    layers, i, idx = [], 0, 0
    while i < len(frames):
        if base is not None and idx >= len(base.layers):
            raise ValueError(f"{path}: more frames than the base model has layers")
        name = base.layers[idx].name if base is not None else f"fc{idx}"
        has_bias = base.layers[idx].bias_shape is not None if base is not None else True
        weight = frames[i]
        bias = frames[i + 1] if has_bias and i + 1 < len(frames) else None
        if has_bias and bias is None:
            raise ValueError(f"{path}: layer {name} is missing its bias frame")
        layers.append(LayerRecord(None, name, idx, weight, bias))
        i += 2 if has_bias else 1
        idx += 1
    return layers


def cmd_import(eng: Engine, args, out) -> int:
    prof = _profile(args)
    if args.kind == "blob":
        if not args.file:
            raise UsageError("--kind blob needs --file")
        mid = eng.repo.register_blob_model(args.name, args.version, Path(args.file).read_bytes(), prof)
    elif args.kind == "decoupled":
        if not args.base or not args.layers:
            raise UsageError("--kind decoupled needs --base and --layers")
        known = {b.name for b in eng.repo.bases()}
        if args.base in known:
            layers = _read_layers(args.layers, eng.repo.base(args.base))
        else:
            layers = _read_layers(args.layers, None)
            eng.repo.register_base(BaseModel.of_layers(args.base, layers))
        mid = eng.repo.register_decoupled_model(args.name, args.version, args.base, layers, prof)
    else:
        if not args.endpoint:
            raise UsageError("--kind api needs --endpoint")
        spec = ApiModelSpec(args.endpoint, expected_latency=args.expected_latency, auth_ref=args.auth_ref,
                            quota=args.quota, timeout=args.timeout, max_retries=args.max_retries)
        mid = eng.repo.register_api_model(args.name, args.version, spec, prof)
    rec = eng.repo.get(mid)
    out.write(render_records([{"model_id": mid, "name": rec.name, "version": rec.version,
                               "kind": rec.storage_kind.value, "checksum": rec.checksum}], args.format))
    return 0


def _read_vector(path: Path) -> np.ndarray:
    if path.suffix == ".mvec":
        return read_frames(path.read_bytes())[0].data.copy()
    return np.array(path.read_text().split(), dtype=np.float64)


def cmd_create_task(eng: Engine, args, out) -> int:
    features = _read_vector(Path(args.features)) if args.features else None
    entry = eng.create_task(args.ddl, model_id=args.model, features=features, selector_name=args.selector)
    out.write(render_records([{"task": entry.spec.name, "model_id": entry.model_id,
                               "input": entry.spec.input_type, "type": entry.spec.task_type,
                               "selector": entry.selector or "-"}], args.format))
    return 0


def cmd_train_selector(eng: Engine, args, out) -> int:
    tm = read_transfer_csv(args.matrix)
    ex = PrecomputedExtractor(args.features)
    feats = [ex.features(str(t)) for t in tm.task_ids]
    sel = Selector.train(tm, feats, k=args.k or eng.config.default_k, seed=eng.config.seed,
                         max_iters=args.max_iters)
    eng.save_selector(args.name, sel)
    sp = sel.space
    out.write(render_records([{"selector": args.name, "k": sp.k, "iterations": sp.iterations,
                               "final_error": float(sp.final_error)}], args.format))
    return 0


def cmd_select_model(eng: Engine, args, out) -> int:
    mid = eng.select_model(args.task, rebind=args.rebind)
    out.write(render_records([{"task": args.task, "model_id": mid, "rebound": bool(args.rebind)}], args.format))
    return 0


def cmd_query(eng: Engine, args, out) -> int:
    pipeline = None if not args.sequential else False
    res = eng.query(args.sql, batch_size=args.batch_size, pipeline=pipeline, cache=not args.no_cache)
    if args.explain:
        from taskdb.planner.explain import explain_plan
        out.write(explain_plan(res.plan))
        out.write("\n")
    out.write(render_rows(res.rows, res.rows.names or res.plan.output_names, args.format))
    if args.metrics:
        out.write("\n")
        out.write(res.metrics.to_table() if args.format == "table" else res.metrics.to_kv())
    return 0


def cmd_explain(eng: Engine, args, out) -> int:
    out.write(eng.explain(args.sql, batch_size=args.batch_size))
    return 0


def cmd_list_models(eng: Engine, args, out) -> int:
    recs = eng.repo.list_models(StorageKind(args.kind) if args.kind else None)
    out.write(render_records([{"model_id": r.model_id, "name": r.name, "version": r.version,
                               "kind": r.storage_kind.value, "base": r.base_model or "-",
                               "bytes": eng.repo.disk_usage(r.model_id)} for r in recs], args.format))
    return 0


def cmd_bench(eng: Engine, args, out) -> int:
    from taskdb.bench import SUITES, run_suites

    names = list(SUITES) if args.suite == "all" else [args.suite]
    out_dir = Path(args.out) if args.out else eng.config.data_dir / "bench"
    for rep in run_suites(names, out_dir, seed=eng.config.seed):
        out.write(rep.to_text() if args.format == "table" else rep.to_csv())
        out.write("\n")
    out.write(f"reports written to {out_dir}\n")
    return 0


def cmd_seed_demo(eng: Engine, args, out) -> int:
    if eng.repo.list_models():
        raise UsageError(f"{eng.config.data_dir} already holds models; seed an empty data directory")
    fams = seed_demo(eng, n_reviews=args.reviews)
    out.write(render_records([{"family": f, "model_ids": " ".join(map(str, ids))} for f, ids in fams.items()],
                             args.format))
    return 0


def cmd_add_table(eng: Engine, args, out) -> int:
    table = load_table(args.csv)
    if args.name:
        table.name = args.name
    eng.add_table(table)
    out.write(render_records([{"table": table.name, "rows": table.row_count,
                               "columns": " ".join(table.column_names)}], args.format))
    return 0


# -- parser -------------------------------------------------------------------------

FORMATS = ("table", "csv", "jsonlike")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-dir", help="engine data directory (default: from config, else ./taskdb-data)")
    common.add_argument("--config", help="key=value config file; TASKDB_* environment variables override it")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--realtime", action="store_true", default=None,
                        help="sleep the simulated durations while executing")
    common.add_argument("--format", choices=FORMATS, default="table", help="output format")

    p = argparse.ArgumentParser(prog="taskdb", description="Task-centric in-database inference engine. "
                                "Common options (--data-dir, --config, --seed, --realtime, --format) "
                                "go after the command.")
    p.add_argument("--version", action="version", version=f"taskdb {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("import", parents=[common], help="register a model (blob, decoupled or api)")
    s.add_argument("--kind", required=True, choices=("blob", "decoupled", "api"))
    s.add_argument("--name", required=True)
    s.add_argument("--version", dest="version", default="1.0")
    s.add_argument("--file", help="blob payload file")
    s.add_argument("--base", help="base model name (created from --layers if new)")
    s.add_argument("--layers", help="file of concatenated Mvec frames: weight then bias per layer")
    s.add_argument("--endpoint", help="http(s) inference endpoint")
    s.add_argument("--expected-latency", type=float, default=0.0, help="seconds per row")
    s.add_argument("--auth-ref", help="environment variable holding the bearer token")
    s.add_argument("--quota", type=int, default=1000)
    s.add_argument("--timeout", type=float, default=5.0)
    s.add_argument("--max-retries", type=int, default=3)
    s.add_argument("--flops", type=float, help="model FLOPs per row")
    s.add_argument("--size", type=float, help="bytes moved to the device per batch")
    s.add_argument("--row-bytes", type=float, help="working-set bytes per row")
    s.set_defaults(fn=cmd_import)

    s = sub.add_parser("create-task", parents=[common], help="declare a task and bind it to a model")
    s.add_argument("ddl", help="CREATE TASK statement")
    s.add_argument("--model", type=int, help="bind to this model id, skipping selection")
    s.add_argument("--selector", help="trained selector name (default: chosen by input type)")
    s.add_argument("--features", help="task feature vector (.mvec or whitespace-separated .txt)")
    s.set_defaults(fn=cmd_create_task)

    s = sub.add_parser("train-selector", parents=[common], help="factorize a transfer matrix and fit projection")
    s.add_argument("--name", required=True)
    s.add_argument("--matrix", required=True, help="transfer matrix CSV (models x tasks)")
    s.add_argument("--features", required=True, help="directory with <task_id>.mvec or .txt feature files")
    s.add_argument("--k", type=int, help="latent dimension")
    s.add_argument("--max-iters", type=int, default=2000)
    s.set_defaults(fn=cmd_train_selector)

    s = sub.add_parser("select-model", parents=[common], help="rerun model selection for a task")
    s.add_argument("task")
    s.add_argument("--rebind", action="store_true", help="store the new binding")
    s.set_defaults(fn=cmd_select_model)

    s = sub.add_parser("query", parents=[common], help="run a SELECT query")
    s.add_argument("sql")
    s.add_argument("--batch-size", type=int, help="force every inference batch to this size")
    s.add_argument("--explain", action="store_true", help="print the plan report first")
    s.add_argument("--metrics", action="store_true", help="print the run report")
    s.add_argument("--sequential", action="store_true", help="run node by node instead of pipelined")
    s.add_argument("--no-cache", action="store_true", help="bypass the embedding cache")
    s.set_defaults(fn=cmd_query)

    s = sub.add_parser("explain", parents=[common], help="show the placed plan of a query")
    s.add_argument("sql")
    s.add_argument("--batch-size", type=int)
    s.set_defaults(fn=cmd_explain)

    s = sub.add_parser("bench", parents=[common], help="run benchmark sweeps")
    s.add_argument("--suite", choices=("all", "batch", "devices", "cache", "storage", "kernels"), default="all")
    s.add_argument("--out", help="directory for report files (default: <data-dir>/bench)")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("list-models", parents=[common], help="list catalog entries")
    s.add_argument("--kind", choices=[k.value for k in StorageKind])
    s.set_defaults(fn=cmd_list_models)

    s = sub.add_parser("seed-demo", parents=[common], help="fill an empty data directory with demo models and tables")
    s.add_argument("--reviews", type=int, default=100)
    s.set_defaults(fn=cmd_seed_demo)

    s = sub.add_parser("add-table", parents=[common], help="load a CSV table (with .mvec sidecars) into the engine")
    s.add_argument("csv")
    s.add_argument("--name", help="table name (default: file stem)")
    s.set_defaults(fn=cmd_add_table)
    return p


def make_config(args) -> EngineConfig:
    overrides = {"seed": args.seed, "realtime": args.realtime}
    if args.data_dir:
        overrides["data_dir"] = Path(args.data_dir)
    return EngineConfig.load(args.config, **overrides)


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        eng = Engine(make_config(args))
        return args.fn(eng, args, out)
    except UsageError as exc:
        err.write(f"usage error: {exc}\n")
        return 2
    except QuerySyntaxError as exc:
        err.write(f"syntax error: {exc.message} at line {exc.line}, column {exc.column}\n")
        return 1
    except (TaskDBError, ValueError, KeyError, OSError) as exc:
        err.write(f"error: {_chain(exc)}\n")
        return 1


def _chain(exc: BaseException) -> str:
    parts = [f"{type(exc).__name__}: {exc}"]
    seen = {id(exc)}
    cause = exc.__cause__
    while cause is not None and id(cause) not in seen:
        seen.add(id(cause))
        parts.append(f"caused by {type(cause).__name__}: {cause}")
        cause = cause.__cause__
    return "\n  ".join(parts)


if __name__ == "__main__":
    sys.exit(main())
