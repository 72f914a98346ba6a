"""Persistence for transfer matrices, embedding spaces and trained selectors."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from taskdb.errors import SelectionUnavailable
from taskdb.selection.nmf import EmbeddingSpace, TransferMatrix, factorize
from taskdb.selection.regress import TaskFeatures, fit_regressor, project_task
from taskdb.selection.scoring import select_model, transfer_scores
from taskdb.tensor import Mvec, mvec_deserialize, mvec_serialize


def _parse_id(text: str):
    text = text.strip()
    return int(text) if text.lstrip("-").isdigit() else text


def read_transfer_csv(path: str | os.PathLike) -> TransferMatrix:
    """Header row holds task ids (first cell ignored); first column holds model ids."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise ValueError(f"{path}: transfer matrix needs a header and at least one model row")
    task_ids = [_parse_id(c) for c in rows[0][1:]]
    model_ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(task_ids) + 1:
            raise ValueError(f"{path}:{lineno}: expected {len(task_ids) + 1} cells, got {len(row)}")
        model_ids.append(_parse_id(row[0]))
        values.append([float(c) for c in row[1:]])
    return TransferMatrix.of(values, model_ids, task_ids)


def write_transfer_csv(tm: TransferMatrix, path: str | os.PathLike) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model_id", *tm.task_ids])
    for mid, row in zip(tm.model_ids, tm.values):
        w.writerow([mid, *(repr(float(v)) for v in row)])
    Path(path).write_text(buf.getvalue())


def save_space(space: EmbeddingSpace, root: str | os.PathLike) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "W.mvec").write_bytes(mvec_serialize(Mvec.from_array(space.W)))
    (root / "H.mvec").write_bytes(mvec_serialize(Mvec.from_array(space.H)))
    meta = {
        "k": space.k,
        "seed": space.seed,
        "final_error": space.final_error,
        "iterations": space.iterations,
        "total_sweeps": space.total_sweeps,
        "model_ids": list(space.model_ids),
        "task_ids": list(space.task_ids),
    }
    (root / "space.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_space(root: str | os.PathLike) -> EmbeddingSpace:
    root = Path(root)
    meta = json.loads((root / "space.json").read_text())
    W = mvec_deserialize((root / "W.mvec").read_bytes()).to_array()
    H = mvec_deserialize((root / "H.mvec").read_bytes()).to_array()
    return EmbeddingSpace(W=W, H=H, k=meta["k"], final_error=meta["final_error"],
                          iterations=meta["iterations"], seed=meta["seed"],
                          total_sweeps=meta.get("total_sweeps", meta["iterations"]),
                          model_ids=tuple(meta["model_ids"]), task_ids=tuple(meta["task_ids"]))


@dataclass
class Selector:
    """A trained embedding space plus the regressor that projects new tasks into it."""

    space: EmbeddingSpace
    features: np.ndarray
    regressor_kind: str = "knn"
    extractor_id: str = "precomputed"

    def __post_init__(self):
        self.regressor = fit_regressor(list(self.features), self.space.H, kind=self.regressor_kind)

    @classmethod
    def train(cls, tm: TransferMatrix, features: Sequence[TaskFeatures] | np.ndarray, k: int | None = None,
              seed: int = 0, max_iters: int = 2000, tol: float = 1e-10, regressor_kind: str = "knn",
              extractor_id: str | None = None) -> "Selector":
        space = factorize(tm, k=k, max_iters=max_iters, tol=tol, seed=seed)
        if extractor_id is None:
            extractor_id = next((f.extractor_id for f in features if isinstance(f, TaskFeatures)), "precomputed")
        X = np.vstack([f.vector if isinstance(f, TaskFeatures) else np.asarray(f, dtype=np.float64)
                       for f in features])
        return cls(space, X, regressor_kind, extractor_id)

    def scores(self, features) -> np.ndarray:
        return transfer_scores(self.space.W, project_task(self.regressor, features))

    def select(self, features):
        return select_model(self.scores(features).tolist(), self.space.model_ids)

    def save(self, root: str | os.PathLike) -> None:
        root = Path(root)
        save_space(self.space, root)
        (root / "features.mvec").write_bytes(mvec_serialize(Mvec.from_array(self.features)))
        (root / "selector.json").write_text(json.dumps(
            {"regressor": self.regressor_kind, "extractor_id": self.extractor_id}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root: str | os.PathLike) -> "Selector":
        root = Path(root)
        if not (root / "selector.json").exists():
            raise SelectionUnavailable(f"no trained selector under {root}")
        meta = json.loads((root / "selector.json").read_text())
        X = mvec_deserialize((root / "features.mvec").read_bytes()).to_array()
        return cls(load_space(root), X, meta["regressor"], meta["extractor_id"])
