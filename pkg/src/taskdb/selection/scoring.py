from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from taskdb.errors import DimensionMismatch, EmptyScoreList, UnknownTask
from taskdb.selection.nmf import TransferMatrix
from taskdb.selection.regress import TaskEmbedding


def transfer_scores(W: np.ndarray, t) -> np.ndarray:
    """Estimated transfer score of every model: ``W[i] . t``."""
    vec = t.vector if isinstance(t, TaskEmbedding) else np.asarray(t, dtype=np.float64).reshape(-1)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != vec.size:
        raise DimensionMismatch(f"embedding width {vec.size} does not match model embeddings {W.shape}")
    return W @ vec


def _id_key(model_id):
    # numeric ids order numerically, everything else by string
    return (0, model_id, "") if isinstance(model_id, (int, np.integer)) else (1, 0, str(model_id))


def select_model(scores: Sequence[float], model_ids: Sequence):
    """Return the id with the highest score; ties go to the lowest id."""
    scores = list(scores)
    if not scores:
        raise EmptyScoreList("no scores to select from")
    if len(scores) != len(model_ids):
        raise DimensionMismatch(f"{len(scores)} scores for {len(model_ids)} models")
    best = max(scores)
    tied = [mid for s, mid in zip(scores, model_ids) if s == best]
    return min(tied, key=_id_key)


@dataclass
class RegretReport:
    per_task: dict = field(default_factory=dict)
    mean_regret: float | None = None
    max_regret: float | None = None
    agreement: float | None = None

    @property
    def count(self) -> int:
        return len(self.per_task)


def evaluate_selection(holdout: TransferMatrix, predicted: Mapping) -> RegretReport:
    """Regret of predicted choices against the true best model per holdout task.

    ``predicted`` maps task id -> chosen model id. Regret is the best true score
    in the task's column minus the true score of the chosen model.
    """
    report = RegretReport()
    if not predicted:
        return report
    agree = 0
    for task_id, model_id in predicted.items():
        if task_id not in holdout.task_ids:
            raise UnknownTask(f"task {task_id!r} is not in the holdout matrix")
        col = holdout.column(task_id)
        chosen = col[holdout.model_ids.index(model_id)]
        best = float(col.max())
        report.per_task[task_id] = best - float(chosen)
        oracle = select_model(col.tolist(), holdout.model_ids)
        agree += int(oracle == model_id)
    regrets = list(report.per_task.values())
    report.mean_regret = float(np.mean(regrets))
    report.max_regret = float(np.max(regrets))
    report.agreement = agree / len(regrets)
    return report
