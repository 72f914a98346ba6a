"""Task declarations and their model bindings."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from taskdb.errors import DuplicateTask, SelectionUnavailable, UnknownTask

INPUT_TYPES = ("Text", "Image", "Series", "Tensor")
TASK_TYPES = ("Classification", "Regression")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    input_type: str
    output_labels: tuple | None = None   # None: numeric output
    task_type: str = "Classification"

    def __post_init__(self):
        object.__setattr__(self, "name", self.name.lower())
        if self.input_type not in INPUT_TYPES:
            raise ValueError(f"input_type must be one of {INPUT_TYPES}, got {self.input_type!r}")
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"task_type must be one of {TASK_TYPES}, got {self.task_type!r}")
        if self.output_labels is not None:
            object.__setattr__(self, "output_labels", tuple(self.output_labels))
        if self.task_type == "Classification" and not self.output_labels:
            raise ValueError(f"classification task {self.name!r} needs output labels")

    @classmethod
    def from_ddl(cls, stmt) -> "TaskSpec":
        return cls(stmt.name, stmt.input_type, stmt.output_labels, stmt.task_type)


@dataclass(frozen=True)
class TaskEntry:
    spec: TaskSpec
    model_id: int
    features: tuple | None = None   # kept so the task can be re-selected later
    selector: str | None = None

    def to_json(self) -> dict:
        return {"name": self.spec.name, "input_type": self.spec.input_type,
                "output_labels": None if self.spec.output_labels is None else list(self.spec.output_labels),
                "task_type": self.spec.task_type, "model_id": self.model_id,
                "features": None if self.features is None else list(self.features),
                "selector": self.selector}

    @classmethod
    def from_json(cls, j: dict) -> "TaskEntry":
        labels = j.get("output_labels")
        spec = TaskSpec(j["name"], j["input_type"], None if labels is None else tuple(labels), j["task_type"])
        feats = j.get("features")
        return cls(spec, j["model_id"], None if feats is None else tuple(feats), j.get("selector"))


class TaskRegistry:
    """Task name -> bound model. Persisted as JSON lines when given a path."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, TaskEntry] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    entry = TaskEntry.from_json(rec)
                    self._entries[entry.spec.name] = entry

    def _persist(self, entry: TaskEntry) -> None:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")

    def __contains__(self, name: str) -> bool:
        return name.lower() in self._entries

    def get(self, name: str) -> TaskEntry:
        try:
            return self._entries[name.lower()]
        except KeyError:
            raise UnknownTask(f"unknown task {name!r}") from None

    def names(self) -> list[str]:
        return sorted(self._entries)

    def add(self, entry: TaskEntry) -> TaskEntry:
        with self._lock:
            if entry.spec.name in self._entries:
                raise DuplicateTask(f"task {entry.spec.name!r} already exists")
            self._entries[entry.spec.name] = entry
            self._persist(entry)
            return entry

    def rebind(self, name: str, model_id: int) -> TaskEntry:
        with self._lock:
            entry = replace(self.get(name), model_id=model_id)
            self._entries[entry.spec.name] = entry
            self._persist(entry)   # later lines win on reload
            return entry


def register_task(registry: TaskRegistry, spec: TaskSpec, selector=None, features: Sequence[float] | None = None,
                  model_id: int | None = None, selector_name: str | None = None) -> TaskEntry:
    """Bind ``spec`` to ``model_id`` or, when none is given, to the selector's argmax model."""
    if spec.name in registry:
        raise DuplicateTask(f"task {spec.name!r} already exists")
    feats = None if features is None else tuple(float(x) for x in np.asarray(features, dtype=np.float64).ravel())
    if model_id is None:
        if selector is None:
            raise SelectionUnavailable(f"no trained selector to choose a model for task {spec.name!r}")
        if feats is None:
            raise SelectionUnavailable(f"task {spec.name!r} needs features for model selection")
        model_id = selector.select(np.asarray(feats))
    return registry.add(TaskEntry(spec, int(model_id), feats, selector_name))


def reselect(registry: TaskRegistry, name: str, selector, rebind: bool = False) -> int:
    """Run selection again for an existing task; optionally store the new binding."""
    entry = registry.get(name)
    if selector is None:
        raise SelectionUnavailable("no trained selector")
    if entry.features is None:
        raise SelectionUnavailable(f"task {name!r} was bound without features; nothing to select on")
    model_id = int(selector.select(np.asarray(entry.features)))
    if rebind and model_id != entry.model_id:
        registry.rebind(name, model_id)
    return model_id
