"""Cardinality estimates, device placement and batch-size choice."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

from taskdb.backends.cost import (
    CPU_DEFAULT,
    DeviceKind,
    DeviceProfile,
    ModelProfile,
    batch_seconds,
    choose_device,
    remote_device,
    total_cost,
)
from taskdb.errors import MissingProfile, NoDevices, NoFeasibleBatch
from taskdb.planner.dag import PlanDag
from taskdb.planner.schedule import discover_dependencies

DEFAULT_CANDIDATES = (1, 4, 8, 16, 32, 64, 128)
FILTER_SELECTIVITY = 0.5
GROUP_REDUCTION = 10
DEFAULT_MEM_BUDGET = 2e9


def estimate_cardinalities(g: PlanDag, row_counts: Mapping[str, int],
                           selectivity: float = FILTER_SELECTIVITY) -> dict:
    """Estimated output rows per node: exact for scans, fixed selectivity for filters."""
    est: dict = {}
    for v in discover_dependencies(g).order:
        n = g.nodes[v]
        ins = [est[u] for u in n.inputs]
        if n.kind == "SCAN":
            rows = int(row_counts[n.params["table"]])
        elif n.kind == "FILTER":
            rows = math.ceil(ins[0] * selectivity)
        elif n.kind == "JOIN":
            rows = max(ins) if n.params.get("keys") else ins[0] * ins[1]
        elif n.kind == "GROUPBY":
            rows = math.ceil(ins[0] / GROUP_REDUCTION)
        elif n.kind == "AGGREGATE":
            rows = 1
        elif n.kind == "OUTPUT":
            rows = ins[0] if n.params.get("limit") is None else min(ins[0], n.params["limit"])
        else:
            rows = ins[0] if ins else 0
        est[v] = rows
        n.est_rows = rows
    return est


def batch_objective(profile: ModelProfile, device: DeviceProfile, nrows: int, B: int) -> float:
    """Simulated seconds to run ``nrows`` rows in batches of ``B``.

    Every batch, including a short final one, is charged as a full batch of
    ``B``: transfer once plus per-row compute stretched by memory pressure.
    """
    return math.ceil(nrows / B) * batch_seconds(profile, device, B)


def choose_batch_size(profile: ModelProfile, device: DeviceProfile, nrows: int,
                      mem_budget: float = DEFAULT_MEM_BUDGET,
                      candidates: Sequence[int] = DEFAULT_CANDIDATES) -> int:
    """Feasible candidate with the lowest objective; ties go to the smaller batch."""
    if not candidates:
        raise NoFeasibleBatch("no batch-size candidates")
    feasible = sorted(B for B in set(candidates) if B >= 1 and B * profile.row_bytes <= mem_budget)
    if not feasible:
        raise NoFeasibleBatch(f"no candidate batch fits in {mem_budget:g} bytes "
                              f"({profile.row_bytes:g} bytes per row)")
    n = max(int(nrows), 1)
    return min(feasible, key=lambda B: (batch_objective(profile, device, n, B), B))


def place_operators(g: PlanDag, devices: Sequence[DeviceProfile], profiles: Mapping[int, ModelProfile],
                    cardinalities: Mapping[int, int], remote_models: Mapping[int, DeviceProfile] | None = None,
                    mem_budget: float = DEFAULT_MEM_BUDGET, candidates: Sequence[int] = DEFAULT_CANDIDATES,
                    batch_override: int | None = None) -> PlanDag:
    """Assign devices (and batch sizes) in place.

    PREDICT nodes go to the cheapest local device for their estimated input
    rows; API-backed models can only run on a REMOTE device. Relational
    nodes stay on the CPU.
    """
    if not devices:
        raise NoDevices("no devices configured")
    remote_models = remote_models or {}
    local = [d for d in devices if d.kind is not DeviceKind.REMOTE]
    remotes = [d for d in devices if d.kind is DeviceKind.REMOTE]
    cpu = next((d for d in devices if d.kind is DeviceKind.CPU), CPU_DEFAULT)
    for nid, n in sorted(g.nodes.items()):
        if n.kind != "PREDICT":
            n.assigned_device = cpu
            continue
        mid = n.params["model_id"]
        if mid not in profiles:
            raise MissingProfile(f"node {nid}: model {mid} has no cost profile")
        profile = profiles[mid]
        rows = cardinalities[n.inputs[0]]
        if mid in remote_models:
            options = remotes or [remote_models[mid]]
        else:
            options = local
            if not options:
                raise NoDevices(f"node {nid}: no CPU or GPU device for local model {mid}")
        d = choose_device(profile, options, rows)
        n.assigned_device = d
        if n.params.get("window") is not None:
            n.batch_size = n.params["window"]
        elif batch_override is not None:
            n.batch_size = batch_override
        else:
            n.batch_size = choose_batch_size(profile, d, rows, mem_budget, candidates)
        n.cost = total_cost(profile, d, rows)
    return g


def api_device(expected_latency: float) -> DeviceProfile:
    return remote_device(per_row_latency=expected_latency)
