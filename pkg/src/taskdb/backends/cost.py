"""Analytic operator cost model and device selection.

Per operator: ``total = exec_time + trans_cost`` where

* exec time is ``model_flops / device.flops * nrows`` on CPU and GPU,
* GPU transfer is ``size / mem_bw + size / gpu_bw + latency``,
* CPU transfer is ``size / mem_bw``,
* a REMOTE device has no observable execution; its total is the end-to-end
  ``per_row_latency * nrows + latency``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

from taskdb.errors import NoDevices


class DeviceKind(str, enum.Enum):
    CPU = "CPU"
    GPU = "GPU"
    REMOTE = "REMOTE"


# preference order for exact cost ties: cheapest to provision first
_TIE_RANK = {DeviceKind.CPU: 0, DeviceKind.GPU: 1, DeviceKind.REMOTE: 2}


@dataclass(frozen=True)
class DeviceProfile:
    kind: DeviceKind
    flops: float = 1e11
    mem_bw: float = 2e10
    gpu_bw: float = 0.0
    latency: float = 0.0
    per_row_latency: float = 0.0
    # working-set size past which a batch stops fitting in fast memory
    cache_bytes: float = 32e6
    name: str = ""

    def __post_init__(self):
        kind = DeviceKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not self.name:
            object.__setattr__(self, "name", kind.value.lower())
        if self.flops <= 0 or self.mem_bw <= 0:
            raise ValueError(f"{self.name}: flops and mem_bw must be > 0")
        if kind is DeviceKind.GPU and self.gpu_bw <= 0:
            raise ValueError(f"{self.name}: a GPU needs gpu_bw > 0")
        if self.latency < 0 or self.per_row_latency < 0:
            raise ValueError(f"{self.name}: latencies must be >= 0")
        if self.cache_bytes <= 0:
            raise ValueError(f"{self.name}: cache_bytes must be > 0")


@dataclass(frozen=True)
class ModelProfile:
    model_flops: float
    model_size: float
    # bytes of input plus activations held per row while a batch runs
    row_bytes: float = 0.0

    def __post_init__(self):
        if self.model_flops < 0 or self.model_size < 0 or self.row_bytes < 0:
            raise ValueError("model profile fields must be >= 0")


@dataclass(frozen=True)
class CostEstimate:
    exec_time: float
    trans_cost: float
    total: float
    device: DeviceProfile
    nrows: int


CPU_DEFAULT = DeviceProfile(DeviceKind.CPU, flops=1e11, mem_bw=2e10, latency=0.0, cache_bytes=32e6)
GPU_DEFAULT = DeviceProfile(DeviceKind.GPU, flops=1e13, mem_bw=2e10, gpu_bw=1.2e10, latency=5e-3,
                            cache_bytes=16e6)


def default_devices(**overrides) -> list[DeviceProfile]:
    """Calibrated CPU and GPU profiles; ``cpu_flops=...`` style keys override fields."""
    cpu = {k[4:]: v for k, v in overrides.items() if k.startswith("cpu_")}
    gpu = {k[4:]: v for k, v in overrides.items() if k.startswith("gpu_")}
    return [replace(CPU_DEFAULT, **cpu), replace(GPU_DEFAULT, **gpu)]


def remote_device(per_row_latency: float, latency: float = 0.0, name: str = "remote") -> DeviceProfile:
    return DeviceProfile(DeviceKind.REMOTE, per_row_latency=per_row_latency, latency=latency, name=name)


def exec_time(m: ModelProfile, d: DeviceProfile, nrows: int) -> float:
    if nrows < 0:
        raise ValueError("nrows must be >= 0")
    if d.kind is DeviceKind.REMOTE:
        return 0.0
    return m.model_flops / d.flops * nrows


def trans_cost(m: ModelProfile, d: DeviceProfile) -> float:
    if d.kind is DeviceKind.GPU:
        return m.model_size / d.mem_bw + m.model_size / d.gpu_bw + d.latency
    if d.kind is DeviceKind.CPU:
        return m.model_size / d.mem_bw
    return d.latency


def total_cost(m: ModelProfile, d: DeviceProfile, nrows: int) -> CostEstimate:
    if d.kind is DeviceKind.REMOTE:
        if nrows < 0:
            raise ValueError("nrows must be >= 0")
        ex = d.per_row_latency * nrows
    else:
        ex = exec_time(m, d, nrows)
    tc = trans_cost(m, d)
    return CostEstimate(exec_time=ex, trans_cost=tc, total=ex + tc, device=d, nrows=nrows)


def batch_seconds(m: ModelProfile, d: DeviceProfile, nrows: int) -> float:
    """Simulated seconds for one batch of ``nrows`` rows.

    The model's transfer cost is paid once per batch. Once the batch's
    working set (``nrows * row_bytes``) outgrows the device's fast memory,
    per-row compute stretches in proportion.
    """
    if d.kind is DeviceKind.REMOTE:
        return total_cost(m, d, nrows).total
    pressure = max(1.0, nrows * m.row_bytes / d.cache_bytes)
    return trans_cost(m, d) + exec_time(m, d, nrows) * pressure


def choose_device(m: ModelProfile, devices: Sequence[DeviceProfile], nrows: int) -> DeviceProfile:
    """Device with the minimal total cost; exact ties prefer CPU, then GPU, then REMOTE."""
    if not devices:
        raise NoDevices("no devices to choose from")
    ranked = sorted(enumerate(devices),
                    key=lambda p: (total_cost(m, p[1], nrows).total, _TIE_RANK[p[1].kind], p[0]))
    return ranked[0][1]


def crossover_rows(m: ModelProfile, slow: DeviceProfile, fast: DeviceProfile) -> float | None:
    """Closed-form row count where ``fast`` (higher flops, dearer transfer) becomes cheaper.

    Returns None when no crossover exists.
    """
    a_slow = m.model_flops / slow.flops
    a_fast = m.model_flops / fast.flops
    t_slow = trans_cost(m, slow)
    t_fast = trans_cost(m, fast)
    if a_slow <= a_fast or t_fast <= t_slow:
        return None
    return (t_fast - t_slow) / (a_slow - a_fast)


def find_crossover(m: ModelProfile, slow: DeviceProfile, fast: DeviceProfile, hi: int = 1 << 62) -> int | None:
    """Smallest integer ``nrows`` at which ``fast`` strictly beats ``slow``, by bisection."""

    def fast_wins(n: int) -> bool:
        return total_cost(m, fast, n).total < total_cost(m, slow, n).total

    if not fast_wins(hi):
        return None
    if fast_wins(0):
        return 0
    lo = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fast_wins(mid):
            hi = mid
        else:
            lo = mid
    return hi
