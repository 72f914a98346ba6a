"""Cost model, simulated devices, stub models, remote client and the synthetic zoo."""

from taskdb.backends.cost import (
    CPU_DEFAULT,
    GPU_DEFAULT,
    CostEstimate,
    DeviceKind,
    DeviceProfile,
    ModelProfile,
    choose_device,
    crossover_rows,
    default_devices,
    exec_time,
    find_crossover,
    remote_device,
    total_cost,
    trans_cost,
)
from taskdb.backends.remote import MockRemoteServer, RemoteClient, decode_envelope, encode_envelope, remote_invoke
from taskdb.backends.stub import StubModel, run_batch, run_stacked

__all__ = [
    "CPU_DEFAULT",
    "GPU_DEFAULT",
    "CostEstimate",
    "DeviceKind",
    "DeviceProfile",
    "MockRemoteServer",
    "ModelProfile",
    "RemoteClient",
    "StubModel",
    "choose_device",
    "crossover_rows",
    "decode_envelope",
    "default_devices",
    "encode_envelope",
    "exec_time",
    "find_crossover",
    "remote_device",
    "remote_invoke",
    "run_batch",
    "run_stacked",
    "total_cost",
    "trans_cost",
]
