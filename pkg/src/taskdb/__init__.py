"""taskdb: task-centric inference inside a small relational engine.

Modules: ``tensor`` (Mvec), ``model_repo`` (catalog), ``selection``
(transferability-based model choice), ``backends`` (cost model, devices,
stub and remote models), ``planner`` (query language, DAG, scheduling,
placement), ``executor`` (operators, batching, cache, pipelines) and ``cli``.
"""

__version__ = "0.1.0"

from taskdb.tensor import Mvec, mvec_deserialize, mvec_serialize  # noqa: E402

__all__ = ["Mvec", "__version__", "mvec_deserialize", "mvec_serialize"]
