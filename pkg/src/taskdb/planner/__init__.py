"""Query language, operator DAGs, scheduling, placement and task registration."""

from taskdb.planner.dag import (
    CONTROL,
    DATA,
    LogicalPlan,
    OperatorNode,
    PlanContext,
    PlanDag,
    TaskBinding,
    build_dag,
    parse_query,
)
from taskdb.planner.explain import explain_plan
from taskdb.planner.placement import (
    DEFAULT_CANDIDATES,
    batch_objective,
    choose_batch_size,
    estimate_cardinalities,
    place_operators,
)
from taskdb.planner.schedule import Schedule, discover_dependencies
from taskdb.planner.tasks import TaskEntry, TaskRegistry, TaskSpec, register_task, reselect

__all__ = [
    "CONTROL",
    "DATA",
    "DEFAULT_CANDIDATES",
    "LogicalPlan",
    "OperatorNode",
    "PlanContext",
    "PlanDag",
    "Schedule",
    "TaskBinding",
    "TaskEntry",
    "TaskRegistry",
    "TaskSpec",
    "batch_objective",
    "build_dag",
    "choose_batch_size",
    "discover_dependencies",
    "estimate_cardinalities",
    "explain_plan",
    "parse_query",
    "place_operators",
    "register_task",
    "reselect",
]
