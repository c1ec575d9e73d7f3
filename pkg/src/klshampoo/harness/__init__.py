"""Deterministic desk-scale experiments: synthetic tasks, sweeps and oracle checks."""

from .claims import run_claims
from .runner import RunRecord, compare, run_grid, run_task, train
from .tasks import TaskKind, TaskSpec

__all__ = ["RunRecord", "TaskKind", "TaskSpec", "compare", "run_claims", "run_grid", "run_task", "train"]
