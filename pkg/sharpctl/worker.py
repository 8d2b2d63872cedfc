"""
Worker processes that execute sweep runs in parallel.
"""

import multiprocessing
import os
from dataclasses import dataclass
from typing import Any, List, Sequence, Tuple

from sharpctl.config import Config
from sharpctl.errors import SharpctlError
from sharpctl.utils import get_logger

logger = get_logger(__name__)

Task = Tuple[Config, int, str]


@dataclass(frozen=True)
class TaskFailure:
    """A run that raised instead of returning a record; re-raised by the collector."""

    run_label: str
    exit_code: int
    message: str


def _run_task(task: Task) -> Any:
    """
    Entry point for one run inside a worker process.

    Args:
        task: (point config, seed, sweep value).
    """
    # imported here so the spawned interpreter loads torch lazily
    from sharpctl.harness import ExperimentConfig, train_to_threshold

    config, seed, value = task
    label = f"value={value} seed={seed}"
    try:
        cfg = ExperimentConfig.from_config(config)
        return train_to_threshold(cfg, seed, sweep_value=value)
    except SharpctlError as e:
        logger.error(f"Run {label} failed in PID {os.getpid()}: {e}")
        return TaskFailure(label, e.exit_code, str(e))


def _raise_failures(results: Sequence[Any]) -> None:
    for result in results:
        if isinstance(result, TaskFailure):
            error = SharpctlError(f"run {result.run_label} failed: {result.message}")
            error.exit_code = result.exit_code
            raise error


def run_tasks(tasks: Sequence[Task], workers: int = 1) -> List[Any]:
    """
    Run every task and return the RunRecords in task order.

    With ``workers`` > 1 the tasks are spread over a spawn-context process
    pool; completion order never affects the returned order.
    """
    workers = max(1, min(int(workers), len(tasks))) if tasks else 1
    if workers == 1:
        results = []
        for i, task in enumerate(tasks, start=1):
            logger.info(f"Sweep run {i}/{len(tasks)} (value={task[2]}, seed={task[1]}).")
            results.append(_run_task(task))
    else:
        logger.info(f"Starting {workers} worker processes for {len(tasks)} runs.")
        context = multiprocessing.get_context("spawn")
        with context.Pool(processes=workers) as pool:
            results = pool.map(_run_task, tasks, chunksize=1)
        logger.info("All worker processes finished.")
    _raise_failures(results)
    return results
