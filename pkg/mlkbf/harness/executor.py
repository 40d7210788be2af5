"""Worker pool for independent repetitions."""

import math
import os
from typing import Any, Callable, Iterable, Optional, Sequence

import structlog
from joblib import Parallel, delayed

from ..utils.logging import active_level, configure_logging

logger = structlog.get_logger(__name__)

THREADS_ENV = "MLKBF_THREADS"


def available_parallelism() -> int:
    if hasattr(os, "sched_getaffinity"):
        return max(1, len(os.sched_getaffinity(0)))
    return max(1, os.cpu_count() or 1)


def worker_count(n_jobs: Optional[int] = None) -> int:
    """Explicit count, else MLKBF_THREADS, else available parallelism."""
    if n_jobs is not None:
        return max(1, int(n_jobs))
    value = os.getenv(THREADS_ENV)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got '{value}'")
    return available_parallelism()


class _WorkerTask:
    """Configures logging inside the worker process before running the task."""

    def __init__(self, fn: Callable[..., Any], log_level: str):
        self.fn = fn
        self.log_level = log_level

    def __call__(self, item: Any) -> Any:
        configure_logging(self.log_level)
        return self.fn(item)


class RepetitionExecutor:
    """Fans independent tasks out over joblib workers; results come back in submission order."""

    def __init__(self, n_jobs: Optional[int] = None):
        self.n_jobs = worker_count(n_jobs)

    def map(self, fn: Callable[..., Any], items: Iterable[Any]) -> list[Any]:
        items = list(items)
        if self.n_jobs == 1 or len(items) <= 1:
            return [fn(item) for item in items]
        logger.debug("executor_map", tasks=len(items), n_jobs=self.n_jobs)
        task = _WorkerTask(fn, active_level())
        return Parallel(n_jobs=min(self.n_jobs, len(items)))(delayed(task)(item) for item in items)


def fsum_mean(values: Sequence[float]) -> float:
    """Exactly rounded mean, independent of the order of ``values``."""
    return math.fsum(values) / len(values)


def mean_squared_error(values: Sequence[float], target: float) -> float:
    return fsum_mean([(v - target) ** 2 for v in values])
