import asyncio
import os
from typing import Awaitable, Callable, List, TypeVar

from utils.logger import Logger

T = TypeVar("T")


class WorkerPool:
    """
    Run async task factories with bounded concurrency.

    Simulation paths are CPU-bound, so callers wrap them with ``asyncio.to_thread``
    (see ``WorkerPool.run_blocking``); the semaphore caps how many run at once.
    Results come back in submission order, which keeps reductions by path index
    deterministic.

    Example:
        >>> pool = WorkerPool(max_workers=4)
        >>> results = await pool.run_blocking([partial(simulate_path, ctx, i) for i in range(8)])
    """

    def __init__(self, max_workers: int = 0):
        """
        Args:
            max_workers: Maximum number of concurrent workers. If 0 or negative,
                         defaults to the number of CPU cores available.
        """
        if max_workers <= 0:
            max_workers = os.cpu_count() or 1

        self.max_workers = max_workers
        self._semaphore = asyncio.Semaphore(max_workers)

        Logger.debug(f"Worker pool initialized with {max_workers} max workers")

    async def _run_with_semaphore(self, task: Callable[[], Awaitable[T]]) -> T:
        async with self._semaphore:
            return await task()

    async def run(self, tasks: List[Callable[[], Awaitable[T]]]) -> List[T | Exception]:
        """
        Run async task factories; exceptions are captured and returned in place.

        Args:
            tasks: Async callables to execute

        Returns:
            Results or exceptions, in the same order as the input tasks
        """
        Logger.debug(f"Running {len(tasks)} tasks with {self.max_workers} max workers")

        wrapped_tasks = [self._run_with_semaphore(task) for task in tasks]
        results = await asyncio.gather(*wrapped_tasks, return_exceptions=True)

        failed = sum(isinstance(result, Exception) for result in results)
        Logger.debug(f"All {len(tasks)} tasks completed", {"failed": failed})

        return results

    async def run_blocking(self, functions: List[Callable[[], T]]) -> List[T | Exception]:
        """Run plain callables in worker threads under the same concurrency limit."""

        def as_task(function: Callable[[], T]) -> Callable[[], Awaitable[T]]:
            return lambda: asyncio.to_thread(function)

        return await self.run([as_task(function) for function in functions])
