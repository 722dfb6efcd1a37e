"""Parallel variant execution with dependency resolution."""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Coroutine

from rich.console import Console

from stwave.state import FINISHED, RunStore, TaskStatus

console = Console()
logger = logging.getLogger(__name__)


@dataclass
class TaskResult:
    task_id: str
    success: bool
    output: str = ""
    error: str | None = None
    payload: dict[str, Any] = field(default_factory=dict)


Executor = Callable[[dict], Coroutine[Any, Any, TaskResult]]


class TaskQueue:
    """Executes tasks in parallel respecting dependencies and concurrency limits.

    A task whose dependency failed is marked skipped instead of waiting forever.
    """

    def __init__(self, state: RunStore, max_parallel: int = 1):
        if max_parallel < 1:
            raise ValueError(f"max_parallel must be at least 1, got {max_parallel}")
        self.state = state
        self.max_parallel = max_parallel
        self._results: dict[str, TaskResult] = {}

    async def execute_all(self, run_id: str, executor: Executor) -> list[TaskResult]:
        running: set[asyncio.Task] = set()

        while True:
            await self._skip_blocked(run_id)

            pending = await self.state.get_pending_tasks(run_id)
            launched = 0
            for task in pending:
                if len(running) >= self.max_parallel:
                    break
                await self.state.update_task_status(task["id"], TaskStatus.QUEUED)
                running.add(asyncio.create_task(self._run_single(task, executor)))
                launched += 1

            if launched:
                all_tasks = await self.state.list_tasks(run_id)
                done_count = sum(1 for t in all_tasks if t["status"] in FINISHED)
                console.print(
                    f"  [dim]Progress: {done_count}/{len(all_tasks)} done, "
                    f"{len(running)} running, {len(pending) - launched} waiting[/]"
                )

            if running:
                _, running = await asyncio.wait(running, return_when=asyncio.FIRST_COMPLETED)
            else:
                leftover = [
                    t for t in await self.state.list_tasks(run_id)
                    if t["status"] == TaskStatus.PENDING.value
                ]
                if leftover:
                    ids = [t["id"] for t in leftover]
                    raise RuntimeError(f"Unsatisfiable task dependencies for run {run_id}: {ids}")
                break

        return list(self._results.values())

    async def _skip_blocked(self, run_id: str) -> None:
        """Skip tasks downstream of a failure, following chains of dependents."""
        while blocked := await self.state.get_blocked_tasks(run_id):
            for task in blocked:
                await self.state.update_task_status(
                    task["id"], TaskStatus.SKIPPED, result="dependency failed"
                )
                self._results[task["id"]] = TaskResult(
                    task_id=task["id"], success=False, error="dependency failed"
                )
                console.print(f"  [yellow]-[/] Skipped: {task['title']}")

    async def _run_single(self, task: dict, executor: Executor) -> None:
        task_id = task["id"]
        await self.state.update_task_status(task_id, TaskStatus.RUNNING)
        console.print(f"  [bold blue]▶[/] Running: {task['title']}")

        try:
            result = await executor(task)
        except Exception as e:
            logger.exception("Task %s raised", task_id)
            result = TaskResult(task_id=task_id, success=False, error=f"{type(e).__name__}: {e}")

        self._results[task_id] = result
        if result.success:
            await self.state.update_task_status(task_id, TaskStatus.COMPLETED, result=result.output)
            console.print(f"  [bold green]✓[/] Completed: {task['title']}")
        else:
            await self.state.update_task_status(task_id, TaskStatus.FAILED, result=result.error)
            console.print(f"  [bold red]✗[/] Failed: {task['title']}: {result.error}")
