"""SQLite-backed run history: runs, ablation tasks, epoch curves and reports."""

from __future__ import annotations

import json
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import aiosqlite

_SCHEMA = """
CREATE TABLE IF NOT EXISTS runs (
    id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    kind TEXT NOT NULL DEFAULT 'train',
    status TEXT NOT NULL DEFAULT 'pending',
    config_hash TEXT,
    output_dir TEXT,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL,
    config_snapshot TEXT
);

CREATE TABLE IF NOT EXISTS tasks (
    id TEXT PRIMARY KEY,
    run_id TEXT NOT NULL REFERENCES runs(id),
    variant TEXT,
    title TEXT NOT NULL,
    status TEXT NOT NULL DEFAULT 'pending',
    priority INTEGER NOT NULL DEFAULT 0,
    dependencies TEXT NOT NULL DEFAULT '[]',
    result TEXT,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS epochs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    run_id TEXT NOT NULL REFERENCES runs(id),
    label TEXT NOT NULL DEFAULT '',
    epoch INTEGER NOT NULL,
    train_loss REAL NOT NULL,
    val_mae REAL NOT NULL,
    lr REAL NOT NULL,
    created_at TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS reports (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    run_id TEXT NOT NULL REFERENCES runs(id),
    split TEXT NOT NULL,
    label TEXT NOT NULL,
    mae REAL NOT NULL,
    rmse REAL NOT NULL,
    mape REAL NOT NULL,
    n_samples INTEGER NOT NULL,
    config_hash TEXT,
    created_at TEXT NOT NULL
);

CREATE INDEX IF NOT EXISTS idx_tasks_run_id ON tasks(run_id);
CREATE INDEX IF NOT EXISTS idx_tasks_status ON tasks(status);
CREATE INDEX IF NOT EXISTS idx_epochs_run_id ON epochs(run_id);
CREATE INDEX IF NOT EXISTS idx_reports_run_id ON reports(run_id);
"""


class RunStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class TaskStatus(str, Enum):
    PENDING = "pending"
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    SKIPPED = "skipped"


FINISHED = {TaskStatus.COMPLETED.value, TaskStatus.FAILED.value, TaskStatus.SKIPPED.value}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _task_row(row) -> dict:
    d = dict(row)
    d["dependencies"] = json.loads(d["dependencies"])
    return d


class RunStore:
    """Async SQLite store for training runs and ablation sweeps."""

    def __init__(self, db_path: str | Path = "stwave.db"):
        self.db_path = str(db_path)
        self._db: aiosqlite.Connection | None = None

    async def initialize(self) -> None:
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self._db = await aiosqlite.connect(self.db_path)
        self._db.row_factory = aiosqlite.Row
        await self._db.executescript(_SCHEMA)
        await self._db.commit()

    async def close(self) -> None:
        if self._db:
            await self._db.close()
            self._db = None

    async def __aenter__(self) -> "RunStore":
        await self.initialize()
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()

    @property
    def db(self) -> aiosqlite.Connection:
        if self._db is None:
            raise RuntimeError("RunStore not initialized. Call initialize() first.")
        return self._db

    # ── Runs ──────────────────────────────────────────────────────────

    async def create_run(
        self,
        run_id: str,
        name: str,
        kind: str = "train",
        config_hash: str | None = None,
        output_dir: str | None = None,
        config_snapshot: dict | None = None,
    ) -> dict:
        now = _now()
        config_json = json.dumps(config_snapshot) if config_snapshot else None
        await self.db.execute(
            "INSERT INTO runs (id, name, kind, status, config_hash, output_dir, created_at, "
            "updated_at, config_snapshot) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
            (run_id, name, kind, RunStatus.PENDING.value, config_hash, output_dir,
             now, now, config_json),
        )
        await self.db.commit()
        return {
            "id": run_id,
            "name": name,
            "kind": kind,
            "status": RunStatus.PENDING.value,
            "created_at": now,
        }

    async def update_run_status(self, run_id: str, status: RunStatus) -> None:
        await self.db.execute(
            "UPDATE runs SET status = ?, updated_at = ? WHERE id = ?",
            (status.value, _now(), run_id),
        )
        await self.db.commit()

    async def get_run(self, run_id: str) -> dict | None:
        async with self.db.execute("SELECT * FROM runs WHERE id = ?", (run_id,)) as cursor:
            row = await cursor.fetchone()
            if not row:
                return None
            d = dict(row)
            if d.get("config_snapshot"):
                d["config_snapshot"] = json.loads(d["config_snapshot"])
            return d

    async def list_runs(self, kind: str | None = None, limit: int = 20) -> list[dict]:
        if kind:
            query = "SELECT * FROM runs WHERE kind = ? ORDER BY created_at DESC LIMIT ?"
            params = (kind, limit)
        else:
            query = "SELECT * FROM runs ORDER BY created_at DESC LIMIT ?"
            params = (limit,)
        async with self.db.execute(query, params) as cursor:
            rows = await cursor.fetchall()
            return [dict(r) for r in rows]

    # ── Tasks ─────────────────────────────────────────────────────────

    async def create_task(
        self,
        task_id: str,
        run_id: str,
        title: str,
        variant: str | None = None,
        priority: int = 0,
        dependencies: list[str] | None = None,
    ) -> dict:
        now = _now()
        await self.db.execute(
            "INSERT INTO tasks (id, run_id, variant, title, status, priority, dependencies, "
            "created_at, updated_at) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
            (task_id, run_id, variant, title, TaskStatus.PENDING.value, priority,
             json.dumps(dependencies or []), now, now),
        )
        await self.db.commit()
        return {"id": task_id, "run_id": run_id, "title": title, "status": TaskStatus.PENDING.value}

    async def update_task_status(
        self, task_id: str, status: TaskStatus, result: str | None = None
    ) -> None:
        if result is not None:
            await self.db.execute(
                "UPDATE tasks SET status = ?, result = ?, updated_at = ? WHERE id = ?",
                (status.value, result, _now(), task_id),
            )
        else:
            await self.db.execute(
                "UPDATE tasks SET status = ?, updated_at = ? WHERE id = ?",
                (status.value, _now(), task_id),
            )
        await self.db.commit()

    async def get_task(self, task_id: str) -> dict | None:
        async with self.db.execute("SELECT * FROM tasks WHERE id = ?", (task_id,)) as cursor:
            row = await cursor.fetchone()
            return _task_row(row) if row else None

    async def list_tasks(self, run_id: str) -> list[dict]:
        async with self.db.execute(
            "SELECT * FROM tasks WHERE run_id = ? ORDER BY priority DESC, created_at",
            (run_id,),
        ) as cursor:
            rows = await cursor.fetchall()
            return [_task_row(r) for r in rows]

    async def get_pending_tasks(self, run_id: str) -> list[dict]:
        """Pending tasks whose dependencies have all completed."""
        all_tasks = await self.list_tasks(run_id)
        completed_ids = {t["id"] for t in all_tasks if t["status"] == TaskStatus.COMPLETED.value}
        return [
            task
            for task in all_tasks
            if task["status"] == TaskStatus.PENDING.value
            and all(dep in completed_ids for dep in task["dependencies"])
        ]

    async def get_blocked_tasks(self, run_id: str) -> list[dict]:
        """Pending tasks with a dependency that failed or was skipped."""
        all_tasks = await self.list_tasks(run_id)
        dead = {
            t["id"]
            for t in all_tasks
            if t["status"] in (TaskStatus.FAILED.value, TaskStatus.SKIPPED.value)
        }
        return [
            task
            for task in all_tasks
            if task["status"] == TaskStatus.PENDING.value
            and any(dep in dead for dep in task["dependencies"])
        ]

    # ── Epochs and reports ────────────────────────────────────────────

    async def add_epoch(
        self, run_id: str, epoch: int, train_loss: float, val_mae: float, lr: float,
        label: str = "",
    ) -> None:
        await self.db.execute(
            "INSERT INTO epochs (run_id, label, epoch, train_loss, val_mae, lr, created_at) "
            "VALUES (?, ?, ?, ?, ?, ?, ?)",
            (run_id, label, epoch, train_loss, val_mae, lr, _now()),
        )
        await self.db.commit()

    async def get_epochs(self, run_id: str, label: str | None = None) -> list[dict]:
        if label is None:
            query, params = "SELECT * FROM epochs WHERE run_id = ? ORDER BY id", (run_id,)
        else:
            query = "SELECT * FROM epochs WHERE run_id = ? AND label = ? ORDER BY id"
            params = (run_id, label)
        async with self.db.execute(query, params) as cursor:
            rows = await cursor.fetchall()
            return [dict(r) for r in rows]

    async def add_report(self, run_id: str, report: dict) -> None:
        await self.db.execute(
            "INSERT INTO reports (run_id, split, label, mae, rmse, mape, n_samples, config_hash, "
            "created_at) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
            (run_id, report["split"], report["label"], report["mae"], report["rmse"],
             report["mape"], report["n_samples"], report.get("config_hash"), _now()),
        )
        await self.db.commit()

    async def get_reports(self, run_id: str) -> list[dict]:
        async with self.db.execute(
            "SELECT * FROM reports WHERE run_id = ? ORDER BY id", (run_id,)
        ) as cursor:
            rows = await cursor.fetchall()
            return [dict(r) for r in rows]

    # ── Summary ───────────────────────────────────────────────────────

    async def get_run_summary(self, run_id: str) -> dict:
        run = await self.get_run(run_id)
        tasks = await self.list_tasks(run_id)

        status_counts: dict[str, int] = {}
        for t in tasks:
            status_counts[t["status"]] = status_counts.get(t["status"], 0) + 1

        return {
            "run": run,
            "total_tasks": len(tasks),
            "status_counts": status_counts,
            "tasks": tasks,
            "epochs": await self.get_epochs(run_id),
            "reports": await self.get_reports(run_id),
        }
