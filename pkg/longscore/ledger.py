"""Append-only SQLite ledger of CLI runs."""
from __future__ import annotations

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List

import aiosqlite

logger = logging.getLogger(__name__)


async def init_ledger(db_path: Path) -> None:
    """Initialize the ledger with its runs table."""
    db_path.parent.mkdir(parents=True, exist_ok=True)
    async with aiosqlite.connect(db_path) as db:
        await db.executescript(
            """
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                timestamp TEXT NOT NULL,
                command TEXT NOT NULL,
                config_hash TEXT,
                seed INTEGER,
                status TEXT NOT NULL,
                manifest TEXT NOT NULL
            );
            CREATE INDEX IF NOT EXISTS idx_runs_command ON runs(command);
        """
        )
        await db.commit()


async def record_run(db_path: Path, manifest: Dict[str, Any], status: str) -> int:
    """Append one run; the timestamp lives here and nowhere in the artifacts."""
    await init_ledger(db_path)
    async with aiosqlite.connect(db_path) as db:
        cursor = await db.execute(
            "INSERT INTO runs (timestamp, command, config_hash, seed, status, manifest) "
            "VALUES (?, ?, ?, ?, ?, ?)",
            (
                datetime.now(timezone.utc).isoformat(),
                manifest.get("command", ""),
                manifest.get("config_hash"),
                manifest.get("seed"),
                status,
                json.dumps(manifest, sort_keys=True),
            ),
        )
        await db.commit()
        run_id = cursor.lastrowid
    logger.debug("📝 ledger run %s: %s %s", run_id, manifest.get("command"), status)
    return run_id


async def list_runs(db_path: Path, command: str | None = None) -> List[Dict[str, Any]]:
    """Runs oldest first, optionally restricted to one command."""
    if not db_path.exists():
        return []
    query = "SELECT id, timestamp, command, config_hash, seed, status, manifest FROM runs"
    params: tuple = ()
    if command is not None:
        query += " WHERE command = ?"
        params = (command,)
    async with aiosqlite.connect(db_path) as db:
        db.row_factory = aiosqlite.Row
        cursor = await db.execute(query + " ORDER BY id", params)
        rows = await cursor.fetchall()
    return [
        {**{key: row[key] for key in row.keys() if key != "manifest"},
         "manifest": json.loads(row["manifest"])}
        for row in rows
    ]
