"""Persistent Pol-DB backups backed by SQLite — survive gateway reboots.

Keeps the latest snapshot per box plus the tick it was taken at.

Usage:
    store = SqliteSnapshotStore("~/.securebox/poldb.db")
    gateway.persist(store, now)
    ...
    gateway.reboot(store)
"""

from __future__ import annotations
import sqlite3
from pathlib import Path


_SCHEMA = """
CREATE TABLE IF NOT EXISTS snapshots (
    box_id INTEGER NOT NULL PRIMARY KEY,
    tick INTEGER NOT NULL,
    blob BLOB NOT NULL,
    saved_at REAL NOT NULL DEFAULT (julianday('now'))
);
"""


class SqliteSnapshotStore:
    """Latest Pol-DB snapshot per box."""

    __slots__ = ("_db",)

    def __init__(self, db_path: str | Path = "poldb.db") -> None:
        if str(db_path) != ":memory:":
            db_path = Path(db_path).expanduser()
            db_path.parent.mkdir(parents=True, exist_ok=True)
        self._db = sqlite3.connect(str(db_path), check_same_thread=False)
        self._db.executescript(_SCHEMA)

    def save(self, box_id: int, blob: bytes, tick: int) -> None:
        self._db.execute(
            "INSERT OR REPLACE INTO snapshots (box_id, tick, blob) VALUES (?, ?, ?)",
            (box_id, tick, blob),
        )
        self._db.commit()

    def load(self, box_id: int) -> bytes | None:
        row = self._db.execute(
            "SELECT blob FROM snapshots WHERE box_id = ?", (box_id,),
        ).fetchone()
        return bytes(row[0]) if row else None

    def saved_tick(self, box_id: int) -> int | None:
        row = self._db.execute(
            "SELECT tick FROM snapshots WHERE box_id = ?", (box_id,),
        ).fetchone()
        return row[0] if row else None

    def list_boxes(self) -> list[int]:
        rows = self._db.execute("SELECT box_id FROM snapshots ORDER BY box_id").fetchall()
        return [r[0] for r in rows]

    def delete(self, box_id: int) -> None:
        self._db.execute("DELETE FROM snapshots WHERE box_id = ?", (box_id,))
        self._db.commit()

    def close(self) -> None:
        self._db.close()
