"""Persistence for registrations, issued tokens and the revocation list.

Both stores expose the same namespaced key-value interface.  Values are
JSON-compatible dicts.  ``insert`` never overwrites, which keeps the
revocation list insert-only and makes duplicate records detectable.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from typing import Any, Protocol

REGISTRATIONS = "registration"
TOKENS = "token"
REVOCATIONS = "revocation"


class Store(Protocol):
    def insert(self, ns: str, key: str, value: dict) -> bool: ...
    def get(self, ns: str, key: str) -> dict | None: ...
    def keys(self, ns: str) -> list[str]: ...


class MemoryStore:
    def __init__(self) -> None:
        self._data: dict[str, dict[str, dict]] = {}
        self._lock = threading.Lock()

    def insert(self, ns: str, key: str, value: dict) -> bool:
        """Store ``value`` unless ``key`` exists; True if it was stored."""
        with self._lock:
            bucket = self._data.setdefault(ns, {})
            if key in bucket:
                return False
            bucket[key] = json.loads(json.dumps(value))
            return True

    def get(self, ns: str, key: str) -> dict | None:
        with self._lock:
            value = self._data.get(ns, {}).get(key)
            return json.loads(json.dumps(value)) if value is not None else None

    def keys(self, ns: str) -> list[str]:
        with self._lock:
            return sorted(self._data.get(ns, {}))

    def dump(self) -> dict[str, Any]:
        with self._lock:
            return json.loads(json.dumps(self._data))


class SqliteStore:
    """Embedded store; one table, the primary key makes inserts compare-and-set."""

    def __init__(self, path: str) -> None:
        self._conn = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
        self._lock = threading.Lock()
        with self._lock:
            self._conn.execute(
                "CREATE TABLE IF NOT EXISTS kv (ns TEXT NOT NULL, k TEXT NOT NULL, v TEXT NOT NULL, PRIMARY KEY (ns, k))"
            )

    def insert(self, ns: str, key: str, value: dict) -> bool:
        with self._lock:
            cur = self._conn.execute(
                "INSERT OR IGNORE INTO kv (ns, k, v) VALUES (?, ?, ?)", (ns, key, json.dumps(value, sort_keys=True))
            )
            return cur.rowcount == 1

    def get(self, ns: str, key: str) -> dict | None:
        with self._lock:
            row = self._conn.execute("SELECT v FROM kv WHERE ns = ? AND k = ?", (ns, key)).fetchone()
        return json.loads(row[0]) if row else None

    def keys(self, ns: str) -> list[str]:
        with self._lock:
            return [r[0] for r in self._conn.execute("SELECT k FROM kv WHERE ns = ? ORDER BY k", (ns,))]

    def dump(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        with self._lock:
            for ns, k, v in self._conn.execute("SELECT ns, k, v FROM kv"):
                out.setdefault(ns, {})[k] = json.loads(v)
        return out

    def close(self) -> None:
        with self._lock:
            self._conn.close()


def open_store(location: str) -> MemoryStore | SqliteStore:
    """``memory`` or ``sqlite:<path>``."""
    if location == "memory":
        return MemoryStore()
    if location.startswith("sqlite:"):
        return SqliteStore(location[len("sqlite:"):])
    raise ValueError(f"unknown store {location!r}")
