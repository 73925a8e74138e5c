"""Append-only, hash-chained audit log stored as NDJSON.

Each record hashes the canonical JSON of all its other fields, including the
previous record's hash, so any edit breaks the chain at the edited position.
Truncating the tail leaves a valid shorter chain; detecting it needs the
head hash remembered by the writer (``expected_head``).
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .canonical import canonical_bytes, sha256_hex

log = logging.getLogger(__name__)

GENESIS = "0" * 64
EVENT_KINDS = ("issue", "register", "delegate", "approve", "authorize", "revoke")
_FIELDS = {"seq", "prev_hash", "timestamp", "event_kind", "actor", "subject_refs", "decision", "details", "record_hash"}


class AuditError(Exception):
    code = "AuditFailure"


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    prev_hash: str
    timestamp: int
    event_kind: str
    actor: str
    subject_refs: tuple[str, ...] = ()
    decision: dict | None = None
    details: dict = field(default_factory=dict)
    record_hash: str = ""

    def body(self) -> dict:
        return {
            "seq": self.seq,
            "prev_hash": self.prev_hash,
            "timestamp": self.timestamp,
            "event_kind": self.event_kind,
            "actor": self.actor,
            "subject_refs": list(self.subject_refs),
            "decision": self.decision,
            "details": self.details,
        }

    def compute_hash(self) -> str:
        return sha256_hex(canonical_bytes(self.body()))

    def to_json(self) -> dict:
        return {**self.body(), "record_hash": self.record_hash}

    def to_line(self) -> str:
        return canonical_bytes(self.to_json()).decode("utf-8")

    @classmethod
    def from_json(cls, data: dict) -> AuditRecord:
        if not isinstance(data, dict) or set(data) != _FIELDS:
            raise ValueError("audit record must have exactly the record fields")
        return cls(
            seq=data["seq"],
            prev_hash=data["prev_hash"],
            timestamp=data["timestamp"],
            event_kind=data["event_kind"],
            actor=data["actor"],
            subject_refs=tuple(data["subject_refs"]),
            decision=data["decision"],
            details=data["details"],
            record_hash=data["record_hash"],
        )


def _record_ok(rec: Any, index: int, prev: str) -> bool:
    if not isinstance(rec, AuditRecord):
        return False
    try:
        return rec.seq == index and rec.prev_hash == prev and rec.record_hash == rec.compute_hash()
    except (TypeError, ValueError):
        return False


def verify_chain(records: Sequence[AuditRecord | None], expected_head: str | None = None) -> int | None:
    """Index of the first broken record, or None when the chain is intact.

    With ``expected_head`` the last record must carry that hash; a truncated
    log then reports the index just past its end.  Entries that failed to
    parse may be passed as None.
    """
    prev = GENESIS
    for i, rec in enumerate(records):
        if not _record_ok(rec, i, prev):
            return i
        prev = rec.record_hash
    if expected_head is not None and prev != expected_head:
        return len(records)
    return None


def query(
    records: Iterable[AuditRecord],
    *,
    kind: str | None = None,
    actor: str | None = None,
    subject_ref: str | None = None,
    since: int | None = None,
    until: int | None = None,
) -> list[AuditRecord]:
    """Order-preserving filter; all given conditions must hold (time bounds inclusive)."""
    out = []
    for rec in records:
        if kind is not None and rec.event_kind != kind:
            continue
        if actor is not None and rec.actor != actor:
            continue
        if subject_ref is not None and subject_ref not in rec.subject_refs:
            continue
        if since is not None and rec.timestamp < since:
            continue
        if until is not None and rec.timestamp > until:
            continue
        out.append(rec)
    return out


def read_log(path: str | os.PathLike) -> list[AuditRecord | None]:
    """Load an NDJSON log.

    A line that does not decode, parse, or round-trip to the same canonical
    bytes comes back as None, so any byte edit is visible to ``verify_chain``.
    """
    out: list[AuditRecord | None] = []
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.rstrip(b"\r\n")
            if not line.strip():
                continue
            try:
                rec = AuditRecord.from_json(json.loads(line.decode("utf-8")))
                out.append(rec if rec.to_line().encode("utf-8") == line else None)
            except (ValueError, KeyError, TypeError):
                out.append(None)
    return out


class AuditLog:
    """Single-writer log.  Readers get a prefix-consistent snapshot via ``records``."""

    def __init__(self, path: str | os.PathLike | None = None, clock: Callable[[], int] | None = None) -> None:
        self._path = Path(path) if path is not None else None
        self._clock = clock or (lambda: int(time.time()))
        self._lock = threading.Lock()
        self._records: list[AuditRecord] = []
        if self._path is not None and self._path.exists():
            loaded = read_log(self._path)
            broken = verify_chain(loaded)
            if broken is not None:
                raise AuditError(f"existing audit log {self._path} is broken at record {broken}")
            self._records = list(loaded)  # type: ignore[arg-type]

    @property
    def path(self) -> Path | None:
        return self._path

    @property
    def records(self) -> tuple[AuditRecord, ...]:
        with self._lock:
            return tuple(self._records)

    @property
    def head(self) -> str:
        with self._lock:
            return self._records[-1].record_hash if self._records else GENESIS

    def __len__(self) -> int:
        return len(self._records)

    def append(
        self,
        event_kind: str,
        actor: str,
        subject_refs: Iterable[str] = (),
        decision: dict | None = None,
        details: dict | None = None,
        timestamp: int | None = None,
    ) -> AuditRecord:
        if event_kind not in EVENT_KINDS:
            raise AuditError(f"unknown event kind {event_kind!r}")
        with self._lock:
            prev = self._records[-1].record_hash if self._records else GENESIS
            rec = AuditRecord(
                seq=len(self._records),
                prev_hash=prev,
                timestamp=self._clock() if timestamp is None else timestamp,
                event_kind=event_kind,
                actor=actor,
                subject_refs=tuple(subject_refs),
                decision=decision,
                details=dict(details or {}),
            )
            rec = replace(rec, record_hash=rec.compute_hash())
            if self._path is not None:
                try:
                    with open(self._path, "a", encoding="utf-8") as fh:
                        fh.write(rec.to_line() + "\n")
                        fh.flush()
                        os.fsync(fh.fileno())
                except OSError as exc:
                    log.error("audit append to %s failed: %s", self._path, exc)
                    raise AuditError(f"audit append failed: {exc}") from exc
            self._records.append(rec)
            return rec

    def verify(self) -> int | None:
        return verify_chain(self.records)

    def query(self, **filters: Any) -> list[AuditRecord]:
        return query(self.records, **filters)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for rec in self.records:
            out[rec.event_kind] = out.get(rec.event_kind, 0) + 1
        return out
