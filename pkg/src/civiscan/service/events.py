"""Append-only event log: the single source of truth for case state.

One JSON object per line, strictly increasing gap-free seq. Replay folds
events into the in-memory store; a torn final line (crash mid-write) is
discarded with a warning, any earlier corruption is an error.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)

KINDS = (
    "submitted",
    "preprocessed",
    "classified",
    "triaged",
    "overridden",
    "rejected",
    "dispatched",
    "notified",
    "failed",
)


class LogCorruptionError(RuntimeError):
    def __init__(self, message, seq=None):
        super().__init__(message)
        self.seq = seq


@dataclass(frozen=True)
class Event:
    seq: int
    at: float
    case_id: str
    kind: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "at": self.at, "case": self.case_id, "kind": self.kind, "payload": self.payload},
            separators=(",", ":"),
        )

    @staticmethod
    def from_json(obj: dict) -> "Event":
        return Event(
            seq=int(obj["seq"]),
            at=float(obj["at"]),
            case_id=obj["case"],
            kind=obj["kind"],
            payload=obj.get("payload", {}),
        )


class EventLog:
    """Serialized appender over a line-delimited JSON file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._next_seq = 1
        self._fh = None

    def open_for_append(self, next_seq: int) -> None:
        self._next_seq = next_seq
        self._fh = open(self.path, "a", encoding="utf-8")

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    def append(self, at: float, case_id: str, kind: str, payload: dict) -> Event:
        if kind not in KINDS:
            raise ValueError(f"unknown event kind: {kind}")
        with self._lock:
            event = Event(self._next_seq, at, case_id, kind, payload)
            self._fh.write(event.to_json() + "\n")
            self._fh.flush()
            self._next_seq += 1
        return event


def read_events(path):
    """Yield events in order, enforcing the gap-free seq invariant.

    A final line that fails to parse is treated as a torn write and skipped
    with a warning; a malformed or out-of-order line anywhere else raises.
    """
    path = Path(path)
    if not path.exists():
        return
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    expected = 1
    for i, line in enumerate(lines):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            event = Event.from_json(json.loads(stripped))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            if i == len(lines) - 1:
                log.warning("discarding torn final log line (%s)", exc)
                return
            raise LogCorruptionError(f"corrupt event at line {i + 1}: {exc}") from exc
        if event.seq != expected:
            raise LogCorruptionError(
                f"event seq {event.seq} at line {i + 1}, expected {expected} (gap or reorder)", seq=event.seq
            )
        expected += 1
        yield event
