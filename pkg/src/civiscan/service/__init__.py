"""Networked case service: HTTP API, event-sourced store, pipeline workers."""

from .config import ServiceConfig, load_config
from .core import CaseService, CaseStore, apply_event, replay
from .events import Event, EventLog, LogCorruptionError, read_events
from .http import make_server, serve_forever
from .ids import new_case_id

__all__ = [
    "ServiceConfig",
    "load_config",
    "CaseService",
    "CaseStore",
    "apply_event",
    "replay",
    "Event",
    "EventLog",
    "LogCorruptionError",
    "read_events",
    "make_server",
    "serve_forever",
    "new_case_id",
]
