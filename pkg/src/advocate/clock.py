"""Injectable clocks and RFC 3339 timestamp helpers."""

from __future__ import annotations

import threading
from datetime import datetime, timedelta, timezone
from typing import Protocol


class Clock(Protocol):
    def now(self) -> datetime: ...


class SystemClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)


class ManualClock:
    """A clock that only moves when told to. Used for scripted runs."""

    def __init__(self, start: datetime | str = "2026-01-01T00:00:00Z") -> None:
        self._now = parse_ts(start) if isinstance(start, str) else start.astimezone(timezone.utc)
        self._lock = threading.Lock()

    def now(self) -> datetime:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> datetime:
        with self._lock:
            self._now += timedelta(seconds=seconds)
            return self._now

    def set(self, when: datetime | str) -> None:
        with self._lock:
            self._now = parse_ts(when) if isinstance(when, str) else when.astimezone(timezone.utc)


def format_ts(when: datetime) -> str:
    """Render a timestamp as RFC 3339 UTC with a ``Z`` suffix.

    Sub-second digits are only emitted when present so that whole-second
    clocks produce short, stable strings.
    """
    if when.tzinfo is None:
        raise ValueError("naive datetime")
    when = when.astimezone(timezone.utc)
    if when.microsecond:
        return when.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_ts(text: str) -> datetime:
    if not isinstance(text, str) or not text.endswith("Z"):
        raise ValueError(f"not an RFC 3339 UTC timestamp: {text!r}")
    parsed = datetime.fromisoformat(text[:-1] + "+00:00")
    return parsed.astimezone(timezone.utc)
