"""Deterministic discrete-event core: a time-ordered queue and a hashed trace."""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Callable


class SchedulingError(ValueError):
    pass


@dataclass
class EventTrace:
    """Processed events in order. Each entry is a flat JSON-able dict with ``t``, ``node`` and ``event``."""

    entries: list[dict[str, Any]] = field(default_factory=list)

    def record(self, t: int, node: str, event: str, **fields: Any) -> dict[str, Any]:
        if self.entries and t < self.entries[-1]["t"]:
            raise SchedulingError(f"trace time went backwards: {t} < {self.entries[-1]['t']}")
        entry = {"t": t, "node": node, "event": event, **fields}
        self.entries.append(entry)
        return entry

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @staticmethod
    def canonical_line(entry: dict[str, Any]) -> str:
        return json.dumps(entry, sort_keys=True, separators=(",", ":"), allow_nan=False)

    def to_jsonl(self) -> str:
        return "".join(self.canonical_line(e) + "\n" for e in self.entries)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()

    @classmethod
    def from_jsonl(cls, text: str) -> "EventTrace":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def select(self, event: str | None = None, **match: Any) -> list[dict[str, Any]]:
        return [
            e
            for e in self.entries
            if (event is None or e["event"] == event) and all(e.get(k) == v for k, v in match.items())
        ]


@dataclass(order=True)
class _Pending:
    time: int
    seq: int
    scheduled_at: int = field(compare=False)
    action: Callable[..., None] = field(compare=False)
    args: tuple = field(compare=False, default=())


class EventQueue:
    """Events fire in (time, insertion order). Time is integer microseconds."""

    def __init__(self) -> None:
        self.now = 0
        self._heap: list[_Pending] = []
        self._seq = itertools.count()
        self.trace = EventTrace()
        # (scheduled_at, fired_at) for every processed event
        self.causality: list[tuple[int, int]] = []

    def schedule(self, time: int, action: Callable[..., None], *args: Any) -> None:
        if not isinstance(time, int):
            raise SchedulingError(f"event time must be integer microseconds, got {time!r}")
        if time < self.now:
            raise SchedulingError(f"cannot schedule at t={time}us, simulation time is already {self.now}us")
        heapq.heappush(self._heap, _Pending(time, next(self._seq), self.now, action, args))

    def schedule_in(self, delay: int, action: Callable[..., None], *args: Any) -> None:
        self.schedule(self.now + delay, action, *args)

    @property
    def pending(self) -> int:
        return len(self._heap)

    def run(self, until: int | None = None) -> EventTrace:
        while self._heap and (until is None or self._heap[0].time <= until):
            ev = heapq.heappop(self._heap)
            self.now = ev.time
            self.causality.append((ev.scheduled_at, ev.time))
            ev.action(*ev.args)
        if until is not None and until > self.now:
            self.now = until
        return self.trace
