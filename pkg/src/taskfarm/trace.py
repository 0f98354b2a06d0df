"""Event traces emitted by the registry and client runtime."""

import asyncio
from dataclasses import dataclass
from typing import Dict, Iterable, List, Tuple

EVENT_KINDS = ('Registered', 'Recruited', 'Assigned', 'Completed', 'Failed',
               'Rescheduled', 'Released', 'Notified')


@dataclass(frozen=True)
class Event:
    time_ms: float
    kind: str
    task: int = None
    service: str = None

    def format(self):
        parts = ['%.3f' % self.time_ms, self.kind]
        if self.task is not None:
            parts.append('task=%d' % self.task)
        if self.service is not None:
            parts.append('service=%s' % self.service)
        return ' '.join(parts)

    @classmethod
    def parse(cls, line):
        fields = line.split()
        kw = dict(f.split('=', 1) for f in fields[2:])
        task = int(kw['task']) if 'task' in kw else None
        return cls(float(fields[0]), fields[1], task, kw.get('service'))


class Tracer:
    """Collects events stamped with the running loop's clock (ms since start)."""

    def __init__(self, origin=None):
        self.events: List[Event] = []
        self._origin = origin

    def _now_ms(self):
        t = asyncio.get_running_loop().time()
        if self._origin is None:
            self._origin = t
        return (t - self._origin) * 1000.0

    def emit(self, kind, task=None, service=None):
        if kind not in EVENT_KINDS:
            raise ValueError('unknown trace event %r' % kind)
        if service is not None:
            service = str(service)
        self.events.append(Event(self._now_ms(), kind, task, service))

    def dumps(self):
        return ''.join(e.format() + '\n' for e in self.events)


def loads(text) -> List[Event]:
    return [Event.parse(line) for line in text.splitlines() if line.strip()]


def of_kind(events: Iterable[Event], *kinds) -> List[Event]:
    return [e for e in events if e.kind in kinds]


def completed_by_service(events: Iterable[Event]) -> Dict[object, int]:
    counts = {}
    for e in events:
        if e.kind == 'Completed':
            counts[e.service] = counts.get(e.service, 0) + 1
    return counts


def busy_intervals(events: Iterable[Event]) -> Dict[object, List[Tuple[float, float, int]]]:
    """Per service, the (assigned, completed, task) spans of finished tasks."""
    open_, spans = {}, {}
    for e in events:
        if e.kind == 'Assigned':
            open_[(e.task, e.service)] = e.time_ms
        elif e.kind == 'Completed' and (e.task, e.service) in open_:
            start = open_.pop((e.task, e.service))
            spans.setdefault(e.service, []).append((start, e.time_ms, e.task))
    return spans
