"""
Discrete-event core: a heapq-ordered event queue on integer nanoseconds and a seeded network that
turns sends into timed deliveries.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from errors import InvariantViolation

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000


def seconds_to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_S))


def ns_to_seconds(t_ns: int) -> float:
    return t_ns / NS_PER_S


class MsgKind(str, Enum):
    PROPOSAL = "PROPOSAL"
    VOTE = "VOTE"
    VIEW_CHANGE = "VIEW_CHANGE"
    NEW_VIEW = "NEW_VIEW"
    COMMIT = "COMMIT"
    SYNC_REQUEST = "SYNC_REQUEST"
    SYNC_VOTE = "SYNC_VOTE"
    SYNC_DECISION = "SYNC_DECISION"
    SEGMENT_CHUNK = "SEGMENT_CHUNK"
    SYNC_RESPONSE = "SYNC_RESPONSE"
    SYNC_RETRY = "SYNC_RETRY"
    ADMIN_ALERT = "ADMIN_ALERT"


class TimerKind(str, Enum):
    WORKLOAD_TICK = "WORKLOAD_TICK"
    EPOCH_DEADLINE = "EPOCH_DEADLINE"
    GUARD_EXPIRED = "GUARD_EXPIRED"
    SYNC_BROADCAST = "SYNC_BROADCAST"
    DECISION_DEADLINE = "DECISION_DEADLINE"
    VOTE_DEADLINE = "VOTE_DEADLINE"
    TRANSFER_DONE = "TRANSFER_DONE"
    CONSISTENCY_CHECK = "CONSISTENCY_CHECK"
    SAMPLE = "SAMPLE"


@dataclass(frozen=True)
class Envelope:
    kind: MsgKind
    src: str
    dst: str
    body: Any


@dataclass(frozen=True)
class Timer:
    kind: TimerKind
    data: Any = None


@dataclass(order=True)
class SimEvent:
    fire_time: int
    seq: int
    target: str = field(compare=False)
    payload: Any = field(compare=False)
    scheduled_at: int = field(compare=False, default=0)


class EventQueue:
    """Events pop in (fire_time, seq) order. Once running, new events must lie strictly in the future."""

    def __init__(self):
        self.now = 0
        self._heap = []
        self._seq = 0
        self.running = False
        self.processed = 0

    def __len__(self):
        return len(self._heap)

    def schedule(self, fire_time: int, target: str, payload) -> SimEvent:
        fire_time = int(fire_time)
        if fire_time < self.now or (self.running and fire_time == self.now):
            raise InvariantViolation(f"event for {target} at {fire_time} scheduled at {self.now}")
        event = SimEvent(fire_time, self._seq, target, payload, self.now)
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def schedule_in(self, delay_ns: int, target: str, payload) -> SimEvent:
        return self.schedule(self.now + max(1, int(delay_ns)), target, payload)

    def peek_time(self) -> Optional[int]:
        return self._heap[0].fire_time if self._heap else None

    def pop(self) -> SimEvent:
        event = heapq.heappop(self._heap)
        if event.fire_time < self.now:
            raise InvariantViolation(f"clock would move back from {self.now} to {event.fire_time}")
        self.now = event.fire_time
        self.processed += 1
        return event

    def run_until(self, end_ns: int, dispatch: Callable[[SimEvent], None]) -> int:
        """Dispatch every event with fire_time <= end_ns; returns how many ran."""
        self.running = True
        count = 0
        try:
            while self._heap and self._heap[0].fire_time <= end_ns:
                dispatch(self.pop())
                count += 1
        finally:
            self.running = False
        return count


class SimNetwork:
    """
    Seeded point-to-point delivery. Overlay links draw uniform latency from ``overlay_latency_ms``;
    any link touching a cloud endpoint uses ``cloud_latency_ms``.
    """

    def __init__(self, queue: EventQueue, rng: np.random.Generator,
                 overlay_latency_ms: Tuple[float, float] = (1.0, 10.0),
                 cloud_latency_ms: Tuple[float, float] = (20.0, 50.0),
                 cloud_ids: Iterable[str] = ()):
        self.queue = queue
        self.rng = rng
        self.overlay_range = self._ns_range(overlay_latency_ms)
        self.cloud_range = self._ns_range(cloud_latency_ms)
        self.cloud_ids = set(cloud_ids)
        self.sent = 0

    @staticmethod
    def _ns_range(bounds) -> Tuple[int, int]:
        lo, hi = (int(round(b * NS_PER_MS)) for b in bounds)
        if lo <= 0 or hi < lo:
            raise ValueError(f"latency range {bounds} must be positive and ordered")
        return lo, hi

    @property
    def max_overlay_latency_ns(self) -> int:
        return self.overlay_range[1]

    def latency(self, src: str, dst: str) -> int:
        lo, hi = self.cloud_range if (src in self.cloud_ids or dst in self.cloud_ids) else self.overlay_range
        return int(self.rng.integers(lo, hi, endpoint=True))

    def send(self, src: str, dst: str, kind: MsgKind, body, extra_delay_ns: int = 0) -> SimEvent:
        self.sent += 1
        delay = self.latency(src, dst) + int(extra_delay_ns)
        return self.queue.schedule_in(delay, dst, Envelope(kind, src, dst, body))

    def broadcast(self, src: str, dsts: Sequence[str], kind: MsgKind, body) -> int:
        count = 0
        for dst in dsts:
            if dst != src:
                self.send(src, dst, kind, body)
                count += 1
        return count
