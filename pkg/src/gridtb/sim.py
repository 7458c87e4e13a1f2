"""Deterministic discrete-event engine.

Virtual time is integer milliseconds. Events are ordered by ``(fire_at, seq)``
where ``seq`` is a counter assigned at scheduling time, so two events for the
same instant fire in the order they were scheduled.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

MS_PER_S = 1000
MS_PER_HOUR = 3_600_000
MS_PER_DAY = 86_400_000


class SimulationError(RuntimeError):
    """Internal logic fault; aborts the run."""


class EventKind(str, Enum):
    JOB_ARRIVAL = "job-arrival"
    TRANSFER_COMPLETE = "transfer-complete"
    FAULT_FIRE = "fault-fire"
    SERVICE_RESTART_DONE = "service-restart-done"
    BATCH_DISPATCH = "batch-dispatch"
    CLEANUP_DONE = "cleanup-done"
    GATE_EVALUATED = "gate-evaluated"
    OPERATOR_ACTION = "operator-action"


def seconds_to_ms(seconds: float | int) -> int:
    """Convert scenario seconds to integer milliseconds without float drift."""
    if isinstance(seconds, int):
        return seconds * MS_PER_S
    # round-trips decimal literals like 0.001 exactly
    return int(round(seconds * MS_PER_S))


class RngStream:
    """Counter-based generator keyed by ``(seed, stream_id)``.

    Draw ``n`` is the first 8 bytes of ``sha256(key || n)`` where ``key`` is
    ``sha256("<seed>:<stream_id>")``. Platform-independent by construction.
    """

    ALGORITHM = "sha256-counter-v1"

    def __init__(self, seed: int, stream_id: str):
        self.seed = seed
        self.stream_id = stream_id
        self._key = hashlib.sha256(f"{seed}:{stream_id}".encode()).digest()
        self.counter = 0

    def next_u64(self) -> int:
        block = hashlib.sha256(self._key + self.counter.to_bytes(8, "little")).digest()
        self.counter += 1
        return int.from_bytes(block[:8], "little")

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def bernoulli(self, p: float) -> bool:
        if p <= 0.0:
            return False
        if p >= 1.0:
            return True
        return self.random() < p

    def exponential_ms(self, mean_ms: float) -> int:
        """Exponential inter-arrival rounded down to whole ms (min 0)."""
        u = self.random()
        return int(math.floor(-mean_ms * math.log1p(-u)))


@dataclass
class Event:
    fire_at: int
    seq: int
    kind: EventKind
    payload: dict[str, Any]
    action: Optional[Callable[["Event"], None]] = field(default=None, repr=False)
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


class Simulator:
    def __init__(self, seed: int = 0, trace: bool = False):
        self.seed = seed
        self.now = 0
        self._queue: list[tuple[int, int, Event]] = []
        self._seq = 0
        self._streams: dict[str, RngStream] = {}
        self.dispatched = 0
        self.trace: Optional[list[dict[str, Any]]] = [] if trace else None

    def rng(self, stream_id: str) -> RngStream:
        stream = self._streams.get(stream_id)
        if stream is None:
            stream = self._streams[stream_id] = RngStream(self.seed, stream_id)
        return stream

    def schedule(
        self,
        fire_at: int,
        kind: EventKind,
        action: Optional[Callable[[Event], None]] = None,
        payload: Optional[dict[str, Any]] = None,
    ) -> Event:
        if not isinstance(fire_at, int):
            raise SimulationError(f"fire_at must be integer ms, got {fire_at!r}")
        if fire_at < self.now:
            raise SimulationError(
                f"cannot schedule {kind.value} at {fire_at} ms, clock is at {self.now} ms"
            )
        event = Event(fire_at, self._seq, EventKind(kind), dict(payload or {}), action)
        self._seq += 1
        heapq.heappush(self._queue, (fire_at, event.seq, event))
        return event

    def schedule_in(self, delay_ms: int, kind: EventKind, action=None, payload=None) -> Event:
        return self.schedule(self.now + delay_ms, kind, action, payload)

    def peek(self) -> Optional[int]:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def run_until(self, t_end: int) -> int:
        """Dispatch every event with ``fire_at <= t_end``; return how many fired."""
        if t_end < self.now:
            raise SimulationError(f"run_until({t_end}) is before now={self.now}")
        count = 0
        while self._queue and self._queue[0][0] <= t_end:
            fire_at, _, event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now = fire_at
            if self.trace is not None:
                self.trace.append(
                    {"t": fire_at, "seq": event.seq, "kind": event.kind.value, "payload": event.payload}
                )
            if event.action is not None:
                try:
                    event.action(event)
                except SimulationError:
                    raise
                except Exception as exc:
                    raise SimulationError(
                        f"{type(exc).__name__} while dispatching {event.kind.value} "
                        f"at {fire_at} ms payload={event.payload}: {exc}"
                    ) from exc
            count += 1
        self.now = t_end
        self.dispatched += count
        return count
