"""Fault injection on named random streams.

Each fault spec draws from its own stream ``fault:<target>:<kind>``, so adding
or removing one spec never shifts the fault times of another.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from .broker import ResourceBroker
from .compute import ComputeElement
from .infosys import GisTree
from .sim import MS_PER_DAY, EventKind, RngStream, Simulator, seconds_to_ms
from .storage import StorageElement

KINDS = ("restart-needed", "db-corruption", "gram-wedge-external")
DEFAULT_RESTART_S = 600


class FaultError(ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass
class FaultSpec:
    target: str
    kind: str
    rate_per_day: Optional[float] = None
    fixed_times_s: Optional[list[float]] = None
    effect_duration_s: float = DEFAULT_RESTART_S
    inodes: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FaultError("unknown-kind", self.kind)
        if (self.rate_per_day is None) == (self.fixed_times_s is None):
            raise FaultError("bad-process", "exactly one of poisson rate or fixed times")
        if self.rate_per_day is not None and self.rate_per_day < 0:
            raise FaultError("bad-process", "rate_per_day must be >= 0")

    @property
    def stream_id(self) -> str:
        return f"fault:{self.target}:{self.kind}"

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "FaultSpec":
        process = raw["process"]
        if process.get("type") == "poisson":
            rate, times = float(process["rate_per_day"]), None
        else:
            rate, times = None, list(process["times_s"])
        return cls(
            target=raw["target"],
            kind=raw["kind"],
            rate_per_day=rate,
            fixed_times_s=times,
            effect_duration_s=raw.get("effect_duration_s", DEFAULT_RESTART_S),
            inodes=raw.get("inodes"),
        )


def arm(spec: FaultSpec, rng: RngStream, horizon_ms: int) -> list[int]:
    """Fire times (ms) of ``spec`` within ``[0, horizon_ms]``."""
    if spec.fixed_times_s is not None:
        return sorted(t for t in (seconds_to_ms(s) for s in spec.fixed_times_s) if 0 <= t <= horizon_ms)
    if not spec.rate_per_day:
        return []
    mean_ms = MS_PER_DAY / spec.rate_per_day
    times, t = [], 0
    while True:
        t += rng.exponential_ms(mean_ms)
        if t > horizon_ms:
            return times
        times.append(t)


@dataclass
class FaultRecord:
    fire_ms: int
    target: str
    kind: str
    applied: bool
    resolved_ms: Optional[int] = None

    def as_dict(self) -> dict:
        return {
            "fire_ms": self.fire_ms,
            "target": self.target,
            "kind": self.kind,
            "applied": self.applied,
            "resolved_ms": self.resolved_ms,
        }


@dataclass
class FaultInjector:
    sim: Simulator
    rbs: Mapping[str, ResourceBroker]
    ces: Mapping[str, ComputeElement]
    ses: Mapping[str, StorageElement]
    gis: GisTree
    records: list[FaultRecord] = field(default_factory=list)
    noop_count: int = 0
    suppressed: int = 0
    # target -> [start_ms, end_ms] windows of unavailability
    windows: dict[str, list[list[int]]] = field(default_factory=dict)

    def __post_init__(self):
        self._pending_wedges: list[tuple[FaultRecord, ComputeElement]] = []
        self._open_corruptions: dict[str, list[FaultRecord]] = {}
        for rb_id, rb in self.rbs.items():
            rb.recovery_listeners.append(
                lambda rec, target=f"rb:{rb_id}": self._on_recovered(target, rec)
            )

    def resolve(self, target: str):
        family, _, name = target.partition(":")
        table = {"rb": self.rbs, "ce": self.ces, "se": self.ses}
        if family in table and name in table[family]:
            return family, table[family][name]
        if family == "gis" and (name == "top" or name in self.gis.sites):
            return family, name
        raise FaultError("unknown-target", target)

    def arm(self, spec: FaultSpec, horizon_ms: int) -> list[int]:
        family, service = self.resolve(spec.target)
        if spec.kind == "db-corruption" and family != "rb":
            raise FaultError("bad-target", f"{spec.kind} needs an RB, got {spec.target}")
        if spec.kind == "gram-wedge-external" and family != "ce":
            raise FaultError("bad-target", f"{spec.kind} needs a CE, got {spec.target}")
        if spec.kind == "db-corruption" and not service.dual_cpu:
            # the library race only bites on dual-processor nodes
            self.suppressed += 1
            return []
        times = arm(spec, self.sim.rng(spec.stream_id), horizon_ms)
        for t in times:
            self.sim.schedule(
                t,
                EventKind.FAULT_FIRE,
                lambda e, spec=spec: self.apply_fault(spec),
                {"target": spec.target, "kind": spec.kind},
            )
        return times

    def _window(self, target: str, start: int, end: int) -> None:
        self.windows.setdefault(target, []).append([start, end])

    def _on_recovered(self, target: str, recovery) -> None:
        self._window(target, recovery.trigger_ms, recovery.done_ms)
        for record in self._open_corruptions.pop(target, []):
            record.resolved_ms = recovery.done_ms

    def apply_fault(self, spec: FaultSpec) -> FaultRecord:
        now = self.sim.now
        family, service = self.resolve(spec.target)
        record = FaultRecord(now, spec.target, spec.kind, applied=False)
        self.records.append(record)

        if spec.kind == "db-corruption":
            # silent: daemons keep running, new jobs just stop leaving WAITING
            record.applied = service.corrupt()
            if record.applied:
                self._open_corruptions.setdefault(spec.target, []).append(record)
        elif spec.kind == "gram-wedge-external":
            if not (service.cleaning or service.restarting):
                service.wedge_external(spec.inodes)
                record.applied = True
                self._pending_wedges.append((record, service))
        else:
            duration = seconds_to_ms(spec.effect_duration_s)
            record.applied = self._restart(family, service, spec.target, duration, record)
            if record.applied:
                self._window(spec.target, now, now + duration)
        if not record.applied:
            self.noop_count += 1
        return record

    def _restart(self, family: str, service, target: str, duration: int, record: FaultRecord) -> bool:
        def resolved():
            record.resolved_ms = self.sim.now

        if family == "rb":
            return service.restart(duration, on_done=resolved)
        if family == "ce":
            if service.restarting or service.cleaning:
                return False
            service.restarting = True

            def undo():
                service.restarting = False

        elif family == "se":
            if not service.up:
                return False
            service.up = False

            def undo():
                service.up = True

        else:
            if service in self.gis.down:
                return False
            self.gis.down.add(service)

            def undo():
                self.gis.down.discard(service)

        def done(event):
            undo()
            resolved()

        self.sim.schedule_in(
            duration, EventKind.SERVICE_RESTART_DONE, done, {"target": target, "phase": "restarted"}
        )
        return True

    def finalize(self) -> None:
        """External wedges are resolved by the first completed cleanup after them."""
        for record, ce in self._pending_wedges:
            for cleanup in ce.cleanups:
                if cleanup.started_ms >= record.fire_ms and cleanup.done_ms <= self.sim.now:
                    record.resolved_ms = cleanup.done_ms
                    break


def default_fault_specs(rbs: Mapping[str, ResourceBroker], ces: Mapping[str, ComputeElement]) -> list[FaultSpec]:
    """Daily restarts for every main service, daily DB corruption on dual-CPU RBs."""
    specs = [FaultSpec(f"rb:{rb_id}", "restart-needed", rate_per_day=1.0) for rb_id in sorted(rbs)]
    specs.append(FaultSpec("gis:top", "restart-needed", rate_per_day=1.0))
    specs += [FaultSpec(f"ce:{ce_id}", "restart-needed", rate_per_day=1.0) for ce_id in sorted(ces)]
    specs += [
        FaultSpec(f"rb:{rb_id}", "db-corruption", rate_per_day=1.0)
        for rb_id in sorted(rbs)
        if rbs[rb_id].dual_cpu
    ]
    return specs
