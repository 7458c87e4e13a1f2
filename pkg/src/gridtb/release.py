"""Staged release procedure for middleware tags.

A tag moves TENTATIVE -> DEV_TESTED -> CORE_TESTED -> APPLICATION, one gate at
a time. Any failing gate rejects the tag for good; the fixed packages come
back as a new tag. A few sanctioned kinds of update (see ``BYPASS_KINDS``)
skip the procedure entirely.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from .sim import EventKind, RngStream, Simulator, seconds_to_ms


class TagState(str, Enum):
    TENTATIVE = "TENTATIVE"
    DEV_TESTED = "DEV_TESTED"
    CORE_TESTED = "CORE_TESTED"
    APPLICATION = "APPLICATION"
    REJECTED = "REJECTED"


GATES = ("dev", "core", "application")
# gate -> (required state, state on success)
GATE_STEPS = {
    "dev": (TagState.TENTATIVE, TagState.DEV_TESTED),
    "core": (TagState.DEV_TESTED, TagState.CORE_TESTED),
    "application": (TagState.CORE_TESTED, TagState.APPLICATION),
}
BYPASS_KINDS = frozenset({"application-software", "security-patch", "ca-update"})
TESTBEDS = ("development", "core-sites", "application")

_VERSION_RE = re.compile(r"^[0-9]+(\.[0-9A-Za-z]+)*(-[0-9A-Za-z.]+)?$")


class ReleaseError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass
class GateLogEntry:
    at: int
    gate: str
    outcome: str
    failed: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"at": self.at, "gate": self.gate, "outcome": self.outcome, "failed": self.failed}


@dataclass
class ReleaseTag:
    tag_id: int
    packages: tuple[tuple[str, str], ...]
    name: str = ""
    state: TagState = TagState.TENTATIVE
    gate_log: list[GateLogEntry] = field(default_factory=list)
    proposed_at: int = 0

    def passed(self, gate: str) -> bool:
        return any(e.gate == gate and e.outcome == "pass" for e in self.gate_log)


@dataclass(frozen=True)
class BypassItem:
    kind: str
    testbed: str
    name: str = ""


class ReleaseManager:
    def __init__(self):
        self.tags: dict[int, ReleaseTag] = {}
        self.installed: dict[str, list[dict]] = {tb: [] for tb in TESTBEDS}
        self._next_id = 1

    def propose_tag(self, packages, name: str = "", now: int = 0) -> ReleaseTag:
        pkgs = tuple((str(n), str(v)) for n, v in packages)
        if not pkgs:
            raise ReleaseError("empty-package-set")
        names = [n for n, _ in pkgs]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ReleaseError("duplicate-package", ", ".join(dupes))
        for n, v in pkgs:
            if not n or not _VERSION_RE.match(v):
                raise ReleaseError("bad-version", f"{n} {v!r}")
        tag = ReleaseTag(self._next_id, pkgs, name or f"tag-{self._next_id}", proposed_at=now)
        self._next_id += 1
        self.tags[tag.tag_id] = tag
        return tag

    def run_gate(self, tag: ReleaseTag, gate: str, results: Mapping[str, bool], now: int = 0) -> ReleaseTag:
        """Apply test verdicts (package -> passed). Packages without a verdict pass."""
        if gate not in GATE_STEPS:
            raise ReleaseError("unknown-gate", gate)
        required, advanced = GATE_STEPS[gate]
        if tag.state is not required:
            raise ReleaseError("wrong-state", f"{gate} gate needs {required.value}, tag is {tag.state.value}")
        failed = sorted(n for n, _ in tag.packages if not results.get(n, True))
        if failed:
            tag.gate_log.append(GateLogEntry(now, gate, "fail", failed))
            tag.state = TagState.REJECTED
        else:
            tag.gate_log.append(GateLogEntry(now, gate, "pass"))
            tag.state = advanced
        return tag

    def bypass_install(self, item: BypassItem, now: int = 0) -> dict:
        if item.kind not in BYPASS_KINDS:
            raise ReleaseError("unsanctioned-kind", item.kind)
        if item.testbed not in self.installed:
            raise ReleaseError("unknown-testbed", item.testbed)
        record = {"at": now, "kind": item.kind, "name": item.name, "testbed": item.testbed}
        self.installed[item.testbed].append(record)
        return record


def _draw_verdicts(tag: ReleaseTag, gate: str, failure_prob, rng: RngStream) -> dict[str, bool]:
    out = {}
    for name, _ in tag.packages:
        p = failure_prob.get(name, 0.0) if isinstance(failure_prob, Mapping) else float(failure_prob)
        out[name] = not rng.bernoulli(p)
    return out


def _normalize_verdicts(raw) -> dict[str, bool]:
    if raw is None:
        return {}
    if isinstance(raw, list):
        return {name: False for name in raw}
    return {k: (v is True or v == "pass") for k, v in raw.items()}


DEFAULT_GATE_DURATION_S = {"dev": 4 * 3600, "core": 8 * 3600, "application": 4 * 3600}


class ReleasePlan:
    """Drive a release plan through simulated time.

    Plan schema::

        {"gate_duration_s": {"dev": s, "core": s, "application": s},
         "tags": [{"name", "packages": [[name, version], ...], "proposed_at_s",
                   "gate_verdicts": {gate: {package: bool | "pass" | "fail"}}
                   | "failure_prob": p | {package: p}}],
         "bypasses": [{"kind", "testbed", "name", "at_s"}]}
    """

    def __init__(self, sim: Simulator, plan: Mapping[str, Any]):
        self.sim = sim
        self.plan = plan
        self.manager = ReleaseManager()
        durations = dict(DEFAULT_GATE_DURATION_S)
        durations.update(plan.get("gate_duration_s", {}))
        self.gate_ms = {g: seconds_to_ms(durations[g]) for g in GATES}
        self.refused: list[dict] = []
        self.promoted_at: dict[int, int] = {}
        self.errors: list[str] = []

    def start(self) -> None:
        for index, spec in enumerate(self.plan.get("tags", [])):
            at = seconds_to_ms(spec.get("proposed_at_s", 0))
            self.sim.schedule(
                at,
                EventKind.GATE_EVALUATED,
                lambda e, spec=spec, index=index: self._propose(spec, index),
                {"tag_index": index, "gate": "propose"},
            )
        for spec in self.plan.get("bypasses", []):
            self.sim.schedule(
                seconds_to_ms(spec.get("at_s", 0)),
                EventKind.GATE_EVALUATED,
                lambda e, spec=spec: self._bypass(spec),
                {"gate": "bypass", "kind": spec["kind"]},
            )

    def _propose(self, spec, index: int) -> None:
        try:
            tag = self.manager.propose_tag(spec["packages"], spec.get("name", ""), self.sim.now)
        except ReleaseError as exc:
            self.errors.append(f"tags/{index}: {exc}")
            return
        self._next_gate(tag, spec, index)

    def _next_gate(self, tag: ReleaseTag, spec, index: int) -> None:
        for gate in GATES:
            if GATE_STEPS[gate][0] is tag.state:
                self.sim.schedule_in(
                    self.gate_ms[gate],
                    EventKind.GATE_EVALUATED,
                    lambda e, gate=gate: self._evaluate(tag, gate, spec, index),
                    {"tag": tag.tag_id, "gate": gate},
                )
                return

    def _evaluate(self, tag: ReleaseTag, gate: str, spec, index: int) -> None:
        if "gate_verdicts" in spec:
            verdicts = _normalize_verdicts(spec["gate_verdicts"].get(gate))
        elif "failure_prob" in spec:
            rng = self.sim.rng(f"release:tag{index}")
            verdicts = _draw_verdicts(tag, gate, spec["failure_prob"], rng)
        else:
            verdicts = {}
        self.manager.run_gate(tag, gate, verdicts, self.sim.now)
        if tag.state is TagState.APPLICATION:
            self.promoted_at[tag.tag_id] = self.sim.now
        elif tag.state is not TagState.REJECTED:
            self._next_gate(tag, spec, index)

    def _bypass(self, spec) -> None:
        item = BypassItem(spec["kind"], spec.get("testbed", "application"), spec.get("name", ""))
        try:
            self.manager.bypass_install(item, self.sim.now)
        except ReleaseError as exc:
            self.refused.append({"at": self.sim.now, "kind": item.kind, "name": item.name, "reason": exc.reason})

    def summary(self) -> dict:
        tags = []
        for tag in self.manager.tags.values():
            tags.append(
                {
                    "tag_id": tag.tag_id,
                    "name": tag.name,
                    "state": tag.state.value,
                    "proposed_at_ms": tag.proposed_at,
                    "application_at_ms": self.promoted_at.get(tag.tag_id),
                    "gate_log": [e.as_dict() for e in tag.gate_log],
                }
            )
        return {
            "tags": tags,
            "bypass_installed": self.manager.installed,
            "bypass_refused": self.refused,
            "errors": self.errors,
        }
