"""Resource Broker: matchmaking plus the job state machine with its bookkeeping log."""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional

from .compute import BatchJob, ComputeElement, GramError
from .identity import AuthError, Certificate, authenticate
from .infosys import CE, GisTree, ResourceRecord
from .jdl import JdlTypeError, JobAd
from .sim import EventKind, Simulator

CONDORG_JOB_LIMIT = 512
DEFAULT_RECOVERY_MS = 1_800_000
DEFAULT_RETRY_MS = 300_000
DEFAULT_DETECT_MS = 3_600_000


class JobState(str, Enum):
    SUBMITTED = "SUBMITTED"
    WAITING = "WAITING"
    READY = "READY"
    SCHEDULED = "SCHEDULED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    ABORTED = "ABORTED"
    CLEARED = "CLEARED"


ACTIVE_STATES = frozenset(
    {JobState.SUBMITTED, JobState.WAITING, JobState.READY, JobState.SCHEDULED, JobState.RUNNING}
)
TERMINAL_STATES = frozenset({JobState.DONE, JobState.ABORTED})

_NEXT = {
    JobState.SUBMITTED: {JobState.WAITING},
    JobState.WAITING: {JobState.WAITING, JobState.READY},
    JobState.READY: {JobState.SCHEDULED},
    JobState.SCHEDULED: {JobState.RUNNING},
    JobState.RUNNING: {JobState.DONE},
    JobState.DONE: {JobState.CLEARED},
    JobState.ABORTED: {JobState.CLEARED},
    JobState.CLEARED: set(),
}


def allowed(src: Optional[JobState], dst: JobState) -> bool:
    if src is None:
        return dst is JobState.SUBMITTED
    if dst is JobState.ABORTED:
        return src in ACTIVE_STATES
    return dst in _NEXT[src]


class Refusal(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass
class LbEntry:
    at: int
    src: Optional[JobState]
    dst: JobState
    reason: str = ""

    def as_dict(self) -> dict:
        return {"at": self.at, "from": self.src.value if self.src else None, "to": self.dst.value, "reason": self.reason}


@dataclass
class JobRecord:
    job_id: str
    rb_id: str
    ad: JobAd
    subject: str
    vo: str
    workload: str
    submitted_at: int
    state: Optional[JobState] = None
    matched_ce: Optional[str] = None
    lb_history: list[LbEntry] = field(default_factory=list)
    reason: str = ""
    clean_exit: Optional[bool] = None
    batch: Optional[BatchJob] = None

    def transition(self, now: int, dst: JobState, reason: str = "") -> None:
        if not allowed(self.state, dst):
            raise AssertionError(f"{self.job_id}: illegal transition {self.state} -> {dst}")
        self.lb_history.append(LbEntry(now, self.state, dst, reason))
        self.state = dst
        if dst in TERMINAL_STATES:
            self.reason = reason

    @property
    def active(self) -> bool:
        return self.state in ACTIVE_STATES


@dataclass(frozen=True)
class Candidate:
    ce_id: str
    site: str
    rank: Optional[int]


def match(ad: JobAd, records: Iterable[ResourceRecord], data_sites: Optional[set[str]] = None) -> list[Candidate]:
    """Rank the CEs that accept ``ad``.

    Order: (data-holding sites first when the job has input data), defined
    ranks descending, undefined ranks last, then ``ce_id`` ascending.
    Candidates whose expressions raise a type error are dropped.
    """
    found = []
    for rec in records:
        if rec.kind != CE:
            continue
        if rec.supported_vos and ad.virtual_organisation not in rec.supported_vos:
            continue
        attrs = rec.attributes()
        try:
            if not ad.matches(attrs):
                continue
            rank = ad.rank_of(attrs)
        except JdlTypeError:
            continue
        found.append(Candidate(rec.resource_id, rec.site, rank))

    def key(c: Candidate):
        far = 0 if not ad.input_data or (data_sites is not None and c.site in data_sites) else 1
        return (far, c.rank is None, -(c.rank or 0), c.ce_id)

    return sorted(found, key=key)


@dataclass
class RecoveryRecord:
    trigger_ms: int
    done_ms: int
    active_at_trigger: int
    aborted: int
    trigger: str


class ResourceBroker:
    def __init__(
        self,
        sim: Simulator,
        rb_id: str,
        gis: GisTree,
        ces: Mapping[str, ComputeElement],
        *,
        dual_cpu: bool = True,
        recovery_ms: int = DEFAULT_RECOVERY_MS,
        retry_ms: int = DEFAULT_RETRY_MS,
        detect_ms: Optional[int] = DEFAULT_DETECT_MS,
        overflow: str = "refuse",
        max_active: int = CONDORG_JOB_LIMIT,
        trusted_cas: Iterable[str] = (),
        registries=None,
        data_sites=None,
    ):
        self.sim = sim
        self.rb_id = rb_id
        self.gis = gis
        self.ces = ces
        self.dual_cpu = dual_cpu
        self.recovery_ms = recovery_ms
        self.retry_ms = retry_ms
        self.detect_ms = detect_ms
        self.overflow = overflow
        self.max_active = max_active
        self.trusted_cas = set(trusted_cas)
        self.registries = registries or {}
        # callable(lfns, vo) -> set of sites holding every lfn
        self.data_sites = data_sites
        self.db_state = "ok"
        self.restarting = False
        self.recovering = False
        self.jobs: dict[str, JobRecord] = {}
        self.active: dict[str, JobRecord] = {}
        self.held: deque[JobRecord] = deque()
        self.refusals: Counter[str] = Counter()
        self.peak_active = 0
        self.recoveries: list[RecoveryRecord] = []
        self.recovery_listeners: list = []
        self.corruptions = 0
        self.submission_failures = 0
        self._counter = 0

    @property
    def up(self) -> bool:
        return not (self.restarting or self.recovering)

    # -- submission ---------------------------------------------------------

    def submit(
        self,
        ad: JobAd,
        cert: Certificate,
        *,
        walltime_ms: int,
        unclean_fraction: float = 0.0,
        workload: str = "",
    ) -> str:
        """Accept a job or raise Refusal. Returns the new job id."""
        try:
            if not self.up:
                raise Refusal("rb-down", self.rb_id)
            try:
                authenticate(cert, self.trusted_cas)
            except AuthError as exc:
                raise Refusal(exc.reason, str(exc)) from exc
            problems = ad.validate()
            if problems:
                raise Refusal("invalid-jdl", "; ".join(problems))
            registry = self.registries.get(ad.virtual_organisation)
            if registry is None or cert.subject not in registry.members:
                raise Refusal("not-a-member", f"{cert.subject} / {ad.virtual_organisation}")
            if len(self.active) >= self.max_active and self.overflow == "refuse":
                raise Refusal("at-capacity", f"{self.rb_id} has {len(self.active)} active jobs")
        except Refusal as refusal:
            self.refusals[refusal.reason] += 1
            raise

        self._counter += 1
        job = JobRecord(
            job_id=f"{self.rb_id}-{self._counter:06d}",
            rb_id=self.rb_id,
            ad=ad,
            subject=cert.subject,
            vo=ad.virtual_organisation,
            workload=workload,
            submitted_at=self.sim.now,
        )
        job.batch = BatchJob(
            job.job_id,
            cert.subject,
            job.vo,
            walltime_ms,
            unclean_fraction,
            exit_stream=f"workload:{workload}:exit",
            owner=job,
        )
        self.jobs[job.job_id] = job
        if len(self.active) >= self.max_active:
            self.held.append(job)
        else:
            self._admit(job)
        return job.job_id

    def _admit(self, job: JobRecord) -> None:
        now = self.sim.now
        job.transition(now, JobState.SUBMITTED)
        self.active[job.job_id] = job
        self.peak_active = max(self.peak_active, len(self.active))
        if self.db_state != "ok":
            job.transition(now, JobState.WAITING, "db-corrupted")
            return
        job.transition(now, JobState.WAITING)
        self._try_schedule(job)

    def _try_schedule(self, job: JobRecord) -> None:
        now = self.sim.now
        result = self.gis.query(lambda r: r.kind == CE, now)
        if result.timed_out:
            self._wait(job, "gis-timeout")
            return
        sites = None
        if job.ad.input_data and self.data_sites is not None:
            sites = self.data_sites(job.ad.input_data, job.vo)
        candidates = match(job.ad, [a.record for a in result.records], sites)
        if not candidates:
            self._wait(job, "no-match")
            return
        for cand in candidates:
            ce = self.ces.get(cand.ce_id)
            if ce is None:
                continue
            try:
                ce.gram_submit(job.batch)
            except GramError:
                # the gatekeeper gives the broker no usable diagnosis
                self.submission_failures += 1
                continue
            job.matched_ce = cand.ce_id
            job.transition(now, JobState.READY, cand.ce_id)
            job.transition(now, JobState.SCHEDULED, cand.ce_id)
            return
        self._wait(job, "submission-failed")

    def _wait(self, job: JobRecord, reason: str) -> None:
        job.transition(self.sim.now, JobState.WAITING, reason)
        self.sim.schedule_in(
            self.retry_ms,
            EventKind.JOB_ARRIVAL,
            self._on_retry,
            {"rb": self.rb_id, "job": job.job_id, "retry": True},
        )

    def _on_retry(self, event) -> None:
        job = self.jobs[event.payload["job"]]
        if job.state is not JobState.WAITING or self.db_state != "ok":
            return
        if not self.up:
            self.sim.schedule_in(self.retry_ms, EventKind.JOB_ARRIVAL, self._on_retry, event.payload)
            return
        self._try_schedule(job)

    # -- notifications from compute elements ---------------------------------

    def job_started(self, job: JobRecord) -> None:
        job.transition(self.sim.now, JobState.RUNNING, job.matched_ce or "")

    def job_finished(self, job: JobRecord, clean: bool) -> None:
        job.clean_exit = clean
        job.transition(self.sim.now, JobState.DONE, "clean" if clean else "unclean-exit")
        self._retire(job)

    def job_lost(self, job: JobRecord, reason: str) -> None:
        job.transition(self.sim.now, JobState.ABORTED, reason)
        self._retire(job)

    def _retire(self, job: JobRecord) -> None:
        self.active.pop(job.job_id, None)
        self._admit_held()

    def _admit_held(self) -> None:
        while self.held and len(self.active) < self.max_active and self.up:
            self._admit(self.held.popleft())

    # -- faults ---------------------------------------------------------------

    def corrupt(self) -> bool:
        """Silently corrupt the job database. Returns False if already corrupted or down."""
        if self.db_state != "ok" or not self.up:
            return False
        self.db_state = "corrupted"
        self.corruptions += 1
        if self.detect_ms is not None:
            self.sim.schedule_in(
                self.detect_ms,
                EventKind.FAULT_FIRE,
                lambda e: self.recover(trigger="auto-detect"),
                {"rb": self.rb_id, "phase": "corruption-detected"},
            )
        return True

    def recover(self, trigger: str = "operator", on_done=None):
        """Wipe the job database and restart the daemons. Every active job is lost."""
        if self.db_state != "corrupted" or self.recovering:
            return None
        now = self.sim.now
        self.recovering = True
        lost = list(self.active.values())
        for job in lost:
            ce = self.ces.get(job.matched_ce) if job.matched_ce else None
            if ce is not None and job.state in (JobState.SCHEDULED, JobState.RUNNING):
                ce.cancel(job.job_id)
            job.transition(now, JobState.ABORTED, "rb-recovery")
        self.active.clear()
        record = RecoveryRecord(now, now + self.recovery_ms, len(lost), len(lost), trigger)
        self.recoveries.append(record)

        def done(event):
            self.db_state = "ok"
            self.recovering = False
            for listener in self.recovery_listeners:
                listener(record)
            self._admit_held()
            if on_done is not None:
                on_done()

        return self.sim.schedule_in(
            self.recovery_ms, EventKind.SERVICE_RESTART_DONE, done, {"rb": self.rb_id, "phase": "recovered"}
        )

    def restart(self, duration_ms: int, on_done=None) -> bool:
        if not self.up:
            return False
        self.restarting = True

        def done(event):
            self.restarting = False
            self._admit_held()
            if on_done is not None:
                on_done()

        self.sim.schedule_in(duration_ms, EventKind.SERVICE_RESTART_DONE, done, {"rb": self.rb_id, "phase": "restarted"})
        return True

    def check_invariants(self) -> None:
        assert len(self.active) <= self.max_active
        for job in self.jobs.values():
            prev_state, prev_t = None, 0
            for entry in job.lb_history:
                assert entry.src == prev_state and allowed(entry.src, entry.dst), job.job_id
                assert entry.at >= prev_t
                prev_state, prev_t = entry.dst, entry.at
