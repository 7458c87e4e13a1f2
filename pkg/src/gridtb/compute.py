"""Gatekeeper with a shared gass_cache area, in front of a FIFO batch system.

Every accepted job creates ``files_per_job`` tiny files in the gass_cache area
shared by the gatekeeper and all worker nodes. The area runs out of i-nodes
long before it runs out of bytes; once fewer than ``files_per_job`` i-nodes
are free every submission fails.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol

from .identity import AuthError, MapFile, authorize
from .infosys import CE, GisTree, ResourceRecord
from .sim import EventKind, Simulator

DEFAULT_FILES_PER_JOB = 128
DEFAULT_CLEAN_LEAK_FRACTION = 0.1
DEFAULT_CLEANUP_BASE_MS = 600_000
DEFAULT_CLEANUP_PER_INODE_MS = 100
TINY_FILE_BYTES = 100


class GramError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass
class BatchJob:
    job_id: str
    subject: str
    vo: str
    walltime_ms: int
    unclean_fraction: float = 0.0
    exit_stream: str = "exit"
    owner: Any = None


class BatchListener(Protocol):
    def on_job_started(self, job: BatchJob, ce: "ComputeElement") -> None: ...

    def on_job_finished(self, job: BatchJob, ce: "ComputeElement", clean: bool) -> None: ...

    def on_job_lost(self, job: BatchJob, ce: "ComputeElement", reason: str) -> None: ...


class GassCacheArea:
    def __init__(self, inode_budget: int):
        self.inode_budget = inode_budget
        self.inodes_used = 0
        self.live_jobs: dict[str, int] = {}
        self.orphaned_inodes = 0
        self.charged_total = 0
        self.freed_total = 0

    @property
    def free_inodes(self) -> int:
        return self.inode_budget - self.inodes_used

    @property
    def bytes_used(self) -> int:
        return self.inodes_used * TINY_FILE_BYTES

    def charge(self, job_id: str, count: int) -> None:
        if count > self.free_inodes:
            raise GramError("gram-wedged", f"{self.free_inodes} i-nodes free")
        self.live_jobs[job_id] = count
        self.inodes_used += count
        self.charged_total += count

    def charge_orphans(self, count: int) -> int:
        count = max(0, min(count, self.free_inodes))
        self.orphaned_inodes += count
        self.inodes_used += count
        self.charged_total += count
        return count

    def release(self, job_id: str, leftover: int) -> None:
        """Job is gone: ``leftover`` of its files stay behind, the rest are deleted."""
        held = self.live_jobs.pop(job_id)
        leftover = min(held, leftover)
        self.orphaned_inodes += leftover
        self.inodes_used -= held - leftover
        self.freed_total += held - leftover

    def clean(self) -> int:
        removed = self.orphaned_inodes
        self.inodes_used -= removed
        self.freed_total += removed
        self.orphaned_inodes = 0
        return removed


@dataclass
class WorkerNode:
    name: str
    cpus: int = 2
    busy: int = 0


@dataclass
class _Running:
    job: BatchJob
    node: WorkerNode
    started_at: int
    event: Any


@dataclass
class CleanupConfig:
    auto_threshold: Optional[float] = None
    base_ms: int = DEFAULT_CLEANUP_BASE_MS
    per_inode_ms: int = DEFAULT_CLEANUP_PER_INODE_MS


@dataclass
class CleanupRecord:
    started_ms: int
    done_ms: int
    orphans: int
    jobs_lost: int
    trigger: str


@dataclass
class BatchSystem:
    worker_nodes: list[WorkerNode]
    queue: deque = field(default_factory=deque)
    running: dict[str, _Running] = field(default_factory=dict)

    @property
    def total_cpus(self) -> int:
        return sum(n.cpus for n in self.worker_nodes)

    @property
    def free_cpus(self) -> int:
        return sum(n.cpus - n.busy for n in self.worker_nodes)

    def free_node(self) -> Optional[WorkerNode]:
        for node in self.worker_nodes:
            if node.busy < node.cpus:
                return node
        return None


class ComputeElement:
    def __init__(
        self,
        sim: Simulator,
        ce_id: str,
        site: str,
        worker_nodes: int,
        cpus_per_node: int = 2,
        gass_cache_inodes: int = 1_000_000,
        files_per_job: int = DEFAULT_FILES_PER_JOB,
        clean_leak_fraction: float = DEFAULT_CLEAN_LEAK_FRACTION,
        cleanup: Optional[CleanupConfig] = None,
        mapfile: Optional[MapFile] = None,
        registries=None,
        supported_vos: tuple[str, ...] = (),
        listener: Optional[BatchListener] = None,
        gis: Optional[GisTree] = None,
    ):
        self.sim = sim
        self.ce_id = ce_id
        self.site = site
        self.gass_cache = GassCacheArea(gass_cache_inodes)
        self.batch = BatchSystem(
            [WorkerNode(f"{ce_id}-wn{i:03d}", cpus_per_node) for i in range(worker_nodes)]
        )
        self.files_per_job = files_per_job
        self.clean_leak_fraction = clean_leak_fraction
        self.cleanup = cleanup or CleanupConfig()
        self.mapfile = mapfile or MapFile({})
        self.registries = registries or {}
        self.supported_vos = tuple(supported_vos)
        self.listener = listener
        self.gis = gis
        self.restarting = False
        self.cleaning = False
        self._tick_pending = False
        self.first_exhaustion_ms: Optional[int] = None
        self.wedged_failures = 0
        self.pool_failures = 0
        self.cleanups: list[CleanupRecord] = []
        self.peak_running = 0

    @property
    def state(self) -> str:
        if self.restarting or self.cleaning:
            return "restarting"
        if self.gass_cache.free_inodes < self.files_per_job:
            return "gram-wedged"
        return "up"

    @property
    def visible(self) -> bool:
        return not self.cleaning

    def record(self) -> ResourceRecord:
        queued = sum(j.walltime_ms for j in self.batch.queue) // 1000
        total = self.batch.total_cpus
        return ResourceRecord(
            resource_id=self.ce_id,
            site=self.site,
            kind=CE,
            total_cpus=total,
            free_cpus=self.batch.free_cpus,
            queue_length=len(self.batch.queue),
            estimated_traversal_time_s=queued // total if total else 0,
            supported_vos=self.supported_vos,
        )

    def publish(self, immediate: bool = False) -> None:
        if self.gis is not None and self.visible:
            self.gis.publish(self.record(), self.sim.now, immediate=immediate)

    # -- submission ---------------------------------------------------------

    def gram_submit(self, job: BatchJob) -> None:
        if self.restarting or self.cleaning:
            raise GramError("gatekeeper-down", self.ce_id)
        if self.supported_vos and job.vo not in self.supported_vos:
            raise GramError("vo-not-supported", job.vo)
        if self.gass_cache.free_inodes < self.files_per_job:
            self.wedged_failures += 1
            if self.first_exhaustion_ms is None:
                self.first_exhaustion_ms = self.sim.now
            raise GramError("gram-wedged", f"{self.gass_cache.free_inodes} i-nodes free")
        try:
            authorize(job.subject, job.vo, self.mapfile, self.registries, self.sim.now)
        except AuthError as exc:
            self.pool_failures += exc.reason == "pool-exhausted"
            raise GramError(exc.reason, str(exc)) from exc
        self.gass_cache.charge(job.job_id, self.files_per_job)
        self.mapfile.job_started(job.subject, job.vo)
        self.batch.queue.append(job)
        self.publish()
        self._request_tick()

    # -- batch --------------------------------------------------------------

    def _request_tick(self) -> None:
        if not self._tick_pending:
            self._tick_pending = True
            self.sim.schedule(
                self.sim.now, EventKind.BATCH_DISPATCH, self._on_tick, {"ce": self.ce_id, "phase": "tick"}
            )

    def _on_tick(self, event) -> None:
        self._tick_pending = False
        self.batch_tick()

    def batch_tick(self) -> list[str]:
        """Start queued jobs on free CPUs in FIFO order; return started job ids."""
        started = []
        if self.cleaning:
            return started
        while self.batch.queue:
            node = self.batch.free_node()
            if node is None:
                break
            job = self.batch.queue.popleft()
            node.busy += 1
            event = self.sim.schedule_in(
                job.walltime_ms,
                EventKind.BATCH_DISPATCH,
                self._on_complete,
                {"ce": self.ce_id, "phase": "complete", "job": job.job_id},
            )
            self.batch.running[job.job_id] = _Running(job, node, self.sim.now, event)
            started.append(job.job_id)
            if self.listener is not None:
                self.listener.on_job_started(job, self)
        self.peak_running = max(self.peak_running, len(self.batch.running))
        if started:
            self.publish()
        return started

    def leftover_on_clean_exit(self) -> int:
        return math.floor(self.clean_leak_fraction * self.files_per_job)

    def _on_complete(self, event) -> None:
        run = self.batch.running.pop(event.payload["job"])
        run.node.busy -= 1
        job = run.job
        clean = not self.sim.rng(job.exit_stream).bernoulli(job.unclean_fraction)
        leftover = self.leftover_on_clean_exit() if clean else self.files_per_job
        self.gass_cache.release(job.job_id, leftover)
        self.mapfile.job_ended(job.subject, job.vo, self.sim.now)
        event.payload["clean"] = clean
        if self.listener is not None:
            self.listener.on_job_finished(job, self, clean)
        self._check_auto_cleanup()
        self.publish()
        self._request_tick()

    def cancel(self, job_id: str) -> bool:
        """Drop a job the broker no longer tracks; its files are left behind."""
        for job in self.batch.queue:
            if job.job_id == job_id:
                self.batch.queue.remove(job)
                break
        else:
            run = self.batch.running.pop(job_id, None)
            if run is None:
                return False
            run.event.cancel()
            run.node.busy -= 1
            job = run.job
        self.gass_cache.release(job_id, self.files_per_job)
        self.mapfile.job_ended(job.subject, job.vo, self.sim.now)
        self._check_auto_cleanup()
        self.publish()
        self._request_tick()
        return True

    # -- faults and maintenance ----------------------------------------------

    def _check_auto_cleanup(self) -> None:
        threshold = self.cleanup.auto_threshold
        if threshold is None or self.cleaning:
            return
        if self.gass_cache.orphaned_inodes >= threshold * self.gass_cache.inode_budget:
            self.gass_cache_cleanup(trigger="auto")

    def wedge_external(self, inodes: Optional[int] = None) -> int:
        count = self.gass_cache.free_inodes if inodes is None else inodes
        charged = self.gass_cache.charge_orphans(count)
        self._check_auto_cleanup()
        return charged

    def gass_cache_cleanup(self, trigger: str = "operator", on_done=None):
        """Wipe leftover files. Running jobs die and the CE leaves the grid meanwhile."""
        if self.cleaning:
            return None
        now = self.sim.now
        self.cleaning = True
        lost = []
        for job_id, run in list(self.batch.running.items()):
            run.event.cancel()
            run.node.busy -= 1
            self.gass_cache.release(job_id, self.files_per_job)
            self.mapfile.job_ended(run.job.subject, run.job.vo, now)
            lost.append(run.job)
        self.batch.running.clear()
        if self.gis is not None:
            self.gis.withdraw(self.ce_id, now)
        orphans = self.gass_cache.orphaned_inodes
        duration = self.cleanup.base_ms + self.cleanup.per_inode_ms * orphans
        record = CleanupRecord(now, now + duration, orphans, len(lost), trigger)
        self.cleanups.append(record)
        for job in lost:
            if self.listener is not None:
                self.listener.on_job_lost(job, self, "lost-to-cleanup")

        def done(event):
            event.payload["removed"] = self.gass_cache.clean()
            self.cleaning = False
            self.publish()
            self._request_tick()
            if on_done is not None:
                on_done()

        return self.sim.schedule(
            now + duration, EventKind.CLEANUP_DONE, done, {"ce": self.ce_id, "orphans": orphans}
        )

    def check_invariants(self) -> None:
        gc = self.gass_cache
        assert gc.inodes_used == gc.orphaned_inodes + sum(gc.live_jobs.values())
        assert 0 <= gc.inodes_used <= gc.inode_budget
        assert gc.charged_total - gc.freed_total == gc.inodes_used
        assert len(self.batch.running) <= self.batch.total_cpus
