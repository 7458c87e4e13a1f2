import pytest

from gridtb.broker import JobState, Refusal, ResourceBroker, allowed, match
from gridtb.compute import ComputeElement
from gridtb.identity import Certificate, MapFile, VoRegistry
from gridtb.infosys import CE, GisTree, ResourceRecord
from gridtb.jdl import parse_jdl
from gridtb.sim import Simulator

CA = "/CN=CA"
USER = "/CN=user"
HOUR = 3_600_000


class Harness:
    """One site, one CE, one RB, wired like the grid runner."""

    def __init__(self, *, wns=2, max_active=512, dual_cpu=True, detect_ms=HOUR, overflow="refuse", budget=10**6):
        self.sim = Simulator(seed=1)
        self.gis = GisTree(refresh_ms=30_000)
        self.gis.register_site("CERN")
        regs = {"atlas": VoRegistry("atlas", {USER})}
        self.ce = ComputeElement(
            self.sim, "ce1", "CERN", worker_nodes=wns, gass_cache_inodes=budget,
            mapfile=MapFile({"atlas": 10}), registries=regs, listener=self, gis=self.gis,
        )
        self.ce.publish(immediate=True)
        self.rb = ResourceBroker(
            self.sim, "rb1", self.gis, {"ce1": self.ce}, dual_cpu=dual_cpu, detect_ms=detect_ms,
            overflow=overflow, max_active=max_active, trusted_cas=[CA], registries=regs,
        )

    def on_job_started(self, job, ce):
        self.rb.job_started(job.owner)

    def on_job_finished(self, job, ce, clean):
        self.rb.job_finished(job.owner, clean)

    def on_job_lost(self, job, ce, reason):
        self.rb.job_lost(job.owner, reason)

    def submit(self, jdl='Executable = "x"; VirtualOrganisation = "atlas";', walltime=HOUR, cert=None):
        return self.rb.submit(parse_jdl(jdl), cert or Certificate(USER, CA), walltime_ms=walltime)

    def states(self, job_id):
        return [e.dst for e in self.rb.jobs[job_id].lb_history]


def rec(rid, site, free=1, ett=0, vos=()):
    return ResourceRecord(rid, site, CE, total_cpus=4, free_cpus=free, estimated_traversal_time_s=ett, supported_vos=vos)


def test_match_orders_by_rank_then_ce_id():
    ad = parse_jdl('Executable = "x"; VirtualOrganisation = "atlas"; Rank = other.FreeCPUs;')
    got = match(ad, [rec("b", "S1", 2), rec("a", "S2", 2), rec("c", "S3", 3)])
    assert [c.ce_id for c in got] == ["c", "a", "b"]


def test_match_filters_vo_and_requirements():
    ad = parse_jdl('Executable = "x"; VirtualOrganisation = "atlas"; Requirements = other.FreeCPUs > 0;')
    got = match(ad, [rec("a", "S", 0), rec("b", "S", 1, vos=("cms",)), rec("c", "S", 1, vos=("atlas",))])
    assert [c.ce_id for c in got] == ["c"]


def test_match_puts_data_sites_first():
    ad = parse_jdl('Executable = "x"; VirtualOrganisation = "atlas";')
    recs = [rec("a", "S1", ett=0), rec("b", "S2", ett=100)]
    assert [c.ce_id for c in match(ad, recs, data_sites={"S2"})] == ["a", "b"]
    ad.input_data = ["prod/f1"]
    assert [c.ce_id for c in match(ad, recs, data_sites={"S2"})] == ["b", "a"]


def test_undefined_rank_sorts_last():
    ad = parse_jdl('Executable = "x"; VirtualOrganisation = "atlas"; Rank = other.Bogus;')
    got = match(ad, [rec("b", "S"), rec("a", "S")])
    assert [c.rank for c in got] == [None, None]
    assert [c.ce_id for c in got] == ["a", "b"]


def test_job_runs_through_state_machine():
    h = Harness()
    jid = h.submit(walltime=1000)
    h.sim.run_until(2000)
    assert h.states(jid) == [
        JobState.SUBMITTED, JobState.WAITING, JobState.READY, JobState.SCHEDULED, JobState.RUNNING, JobState.DONE,
    ]
    assert h.rb.active == {}


def test_transition_table():
    assert allowed(None, JobState.SUBMITTED)
    assert not allowed(JobState.DONE, JobState.RUNNING)
    assert not allowed(JobState.ABORTED, JobState.WAITING)
    assert not allowed(JobState.SUBMITTED, JobState.RUNNING)


def test_refusals_are_counted_by_reason():
    h = Harness()
    with pytest.raises(Refusal) as exc:
        h.submit(cert=Certificate(USER, "/CN=Other"))
    assert exc.value.reason == "unknown-ca"
    with pytest.raises(Refusal) as exc:
        h.submit(cert=Certificate("/CN=stranger", CA))
    assert exc.value.reason == "not-a-member"
    with pytest.raises(Refusal) as exc:
        h.submit(jdl='Executable = "x";')
    assert exc.value.reason == "invalid-jdl"
    assert h.rb.refusals == {"unknown-ca": 1, "not-a-member": 1, "invalid-jdl": 1}
    assert h.rb.jobs == {}


def test_ceiling_refuses_beyond_max_active():
    h = Harness(max_active=512, wns=1)
    for _ in range(512):
        h.submit(walltime=10 * HOUR)
    for _ in range(88):
        with pytest.raises(Refusal) as exc:
            h.submit()
        assert exc.value.reason == "at-capacity"
    assert len(h.rb.active) == 512
    assert h.rb.refusals["at-capacity"] == 88


def test_queue_overflow_holds_and_admits_later():
    h = Harness(max_active=2, wns=1, overflow="queue")
    ids = [h.submit(walltime=1000) for _ in range(3)]
    assert len(h.rb.held) == 1
    h.sim.run_until(1000)
    assert not h.rb.held
    h.sim.run_until(3000)
    assert all(h.rb.jobs[j].state is JobState.DONE for j in ids)


def test_no_match_retries_after_retry_interval():
    h = Harness()
    jid = h.submit(jdl='Executable = "x"; VirtualOrganisation = "atlas"; Requirements = other.FreeCPUs > 100;')
    assert h.rb.jobs[jid].state is JobState.WAITING
    h.sim.run_until(300_000)
    waits = [e for e in h.rb.jobs[jid].lb_history if e.dst is JobState.WAITING]
    assert len(waits) == 3  # admission, first no-match, retry no-match


def test_corruption_freezes_waiting_jobs_until_recovery_aborts_all_active():
    h = Harness(wns=1, detect_ms=HOUR)
    running = [h.submit(walltime=10 * HOUR) for _ in range(2)]
    h.sim.run_until(10)
    assert h.rb.corrupt()
    assert not h.rb.corrupt()
    frozen = h.submit()
    assert h.rb.jobs[frozen].state is JobState.WAITING
    h.sim.run_until(HOUR + 9)
    assert h.rb.jobs[frozen].state is JobState.WAITING
    h.sim.run_until(HOUR + 10)
    for jid in running + [frozen]:
        job = h.rb.jobs[jid]
        assert (job.state, job.reason) == (JobState.ABORTED, "rb-recovery")
    rec0 = h.rb.recoveries[0]
    assert rec0.active_at_trigger == rec0.aborted == 3
    assert h.ce.batch.running == {}
    with pytest.raises(Refusal) as exc:
        h.submit()
    assert exc.value.reason == "rb-down"
    h.sim.run_until(HOUR + 10 + 1_800_000)
    assert h.rb.up
    h.submit()


def test_gram_failure_is_opaque_and_retried():
    h = Harness(budget=100)
    jid = h.submit()
    assert h.rb.jobs[jid].state is JobState.WAITING
    assert h.rb.submission_failures == 1
    assert h.ce.wedged_failures == 1
