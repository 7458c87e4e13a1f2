import pytest

from gridtb.compute import BatchJob, CleanupConfig, ComputeElement, GramError
from gridtb.identity import MapFile, VoRegistry
from gridtb.infosys import GisTree
from gridtb.sim import Simulator

SUBJ = "/CN=u"


class Recorder:
    def __init__(self):
        self.started, self.finished, self.lost = [], [], []

    def on_job_started(self, job, ce):
        self.started.append(job.job_id)

    def on_job_finished(self, job, ce, clean):
        self.finished.append((job.job_id, clean))

    def on_job_lost(self, job, ce, reason):
        self.lost.append((job.job_id, reason))


def make_ce(sim, *, wns=2, budget=10_000, f=100, leak=0.1, pool=50, cleanup=None, gis=None, vos=()):
    rec = Recorder()
    ce = ComputeElement(
        sim,
        "ce1",
        "CERN",
        worker_nodes=wns,
        cpus_per_node=2,
        gass_cache_inodes=budget,
        files_per_job=f,
        clean_leak_fraction=leak,
        cleanup=cleanup,
        mapfile=MapFile({"atlas": pool}),
        registries={"atlas": VoRegistry("atlas", {SUBJ, "/CN=v", "/CN=w"})},
        supported_vos=vos,
        listener=rec,
        gis=gis,
    )
    return ce, rec


def job(i, walltime=1000, unclean=0.0, subject=SUBJ):
    return BatchJob(f"j{i}", subject, "atlas", walltime, unclean, exit_stream="workload:t:exit")


def test_fifo_on_two_dual_cpu_nodes():
    sim = Simulator()
    ce, rec = make_ce(sim)
    for i in range(5):
        ce.gram_submit(job(i))
    sim.run_until(0)
    assert rec.started == ["j0", "j1", "j2", "j3"]
    sim.run_until(1000)
    assert rec.started[-1] == "j4"
    sim.run_until(2000)
    assert [j for j, _ in rec.finished] == ["j0", "j1", "j2", "j3", "j4"]
    assert ce.peak_running == 4


def test_exhaustion_at_floor_of_budget_over_f():
    sim = Simulator()
    ce, _ = make_ce(sim, budget=10_000, f=100)
    for i in range(10_000 // 100):
        ce.gram_submit(job(i, unclean=1.0))
    sim.run_until(5)
    with pytest.raises(GramError) as exc:
        ce.gram_submit(job(100, unclean=1.0))
    assert exc.value.reason == "gram-wedged"
    assert ce.first_exhaustion_ms == 5
    assert ce.state == "gram-wedged"


def test_unclean_exit_leaves_all_files_clean_exit_leaves_a_fraction():
    sim = Simulator()
    ce, rec = make_ce(sim, f=100, leak=0.1)
    ce.gram_submit(job(0, unclean=1.0))
    ce.gram_submit(job(1, unclean=0.0))
    sim.run_until(2000)
    assert sorted(rec.finished) == [("j0", False), ("j1", True)]
    assert ce.gass_cache.orphaned_inodes == 100 + 10
    ce.check_invariants()


def test_pool_exhaustion_fails_at_gatekeeper():
    sim = Simulator()
    ce, _ = make_ce(sim, pool=1)
    ce.gram_submit(job(0))
    with pytest.raises(GramError) as exc:
        ce.gram_submit(job(1, subject="/CN=v"))
    assert exc.value.reason == "pool-exhausted"
    assert ce.pool_failures == 1
    assert ce.gass_cache.inodes_used == 100


def test_vo_filter():
    sim = Simulator()
    ce, _ = make_ce(sim, vos=("cms",))
    with pytest.raises(GramError) as exc:
        ce.gram_submit(job(0))
    assert exc.value.reason == "vo-not-supported"


def test_cleanup_duration_oracle():
    sim = Simulator()
    ce, _ = make_ce(sim, budget=20_000, cleanup=CleanupConfig(None, 600_000, 100))
    ce.wedge_external(9000)
    ev = ce.gass_cache_cleanup()
    assert ev.fire_at == 600_000 + 9000 * 100
    sim.run_until(ev.fire_at)
    assert ce.gass_cache.inodes_used == 0
    assert ce.cleanups[0].orphans == 9000


def test_cleanup_kills_running_jobs_keeps_queued_and_hides_ce():
    sim = Simulator()
    gis = GisTree(refresh_ms=30_000)
    gis.register_site("CERN")
    ce, rec = make_ce(sim, wns=1, gis=gis)
    ce.publish(immediate=True)
    for i in range(3):
        ce.gram_submit(job(i, walltime=10**7))
    sim.run_until(100)
    assert rec.started == ["j0", "j1"]
    ev = ce.gass_cache_cleanup()
    assert sorted(rec.lost) == [("j0", "lost-to-cleanup"), ("j1", "lost-to-cleanup")]
    assert [r.record.resource_id for r in gis.query(lambda r: True, 100).records] == []
    with pytest.raises(GramError):
        ce.gram_submit(job(9))
    sim.run_until(ev.fire_at - 1)
    assert rec.started == ["j0", "j1"]
    assert gis.query(lambda r: True, ev.fire_at - 1).records == []
    sim.run_until(ev.fire_at)
    assert rec.started[-1] == "j2"
    assert not ce.cleaning


def test_auto_cleanup_threshold():
    sim = Simulator()
    ce, _ = make_ce(sim, budget=1000, f=100, cleanup=CleanupConfig(0.5, 1000, 1))
    ce.wedge_external(499)
    assert not ce.cleanups
    ce.wedge_external(1)
    assert ce.cleanups and ce.cleanups[0].trigger == "auto"


def test_cancel_releases_cpu_and_orphans_files():
    sim = Simulator()
    ce, rec = make_ce(sim, wns=1)
    ce.gram_submit(job(0, walltime=10_000))
    sim.run_until(1)
    assert ce.cancel("j0")
    assert ce.gass_cache.orphaned_inodes == 100
    sim.run_until(20_000)
    assert rec.finished == []
    ce.check_invariants()
