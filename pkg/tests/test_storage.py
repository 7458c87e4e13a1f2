import pytest

from gridtb.sim import Simulator
from gridtb.storage import (
    Link,
    MssBackend,
    Partition,
    Pfn,
    ReplicaCatalog,
    ReplicationStats,
    StorageElement,
    StorageError,
    compose_pfn,
    replicate,
    resolve_pfn,
)

GB = 10**9


def se(host="se.example.org", parts=None, mounts=None, areas=None, site="A", **kw):
    parts = parts or [Partition("p0", 100 * GB, 1000)]
    return StorageElement(host, parts, mounts or {"/": "p0"}, areas or {"cms": "/flatfiles/cms"}, site=site, **kw)


def test_pfn_composition():
    s = se("lxshare0384.cern.ch", areas={"atlas": "/flatfiles/atlas"})
    pfn, pid = resolve_pfn("prod/feb2003/simu001.fz", "atlas", s)
    assert str(pfn) == "//lxshare0384.cern.ch/flatfiles/atlas/prod/feb2003/simu001.fz"
    assert pid == "p0"
    assert Pfn.parse(str(pfn)) == pfn


@pytest.mark.parametrize("lfn", ["", "/abs", "a/../b", "a//b"])
def test_bad_lfns(lfn):
    with pytest.raises(StorageError):
        compose_pfn(lfn, "cms", se())


def test_longest_mount_prefix_wins():
    s = se(
        parts=[Partition("root", GB, 10), Partition("big", 10 * GB, 10)],
        mounts={"/": "root", "/flatfiles/cms/prod": "big"},
    )
    assert s.partition_for("/flatfiles/cms/prod/x") == "big"
    assert s.partition_for("/flatfiles/cms/production") == "root"
    assert s.partition_for("/flatfiles/cms/other") == "root"


def test_enospc_is_per_partition_not_aggregate():
    s = se(
        parts=[Partition("small", 1 * GB, 10), Partition("big", 50 * GB, 10)],
        mounts={"/": "big", "/flatfiles/cms": "small"},
    )
    assert s.aggregate_free_bytes == 51 * GB
    with pytest.raises(StorageError) as exc:
        s.store(compose_pfn("f", "cms", s), 2 * GB)
    assert exc.value.reason == "ENOSPC"


def test_inode_budget_and_duplicates():
    s = se(parts=[Partition("p0", GB, 1)])
    s.store(compose_pfn("a", "cms", s), 10)
    with pytest.raises(StorageError) as exc:
        s.store(compose_pfn("a", "cms", s), 10)
    assert exc.value.reason == "file-exists"
    with pytest.raises(StorageError) as exc:
        s.store(compose_pfn("b", "cms", s), 10)
    assert exc.value.reason == "inode-exhausted"


def test_manual_paths_require_existing_directory():
    s = se(manual_paths=True)
    with pytest.raises(StorageError) as exc:
        s.store(compose_pfn("prod/x", "cms", s), 10)
    assert exc.value.reason == "path-missing"
    assert s.store(compose_pfn("x", "cms", s), 10) == "p0"


def test_implicit_directories_cost_no_inodes():
    s = se(parts=[Partition("p0", GB, 1)])
    s.store(compose_pfn("a/b/c/d", "cms", s), 10)
    assert s.partitions["p0"].inodes_used == 1
    assert "/flatfiles/cms/a/b" in s.directories


def test_catalog_budget_1000_names_of_64_bytes():
    cat = ReplicaCatalog("cms", 64_000, {"h": "/d"})
    for i in range(1000):
        lfn = f"{i:064d}"
        cat.register(lfn, f"//h/d/{lfn}")
    lfn = f"{1000:064d}"
    with pytest.raises(StorageError) as exc:
        cat.register(lfn, f"//h/d/{lfn}")
    assert exc.value.reason == "collection-full"


def test_catalog_extra_replica_of_known_name_is_free():
    cat = ReplicaCatalog("cms", 10, {"a": "/d", "b": "/d"})
    cat.register("0123456789", "//a/d/0123456789")
    cat.register("0123456789", "//b/d/0123456789")
    assert cat.hosts_of("0123456789") == {"a", "b"}


def test_catalog_rejects_pfn_not_at_vo_area():
    cat = ReplicaCatalog("cms", 1000, {"a": "/d"})
    with pytest.raises(StorageError) as exc:
        cat.register("x", "//a/elsewhere/x")
    assert exc.value.reason == "pfn-mismatch"


def test_transfer_time_oracle():
    # 1 GB over 1 Gbit/s = 8000 ms, plus 1 ms latency
    assert Link(10**9, 1).transfer_ms(GB) == 8001
    assert Link(3, 0).transfer_ms(1) == 2667


def test_mss_read_delay_after_residency():
    s = se(mss=MssBackend(migrate_latency_ms=60_000, residency_ms=1000))
    pfn = compose_pfn("x", "cms", s)
    s.store(pfn, 10, now=0)
    assert s.read_delay_ms(pfn, 500) == 0
    assert s.read_delay_ms(pfn, 1000) == 60_000


def _pair(dst_parts, dst_mounts):
    src = se("src", site="A")
    dst = se("dst", parts=dst_parts, mounts=dst_mounts, site="B")
    cat = ReplicaCatalog("cms", 64_000, {"src": "/flatfiles/cms", "dst": "/flatfiles/cms"})
    pfn = compose_pfn("f1", "cms", src)
    src.store(pfn, GB)
    cat.register("f1", pfn)
    return src, dst, cat


def test_replicate_success_registers_replica():
    src, dst, cat = _pair([Partition("p0", 10 * GB, 10)], {"/": "p0"})
    sim, stats, seen = Simulator(), ReplicationStats(), []
    ev = replicate(sim, "f1", src, dst, cat, Link(10**9, 1), stats, on_done=seen.append)
    assert ev.fire_at == 8001
    sim.run_until(10_000)
    assert seen == [None]
    assert stats.successes == 1
    assert cat.hosts_of("f1") == {"src", "dst"}


def test_replicate_into_full_partition_counts_misleading_free_space():
    src, dst, cat = _pair(
        [Partition("small", GB // 2, 10), Partition("big", 100 * GB, 10)],
        {"/": "big", "/flatfiles/cms": "small"},
    )
    sim, stats = Simulator(), ReplicationStats()
    replicate(sim, "f1", src, dst, cat, Link(10**9, 0), stats)
    sim.run_until(10_000)
    assert stats.failures == {"ENOSPC": 1}
    assert stats.misleading_free_space == 1
    assert cat.hosts_of("f1") == {"src"}


def test_failed_registration_rolls_back_the_copy():
    src, dst, cat = _pair([Partition("p0", 10 * GB, 10)], {"/": "p0"})
    cat.areas["dst"] = "/other"
    sim, stats = Simulator(), ReplicationStats()
    replicate(sim, "f1", src, dst, cat, Link(10**9, 0), stats)
    sim.run_until(10_000)
    assert stats.failures == {"pfn-mismatch": 1}
    assert dst.files == {}


def test_replicate_missing_source_fails_at_request():
    src, dst, cat = _pair([Partition("p0", 10 * GB, 10)], {"/": "p0"})
    with pytest.raises(StorageError) as exc:
        replicate(Simulator(), "nope", src, dst, cat, Link(1, 0), ReplicationStats())
    assert exc.value.reason == "source-missing"
