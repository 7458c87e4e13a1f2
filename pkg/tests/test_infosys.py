import pytest

from gridtb.infosys import CE, SE, DegradationModel, GisTree, ResourceRecord
from gridtb.sim import RngStream


def ce(rid="ce1", site="CERN", free=4, total=4, ett=0):
    return ResourceRecord(rid, site, CE, total_cpus=total, free_cpus=free, estimated_traversal_time_s=ett)


def ids(result):
    return [a.record.resource_id for a in result.records]


def test_site_view_is_immediate_top_view_waits_for_refresh():
    gis = GisTree(refresh_ms=30_000)
    assert gis.publish(ce(), now=0)
    assert ids(gis.query(lambda r: True, 0, at="CERN")) == ["ce1"]
    assert ids(gis.query(lambda r: True, 29_999)) == []
    assert ids(gis.query(lambda r: True, 30_000)) == ["ce1"]


def test_top_serves_previous_record_until_refresh():
    gis = GisTree(refresh_ms=30_000)
    gis.publish(ce(free=4), now=0, immediate=True)
    gis.publish(ce(free=1), now=10_000)
    old = gis.query(lambda r: True, 20_000).records[0]
    assert old.record.free_cpus == 4
    assert old.age_ms == 20_000
    new = gis.query(lambda r: True, 40_000).records[0]
    assert new.record.free_cpus == 1


def test_malformed_records_are_rejected():
    gis = GisTree()
    assert not gis.publish(ce(free=5, total=4), now=0)
    assert not gis.publish(ResourceRecord("se1", "CERN", SE, aggregate_free_bytes=-1), now=0)
    assert gis.rejected == 2


def test_withdraw_is_immediate_at_both_levels():
    gis = GisTree(refresh_ms=30_000)
    gis.publish(ce(), now=0, immediate=True)
    gis.withdraw("ce1", now=5)
    assert ids(gis.query(lambda r: True, 5)) == []
    assert ids(gis.query(lambda r: True, 5, at="CERN")) == []


def test_linear_latency_grows_with_sites():
    deg = DegradationModel("linear-latency", base_ms=200)
    gis = GisTree(degradation=deg)
    for i in range(5):
        gis.register_site(f"s{i}")
    assert gis.query(lambda r: True, 0).latency_ms == 5 * 200


def test_timeout_when_latency_exceeds_limit():
    gis = GisTree(degradation=DegradationModel("linear-latency", base_ms=100, timeout_ms=450))
    for i in range(4):
        gis.register_site(f"s{i}")
    assert not gis.query(lambda r: True, 0).timed_out
    gis.register_site("s4")
    assert gis.query(lambda r: True, 0).timed_out
    assert gis.timeouts == 1


@pytest.mark.parametrize("sites,expected", [(3, 0.0), (5, 0.0), (6, 0.1), (8, 0.3), (30, 1.0)])
def test_stale_probability(sites, expected):
    assert DegradationModel("stale-prob", k=0.1).stale_probability(sites) == pytest.approx(expected)


def test_stale_prob_one_serves_previous_record():
    gis = GisTree(refresh_ms=0, degradation=DegradationModel("stale-prob", k=1.0), rng=RngStream(1, "gis:stale"))
    for i in range(6):
        gis.register_site(f"s{i}")
    gis.publish(ce(site="s0", free=4), now=0, immediate=True)
    gis.publish(ce(site="s0", free=2), now=10)
    rec = gis.query(lambda r: True, 20).records[0]
    assert rec.record.free_cpus == 4


def test_down_node_times_out():
    gis = GisTree()
    gis.publish(ce(), now=0, immediate=True)
    gis.down.add("top")
    assert gis.query(lambda r: True, 1).timed_out
    gis.down.discard("top")
    gis.down.add("CERN")
    result = gis.query(lambda r: True, 1)
    assert not result.timed_out and ids(result) == []


def test_jdl_attribute_view():
    attrs = ce(free=3, total=8, ett=120).attributes()
    assert attrs["FreeCPUs"] == 3 and attrs["TotalCPUs"] == 8
    assert attrs["EstimatedTraversalTime"] == 120
    assert attrs["CEId"] == "ce1"
