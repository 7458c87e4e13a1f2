import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridtb.release import (
    GATES,
    BypassItem,
    ReleaseError,
    ReleaseManager,
    ReleasePlan,
    TagState,
)
from gridtb.sim import Simulator

PKGS = [("edg-rb", "1.3.0"), ("edg-gis", "1.3.0")]


def test_happy_path_reaches_application():
    m = ReleaseManager()
    tag = m.propose_tag(PKGS)
    for gate in GATES:
        m.run_gate(tag, gate, {})
    assert tag.state is TagState.APPLICATION
    assert all(tag.passed(g) for g in GATES)


def test_failure_rejects_for_good():
    m = ReleaseManager()
    tag = m.propose_tag(PKGS)
    m.run_gate(tag, "dev", {"edg-rb": False})
    assert tag.state is TagState.REJECTED
    assert tag.gate_log[-1].failed == ["edg-rb"]
    with pytest.raises(ReleaseError) as exc:
        m.run_gate(tag, "core", {})
    assert exc.value.reason == "wrong-state"


def test_gates_cannot_be_skipped():
    m = ReleaseManager()
    tag = m.propose_tag(PKGS)
    with pytest.raises(ReleaseError):
        m.run_gate(tag, "application", {})
    with pytest.raises(ReleaseError) as exc:
        m.run_gate(tag, "smoke", {})
    assert exc.value.reason == "unknown-gate"


@pytest.mark.parametrize(
    "pkgs,reason",
    [([], "empty-package-set"), ([("a", "1"), ("a", "2")], "duplicate-package"), ([("a", "one")], "bad-version")],
)
def test_bad_proposals(pkgs, reason):
    with pytest.raises(ReleaseError) as exc:
        ReleaseManager().propose_tag(pkgs)
    assert exc.value.reason == reason


def test_bypass_kinds():
    m = ReleaseManager()
    tag = m.propose_tag(PKGS)
    m.bypass_install(BypassItem("security-patch", "application", "openssh"))
    m.bypass_install(BypassItem("ca-update", "core-sites"))
    assert tag.state is TagState.TENTATIVE
    with pytest.raises(ReleaseError) as exc:
        m.bypass_install(BypassItem("middleware", "application"))
    assert exc.value.reason == "unsanctioned-kind"
    with pytest.raises(ReleaseError) as exc:
        m.bypass_install(BypassItem("ca-update", "production"))
    assert exc.value.reason == "unknown-testbed"


steps = st.lists(
    st.tuples(st.sampled_from(GATES + ("bogus",)), st.booleans()),
    max_size=8,
)


@settings(max_examples=1000, deadline=None)
@given(steps)
def test_safety_property(seq):
    m = ReleaseManager()
    tag = m.propose_tag(PKGS)
    history = [tag.state]
    for gate, ok in seq:
        before = tag.state
        try:
            m.run_gate(tag, gate, {"edg-rb": ok})
        except ReleaseError:
            assert tag.state is before
        history.append(tag.state)
    if tag.state is TagState.APPLICATION:
        assert tag.passed("dev") and tag.passed("core")
    if TagState.REJECTED in history:
        assert history[history.index(TagState.REJECTED):] == [TagState.REJECTED] * (
            len(history) - history.index(TagState.REJECTED)
        )


def _drive(plan, seed=0):
    sim = Simulator(seed)
    runner = ReleasePlan(sim, plan)
    runner.start()
    while sim.peek() is not None:
        sim.run_until(sim.peek())
    return runner.summary()


def test_plan_timing_within_one_day():
    summary = _drive({"tags": [{"name": "1.3.0", "packages": PKGS}]})
    (tag,) = summary["tags"]
    assert tag["state"] == "APPLICATION"
    assert tag["application_at_ms"] == (4 + 8 + 4) * 3_600_000


def test_plan_with_failure_probability_is_seeded():
    plan = {"tags": [{"packages": PKGS, "failure_prob": 0.5}] * 5}
    assert _drive(plan, 3) == _drive(plan, 3)


def test_plan_records_bad_tags_and_refused_bypasses():
    summary = _drive({"tags": [{"packages": []}], "bypasses": [{"kind": "kernel", "at_s": 5}]})
    assert summary["errors"] == ["tags/0: empty-package-set"]
    assert summary["bypass_refused"][0]["reason"] == "unsanctioned-kind"
