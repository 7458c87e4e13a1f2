import pytest

from gridtb.identity import AuthError, Certificate, MapFile, VoRegistry, authenticate, authorize

CA = "/C=CH/O=CERN/CN=CERN CA"
HOUR = 3_600_000


def test_authenticate_checks_ca_and_expiry():
    assert authenticate(Certificate("/CN=alice", CA), {CA}) == "/CN=alice"
    with pytest.raises(AuthError) as exc:
        authenticate(Certificate("/CN=alice", "/CN=Rogue CA"), {CA})
    assert exc.value.reason == "unknown-ca"
    with pytest.raises(AuthError) as exc:
        authenticate(Certificate("/CN=alice", CA, expired=True), {CA})
    assert exc.value.reason == "expired"


def test_empty_subject_is_invalid():
    with pytest.raises(ValueError):
        Certificate("", CA)


def test_pool_accounts_lowest_index_first_and_sticky():
    m = MapFile({"atlas": 3})
    assert m.lease("/CN=a", "atlas", 0) == "atlas001"
    assert m.lease("/CN=b", "atlas", 0) == "atlas002"
    assert m.lease("/CN=a", "atlas", 10) == "atlas001"
    assert m.assigned("atlas") == 2


def test_pool_of_two_refuses_a_third_user():
    m = MapFile({"cms": 2})
    m.lease("/CN=a", "cms", 0)
    m.lease("/CN=b", "cms", 0)
    with pytest.raises(AuthError) as exc:
        m.lease("/CN=c", "cms", 0)
    assert exc.value.reason == "pool-exhausted"


def test_idle_lease_is_reclaimed_after_a_day():
    m = MapFile({"cms": 1}, lease_idle_ms=24 * HOUR)
    m.lease("/CN=a", "cms", 0)
    with pytest.raises(AuthError):
        m.lease("/CN=b", "cms", 24 * HOUR - 1)
    assert m.lease("/CN=b", "cms", 24 * HOUR) == "cms001"
    assert m.account_of("/CN=a", "cms") is None


def test_lease_with_running_job_is_not_reclaimed():
    m = MapFile({"cms": 1}, lease_idle_ms=HOUR)
    m.lease("/CN=a", "cms", 0)
    m.job_started("/CN=a", "cms")
    with pytest.raises(AuthError):
        m.lease("/CN=b", "cms", 5 * HOUR)
    m.job_ended("/CN=a", "cms", 5 * HOUR)
    with pytest.raises(AuthError):
        m.lease("/CN=b", "cms", 5 * HOUR + 1)
    assert m.lease("/CN=b", "cms", 6 * HOUR) == "cms001"


def test_authorize_requires_membership():
    regs = {"atlas": VoRegistry("atlas", {"/CN=a"})}
    m = MapFile({"atlas": 5})
    assert authorize("/CN=a", "atlas", m, regs, 0) == "atlas001"
    with pytest.raises(AuthError) as exc:
        authorize("/CN=z", "atlas", m, regs, 0)
    assert exc.value.reason == "not-a-member"
