"""Certificate checks and the mapping of VO members to pool accounts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

DEFAULT_LEASE_IDLE_MS = 24 * 3_600_000


class AuthError(Exception):
    """Rejected authentication or authorization; ``reason`` is the short code."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class Certificate:
    subject: str
    issuer_ca: str
    expired: bool = False

    def __post_init__(self):
        if not self.subject:
            raise ValueError("certificate subject must be non-empty")


@dataclass
class VoRegistry:
    vo_name: str
    members: set[str] = field(default_factory=set)


def authenticate(cert: Certificate, trusted_cas) -> str:
    """Return the accepted subject or raise AuthError(unknown-ca | expired)."""
    if cert.issuer_ca not in trusted_cas:
        raise AuthError("unknown-ca", cert.issuer_ca)
    if cert.expired:
        raise AuthError("expired", cert.subject)
    return cert.subject


@dataclass
class _Lease:
    account: str
    vo: str
    live_jobs: int = 0
    idle_since: Optional[int] = None


class MapFile:
    """Grid-mapfile with per-VO pools of dynamically leased local accounts.

    Accounts are named ``<vo><NNN>`` and handed out lowest-free-index first. A
    lease is sticky while the subject has live jobs, and becomes reclaimable
    once it has been idle for ``lease_idle_ms``.
    """

    def __init__(self, pools: Mapping[str, int], lease_idle_ms: int = DEFAULT_LEASE_IDLE_MS):
        self.capacity = dict(pools)
        self.lease_idle_ms = lease_idle_ms
        self.entries: dict[tuple[str, str], _Lease] = {}
        self._in_use: dict[str, set[int]] = {vo: set() for vo in self.capacity}

    def assigned(self, vo: str) -> int:
        return len(self._in_use.get(vo, ()))

    def account_of(self, subject: str, vo: str) -> Optional[str]:
        lease = self.entries.get((subject, vo))
        return lease.account if lease else None

    def _expire(self, vo: str, now: int) -> None:
        for key, lease in list(self.entries.items()):
            if (
                lease.vo == vo
                and lease.live_jobs == 0
                and lease.idle_since is not None
                and now - lease.idle_since >= self.lease_idle_ms
            ):
                del self.entries[key]
                self._in_use[vo].discard(int(lease.account[len(vo):]))

    def lease(self, subject: str, vo: str, now: int = 0) -> str:
        existing = self.entries.get((subject, vo))
        if existing is not None:
            return existing.account
        if vo not in self.capacity:
            raise AuthError("pool-exhausted", f"no pool for VO {vo}")
        used = self._in_use[vo]
        if len(used) >= self.capacity[vo]:
            self._expire(vo, now)
        if len(used) >= self.capacity[vo]:
            raise AuthError("pool-exhausted", vo)
        index = 1
        while index in used:
            index += 1
        used.add(index)
        account = f"{vo}{index:03d}"
        self.entries[(subject, vo)] = _Lease(account, vo, idle_since=now)
        return account

    def job_started(self, subject: str, vo: str) -> None:
        lease = self.entries[(subject, vo)]
        lease.live_jobs += 1
        lease.idle_since = None

    def job_ended(self, subject: str, vo: str, now: int) -> None:
        lease = self.entries.get((subject, vo))
        if lease is None:
            return
        lease.live_jobs -= 1
        if lease.live_jobs <= 0:
            lease.live_jobs = 0
            lease.idle_since = now


def authorize(
    subject: str,
    vo: str,
    mapfile: MapFile,
    registries: Mapping[str, VoRegistry],
    now: int = 0,
) -> str:
    """Map an authenticated subject to a pool account of ``vo``."""
    registry = registries.get(vo)
    if registry is None or subject not in registry.members:
        raise AuthError("not-a-member", f"{subject} not in {vo}")
    return mapfile.lease(subject, vo, now)
