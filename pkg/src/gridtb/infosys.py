"""Two-level grid information service: site nodes feeding a top node.

A record published at a site node is visible there immediately and reaches
the top node ``refresh_ms`` later. The top node keeps, per resource, the
history it still needs to answer "what did I know at time t".
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .sim import RngStream

CE = "CE"
SE = "SE"
TOP = "top"


class MalformedRecord(ValueError):
    pass


@dataclass(frozen=True)
class ResourceRecord:
    resource_id: str
    site: str
    kind: str
    total_cpus: int = 0
    free_cpus: int = 0
    queue_length: int = 0
    estimated_traversal_time_s: int = 0
    supported_vos: tuple[str, ...] = ()
    aggregate_free_bytes: int = 0
    vo_areas: tuple[tuple[str, str], ...] = ()
    host: str = ""
    published_at: int = 0

    def check(self) -> None:
        if not self.resource_id or not self.site:
            raise MalformedRecord("resource_id and site are required")
        if self.kind == CE:
            if not 0 <= self.free_cpus <= self.total_cpus:
                raise MalformedRecord(
                    f"{self.resource_id}: free_cpus={self.free_cpus} total_cpus={self.total_cpus}"
                )
            if self.queue_length < 0 or self.estimated_traversal_time_s < 0:
                raise MalformedRecord(f"{self.resource_id}: negative queue figures")
        elif self.kind == SE:
            if self.aggregate_free_bytes < 0:
                raise MalformedRecord(f"{self.resource_id}: negative free space")
        else:
            raise MalformedRecord(f"{self.resource_id}: unknown kind {self.kind!r}")

    def attributes(self) -> dict[str, object]:
        """Attribute view used by JDL expressions (``other.<Name>``)."""
        attrs: dict[str, object] = {"Site": self.site, "ResourceId": self.resource_id}
        if self.kind == CE:
            attrs.update(
                CEId=self.resource_id,
                TotalCPUs=self.total_cpus,
                FreeCPUs=self.free_cpus,
                QueueLength=self.queue_length,
                WaitingJobs=self.queue_length,
                EstimatedTraversalTime=self.estimated_traversal_time_s,
            )
        else:
            attrs.update(SEHost=self.host, FreeSpace=self.aggregate_free_bytes)
        return attrs


@dataclass(frozen=True)
class AnnotatedRecord:
    record: ResourceRecord
    age_ms: int


@dataclass
class QueryResult:
    records: list[AnnotatedRecord] = field(default_factory=list)
    timed_out: bool = False
    latency_ms: int = 0


@dataclass
class DegradationModel:
    """How query quality decays as the number of sites grows."""

    model: str = "none"
    base_ms: int = 0
    k: float = 0.0
    timeout_ms: Optional[int] = None

    def latency_ms(self, sites: int) -> int:
        if self.model == "linear-latency":
            return self.base_ms * sites
        return 0

    def stale_probability(self, sites: int) -> float:
        if self.model == "stale-prob" and sites > 5:
            return min(1.0, self.k * (sites - 5))
        return 0.0


class GisTree:
    def __init__(
        self,
        refresh_ms: int = 30_000,
        degradation: Optional[DegradationModel] = None,
        rng: Optional[RngStream] = None,
    ):
        self.refresh_ms = refresh_ms
        self.degradation = degradation or DegradationModel()
        self.rng = rng
        self.sites: dict[str, dict[str, ResourceRecord]] = {}
        # resource_id -> [(visible_at_top, record-or-None)] in publish order
        self._history: dict[str, list[tuple[int, Optional[ResourceRecord]]]] = {}
        self._origin: dict[str, str] = {}
        self.down: set[str] = set()
        self.rejected = 0
        self.queries = 0
        self.timeouts = 0

    def register_site(self, site: str) -> None:
        self.sites.setdefault(site, {})

    @property
    def site_count(self) -> int:
        return len(self.sites)

    def publish(self, record: ResourceRecord, now: int, immediate: bool = False) -> bool:
        """Publish at the record's site node. Returns False if rejected."""
        try:
            record.check()
        except MalformedRecord:
            self.rejected += 1
            return False
        origin = self._origin.setdefault(record.resource_id, record.site)
        if origin != record.site:
            self.rejected += 1
            return False
        record = replace(record, published_at=now)
        self.register_site(record.site)
        self.sites[record.site][record.resource_id] = record
        visible_at = now if immediate else now + self.refresh_ms
        self._append(record.resource_id, visible_at, record, now)
        return True

    def withdraw(self, resource_id: str, now: int) -> None:
        """Remove a resource from both levels at once (provider gone)."""
        site = self._origin.get(resource_id)
        if site is not None:
            self.sites[site].pop(resource_id, None)
        self._append(resource_id, now, None, now)

    def _append(self, rid: str, visible_at: int, record: Optional[ResourceRecord], now: int) -> None:
        hist = self._history.setdefault(rid, [])
        # a withdrawal supersedes anything still in flight
        if record is None:
            hist[:] = [h for h in hist if h[0] <= now]
        hist.append((visible_at, record))
        # drop entries shadowed by a newer one already visible (keep one predecessor)
        visible = [i for i, (t, _) in enumerate(hist) if t <= now]
        if len(visible) > 2:
            del hist[: visible[-2]]

    def _top_view(self, rid: str, at: int, previous: bool = False) -> Optional[ResourceRecord]:
        hist = self._history.get(rid, ())
        found: list[Optional[ResourceRecord]] = [None, None]
        for t, rec in hist:
            if t <= at:
                found = [found[1], rec]
        return found[0] if previous else found[1]

    def query(
        self,
        predicate: Callable[[ResourceRecord], bool],
        now: int,
        at: str = TOP,
    ) -> QueryResult:
        self.queries += 1
        if at in self.down:
            self.timeouts += 1
            return QueryResult(timed_out=True)
        if at != TOP:
            recs = [r for _, r in sorted(self.sites.get(at, {}).items())]
            return QueryResult([AnnotatedRecord(r, now - r.published_at) for r in recs if predicate(r)])

        latency = self.degradation.latency_ms(self.site_count)
        limit = self.degradation.timeout_ms
        if limit is not None and latency > limit:
            self.timeouts += 1
            return QueryResult(timed_out=True, latency_ms=latency)
        p_stale = self.degradation.stale_probability(self.site_count)
        out: list[AnnotatedRecord] = []
        for rid in sorted(self._history):
            if self._origin.get(rid) in self.down:
                continue
            rec = self._top_view(rid, now)
            if rec is None:
                continue
            if p_stale > 0.0 and self.rng is not None and self.rng.bernoulli(p_stale):
                older = self._top_view(rid, now, previous=True)
                if older is not None:
                    rec = older
            if predicate(rec):
                out.append(AnnotatedRecord(rec, now - rec.published_at))
        return QueryResult(out, latency_ms=latency)
