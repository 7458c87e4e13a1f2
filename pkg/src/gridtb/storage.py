"""Storage elements and replica catalogs, plus the LFN to PFN composition rule.

A PFN is always ``//<se host><vo area>/<lfn>``. Which physical partition
receives the file is decided by the SE's mount table alone, so a file can be
refused for lack of space while the SE as a whole reports plenty free.
"""

from __future__ import annotations

import posixpath
from dataclasses import dataclass, field
from typing import Mapping, Optional

DEFAULT_NAME_BYTE_BUDGET = 64_000


class StorageError(Exception):
    """Failure with a short machine-readable ``reason``."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass
class Partition:
    id: str
    capacity_bytes: int
    inode_budget: int
    used_bytes: int = 0
    inodes_used: int = 0

    @property
    def free_bytes(self) -> int:
        return self.capacity_bytes - self.used_bytes


@dataclass(frozen=True)
class Pfn:
    host: str
    path: str

    def __str__(self) -> str:
        return f"//{self.host}{self.path}"

    @classmethod
    def parse(cls, text: str) -> "Pfn":
        if not text.startswith("//"):
            raise StorageError("malformed-pfn", text)
        host, sep, rest = text[2:].partition("/")
        if not host or not sep:
            raise StorageError("malformed-pfn", text)
        return cls(host, "/" + rest)


@dataclass
class MssBackend:
    migrate_latency_ms: int
    residency_ms: int


@dataclass
class StoredFile:
    size_bytes: int
    partition: str
    stored_at: int


def check_lfn(lfn: str) -> None:
    if not lfn or lfn.startswith("/") or ".." in lfn.split("/") or "//" in lfn:
        raise StorageError("malformed-lfn", repr(lfn))


def _is_under(path: str, prefix: str) -> bool:
    prefix = prefix.rstrip("/") or "/"
    return path == prefix or path.startswith(prefix if prefix == "/" else prefix + "/")


class StorageElement:
    def __init__(
        self,
        host: str,
        partitions: list[Partition],
        mounts: Mapping[str, str],
        vo_areas: Mapping[str, str],
        site: str = "",
        mss: Optional[MssBackend] = None,
        manual_paths: bool = False,
    ):
        self.host = host
        self.site = site
        self.partitions = {p.id: p for p in partitions}
        if len(self.partitions) != len(partitions):
            raise ValueError(f"{host}: duplicate partition ids")
        self.mount_table = {posixpath.normpath(m): pid for m, pid in mounts.items()}
        if len(self.mount_table) != len(mounts):
            raise ValueError(f"{host}: duplicate mount paths")
        for mount, pid in self.mount_table.items():
            if pid not in self.partitions:
                raise ValueError(f"{host}: mount {mount} names unknown partition {pid}")
        self.vo_areas = {vo: posixpath.normpath(path) for vo, path in vo_areas.items()}
        for vo, area in self.vo_areas.items():
            self.partition_for(area)
        self.mss = mss
        self.manual_paths = manual_paths
        self.files: dict[str, StoredFile] = {}
        self.directories: set[str] = set(self.mount_table) | set(self.vo_areas.values())
        self.up = True

    @property
    def aggregate_free_bytes(self) -> int:
        return sum(p.free_bytes for p in self.partitions.values())

    def partition_for(self, path: str) -> str:
        best: Optional[str] = None
        for mount in self.mount_table:
            if _is_under(path, mount) and (best is None or len(mount) > len(best)):
                best = mount
        if best is None:
            raise StorageError("no-mount", f"{self.host}:{path}")
        return self.mount_table[best]

    def store(self, pfn: Pfn, size_bytes: int, now: int = 0) -> str:
        """Write a file; returns the partition id it landed on."""
        if pfn.host != self.host:
            raise StorageError("wrong-host", f"{pfn} not on {self.host}")
        if not self.up:
            raise StorageError("se-down", self.host)
        pid = self.partition_for(pfn.path)
        part = self.partitions[pid]
        parent = posixpath.dirname(pfn.path)
        if self.manual_paths and parent not in self.directories:
            raise StorageError("path-missing", parent)
        if pfn.path in self.files:
            raise StorageError("file-exists", str(pfn))
        if part.free_bytes < size_bytes:
            raise StorageError("ENOSPC", f"{pid} free={part.free_bytes} need={size_bytes}")
        if part.inodes_used >= part.inode_budget:
            raise StorageError("inode-exhausted", pid)
        part.used_bytes += size_bytes
        part.inodes_used += 1
        self.files[pfn.path] = StoredFile(size_bytes, pid, now)
        # implicit mkdir -p, free of inode cost
        while parent not in self.directories and parent != "/":
            self.directories.add(parent)
            parent = posixpath.dirname(parent)
        return pid

    def remove(self, pfn: Pfn) -> None:
        stored = self.files.pop(pfn.path)
        part = self.partitions[stored.partition]
        part.used_bytes -= stored.size_bytes
        part.inodes_used -= 1

    def read_delay_ms(self, pfn: Pfn, now: int) -> int:
        """Extra delay for reading a file that the MSS has migrated to tape."""
        stored = self.files.get(pfn.path)
        if self.mss is None or stored is None:
            return 0
        if now - stored.stored_at >= self.mss.residency_ms:
            return self.mss.migrate_latency_ms
        return 0


def compose_pfn(lfn: str, vo: str, se: StorageElement) -> Pfn:
    check_lfn(lfn)
    area = se.vo_areas.get(vo)
    if area is None:
        raise StorageError("no-vo-area", f"{vo} on {se.host}")
    return Pfn(se.host, area.rstrip("/") + "/" + lfn)


def resolve_pfn(lfn: str, vo: str, se: StorageElement) -> tuple[Pfn, str]:
    pfn = compose_pfn(lfn, vo, se)
    return pfn, se.partition_for(pfn.path)


class ReplicaCatalog:
    """Per-VO LFN -> PFN set, limited by the total bytes of distinct LFNs."""

    def __init__(self, vo: str, name_byte_budget: int = DEFAULT_NAME_BYTE_BUDGET, areas=None):
        self.vo = vo
        self.name_byte_budget = name_byte_budget
        self.entries: dict[str, set[str]] = {}
        self.name_bytes = 0
        # host -> vo area, used to check the composition invariant
        self.areas: dict[str, str] = dict(areas or {})

    def expected_pfn(self, lfn: str, host: str) -> Optional[str]:
        area = self.areas.get(host)
        if area is None:
            return None
        return f"//{host}{area.rstrip('/')}/{lfn}"

    def register(self, lfn: str, pfn: Pfn | str) -> None:
        check_lfn(lfn)
        pfn = Pfn.parse(pfn) if isinstance(pfn, str) else pfn
        if self.expected_pfn(lfn, pfn.host) != str(pfn):
            raise StorageError("pfn-mismatch", f"{pfn} for {lfn}")
        if lfn not in self.entries:
            cost = len(lfn.encode())
            if self.name_bytes + cost > self.name_byte_budget:
                raise StorageError("collection-full", f"{self.vo}: {self.name_bytes}+{cost}")
            self.name_bytes += cost
            self.entries[lfn] = set()
        self.entries[lfn].add(str(pfn))

    def unregister(self, lfn: str, pfn: Pfn | str) -> None:
        pfns = self.entries.get(lfn)
        if not pfns:
            return
        pfns.discard(str(pfn))
        if not pfns:
            del self.entries[lfn]
            self.name_bytes -= len(lfn.encode())

    def hosts_of(self, lfn: str) -> set[str]:
        return {Pfn.parse(p).host for p in self.entries.get(lfn, ())}


@dataclass(frozen=True)
class Link:
    bandwidth_bps: int
    latency_ms: int

    def transfer_ms(self, size_bytes: int) -> int:
        bits_ms = size_bytes * 8 * 1000
        return self.latency_ms + -(-bits_ms // self.bandwidth_bps)


@dataclass
class ReplicationStats:
    successes: int = 0
    failures: dict[str, int] = field(default_factory=dict)
    misleading_free_space: int = 0
    rc_collection_full: int = 0

    def fail(self, reason: str) -> None:
        self.failures[reason] = self.failures.get(reason, 0) + 1


def replicate(
    sim,
    lfn: str,
    src: StorageElement,
    dst: StorageElement,
    catalog: ReplicaCatalog,
    link: Link,
    stats: ReplicationStats,
    on_done=None,
):
    """Copy ``lfn`` from ``src`` to ``dst`` over ``link`` and register the new replica.

    Errors detectable at request time are raised. Errors at completion time
    (space, i-nodes, catalog limits) are recorded in ``stats`` and passed to
    ``on_done(reason)``; ``on_done(None)`` signals success.
    """
    from .sim import EventKind

    src_pfn = compose_pfn(lfn, catalog.vo, src)
    if str(src_pfn) not in catalog.entries.get(lfn, ()):
        raise StorageError("source-missing", f"{lfn} on {src.host}")
    if not src.up:
        raise StorageError("se-down", src.host)
    stored = src.files.get(src_pfn.path)
    if stored is None:
        raise StorageError("source-missing", str(src_pfn))
    dst_pfn = compose_pfn(lfn, catalog.vo, dst)
    size = stored.size_bytes
    duration = link.transfer_ms(size) + src.read_delay_ms(src_pfn, sim.now)

    def complete(event):
        reason = None
        try:
            dst.store(dst_pfn, size, sim.now)
        except StorageError as exc:
            reason = exc.reason
            if exc.reason == "ENOSPC" and dst.aggregate_free_bytes >= size:
                stats.misleading_free_space += 1
        else:
            try:
                catalog.register(lfn, dst_pfn)
            except StorageError as exc:
                dst.remove(dst_pfn)
                reason = exc.reason
                if reason == "collection-full":
                    stats.rc_collection_full += 1
        if reason is None:
            stats.successes += 1
        else:
            stats.fail(reason)
        event.payload["result"] = reason or "ok"
        if on_done is not None:
            on_done(reason)

    return sim.schedule_in(
        duration,
        EventKind.TRANSFER_COMPLETE,
        complete,
        {"lfn": lfn, "vo": catalog.vo, "src": src.host, "dst": dst.host, "bytes": size},
    )
