"""Build a testbed from a scenario and run it to a report."""

from __future__ import annotations

import dataclasses
from collections import Counter
from typing import Any, Optional

from . import __version__
from .broker import JobState, Refusal, ResourceBroker
from .compute import BatchJob, CleanupConfig, ComputeElement
from .fabric import NodeState, ack_status, apply, compile_profiles
from .faults import FaultInjector, FaultSpec, default_fault_specs
from .identity import Certificate, MapFile, VoRegistry
from .infosys import SE, DegradationModel, GisTree, ResourceRecord
from .jdl import parse_jdl
from .release import ReleasePlan
from .scenario import Scenario
from .sim import MS_PER_HOUR, EventKind, RngStream, SimulationError, Simulator, seconds_to_ms
from .storage import (
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
)

BYTES_PER_GB = 10**9


def _gb(value) -> int:
    return int(round(value * BYTES_PER_GB))


def _link(raw: dict) -> Link:
    return Link(int(round(raw["bandwidth_mbps"] * 1_000_000)), int(raw.get("latency_ms", 0)))


class Grid:
    """One simulation run. All mutable state lives here."""

    def __init__(self, scenario: Scenario, seed: Optional[int] = None, trace: bool = False):
        self.scenario = scenario
        doc = scenario.raw
        self.seed = scenario.seed if seed is None else seed
        self.sim = Simulator(self.seed, trace=trace)
        self.horizon_ms = int(round(doc["duration_h"] * MS_PER_HOUR))

        gis_cfg = doc["gis"]
        deg = gis_cfg["degradation"]
        self.gis = GisTree(
            refresh_ms=seconds_to_ms(gis_cfg["refresh_s"]),
            degradation=DegradationModel(deg["model"], deg["base_ms"], deg["k"], gis_cfg["timeout_ms"]),
            rng=self.sim.rng("gis:stale"),
        )
        self.cas = list(doc["cas"])
        self.registries = {v["name"]: VoRegistry(v["name"], set(v["members"])) for v in doc["vos"]}
        lease_ms = int(round(doc["lease_idle_h"] * MS_PER_HOUR))

        self.ces: dict[str, ComputeElement] = {}
        self.ses: dict[str, StorageElement] = {}
        self.links: dict[frozenset, Link] = {}
        self.default_link = _link(doc["default_link"])
        for site in doc["sites"]:
            self.gis.register_site(site["name"])
            for ce in site["ces"]:
                self.ces[ce["ce_id"]] = ComputeElement(
                    self.sim,
                    ce["ce_id"],
                    site["name"],
                    worker_nodes=ce["worker_nodes"],
                    cpus_per_node=ce["cpus_per_node"],
                    gass_cache_inodes=ce["gass_cache_inodes"],
                    files_per_job=ce["files_per_job"],
                    clean_leak_fraction=ce["clean_leak_fraction"],
                    cleanup=CleanupConfig(
                        ce["cleanup"]["auto_threshold"],
                        seconds_to_ms(ce["cleanup"]["base_s"]),
                        int(round(ce["cleanup"]["per_inode_ms"])),
                    ),
                    mapfile=MapFile(doc["pools"], lease_ms),
                    registries=self.registries,
                    supported_vos=tuple(ce["vos"]),
                    listener=self,
                    gis=self.gis,
                )
            for se in site["ses"]:
                mss = se["mss"]
                self.ses[se["host"]] = StorageElement(
                    se["host"],
                    [Partition(p["id"], _gb(p["capacity_gb"]), p["inodes"]) for p in se["partitions"]],
                    se["mounts"],
                    se["vo_areas"],
                    site=site["name"],
                    mss=MssBackend(
                        seconds_to_ms(mss["migrate_latency_s"]), seconds_to_ms(mss.get("residency_s", 0))
                    )
                    if mss
                    else None,
                    manual_paths=se["manual_paths"],
                )
            for link in site["links"]:
                self.links[frozenset((site["name"], link["to"]))] = _link(link)

        self.catalogs: dict[str, ReplicaCatalog] = {}
        for vo, cfg in doc["catalogs"].items():
            areas = {host: se.vo_areas[vo] for host, se in self.ses.items() if vo in se.vo_areas}
            self.catalogs[vo] = ReplicaCatalog(vo, cfg["name_byte_budget"], areas)
        self.replication = ReplicationStats()
        self.replication_log: list[dict] = []
        self.initial_file_errors: list[str] = []

        self.rbs: dict[str, ResourceBroker] = {}
        for rb in doc["rbs"]:
            self.rbs[rb["rb_id"]] = ResourceBroker(
                self.sim,
                rb["rb_id"],
                self.gis,
                self.ces,
                dual_cpu=rb["dual_cpu"],
                recovery_ms=seconds_to_ms(rb["recovery_s"]),
                retry_ms=seconds_to_ms(rb["retry_s"]),
                detect_ms=None if rb["detect_s"] is None else seconds_to_ms(rb["detect_s"]),
                overflow=rb["overflow"],
                max_active=rb["max_active"],
                trusted_cas=self.cas,
                registries=self.registries,
                data_sites=self.data_sites,
            )
        self.injector = FaultInjector(self.sim, self.rbs, self.ces, self.ses, self.gis)
        self.fault_times: dict[str, list[int]] = {}
        self.nodes: dict[str, NodeState] = {}
        self.profiles = {}
        self.fabric_log: list[dict] = []
        self.release: Optional[ReleasePlan] = None
        self._rb_cycle: Counter[str] = Counter()
        self.arrivals: Counter[str] = Counter()
        self._started = False
        self._finished = False

    # -- set-up -----------------------------------------------------------------

    def _publish_se(self, se: StorageElement, immediate: bool = False) -> None:
        record = ResourceRecord(
            resource_id=se.host,
            site=se.site,
            kind=SE,
            aggregate_free_bytes=se.aggregate_free_bytes,
            vo_areas=tuple(sorted(se.vo_areas.items())),
            host=se.host,
        )
        self.gis.publish(record, self.sim.now, immediate=immediate)

    def _boot(self) -> None:
        doc = self.scenario.raw
        for f in doc["files"]:
            se = self.ses[f["se"]]
            size = f["size_bytes"] if "size_bytes" in f else _gb(f["size_gb"])
            try:
                pfn = compose_pfn(f["lfn"], f["vo"], se)
                se.store(pfn, size, 0)
                self.catalogs[f["vo"]].register(f["lfn"], pfn)
            except StorageError as exc:
                self.initial_file_errors.append(f"{f['lfn']}@{f['se']}: {exc.reason}")
        for ce in self.ces.values():
            ce.publish(immediate=True)
        for se in self.ses.values():
            self._publish_se(se, immediate=True)

        faults = doc["faults"]
        specs = (
            default_fault_specs(self.rbs, self.ces)
            if faults == "default"
            else [FaultSpec.from_dict(f) for f in faults]
        )
        for spec in specs:
            times = self.injector.arm(spec, self.horizon_ms)
            self.fault_times.setdefault(spec.stream_id, []).extend(times)

        for w in doc["workloads"]:
            self._arm_workload(w)
        for r in doc["replication_jobs"]:
            self.sim.schedule(
                seconds_to_ms(r["at_s"]),
                EventKind.OPERATOR_ACTION,
                lambda e, r=r: self._start_replication(r),
                {"action": "replicate", "lfn": r["lfn"], "src": r["src"], "dst": r["dst"]},
            )
        for a in doc["actions"]:
            self.sim.schedule(
                seconds_to_ms(a["at_s"]),
                EventKind.OPERATOR_ACTION,
                lambda e, a=a: self._operator_action(a),
                {"action": a["kind"], "target": a["target"]},
            )
        if doc.get("fabric"):
            self._boot_fabric(doc["fabric"])
        if doc.get("release"):
            self.release = ReleasePlan(self.sim, doc["release"])
            self.release.start()

    def _boot_fabric(self, cfg: dict) -> None:
        self.profiles = compile_profiles(cfg["sources"])
        faulty = cfg.get("faulty_objects", {})
        for node in self.profiles:
            self.nodes[node] = NodeState(node, faulty_objects=set(faulty.get(node, [])))
        for item in cfg.get("installs", []):
            self.sim.schedule(
                seconds_to_ms(item.get("at_s", 0)),
                EventKind.OPERATOR_ACTION,
                lambda e, item=item: self._install(item),
                {"action": "node-install", "node": item["node"]},
            )
        for item in cfg.get("drift", []):
            self.sim.schedule(
                seconds_to_ms(item.get("at_s", 0)),
                EventKind.OPERATOR_ACTION,
                lambda e, item=item: self.nodes[item["node"]].live_values.__setitem__(item["key"], [item["value"]]),
                {"action": "drift", "node": item["node"], "key": item["key"]},
            )

    def _install(self, item: dict) -> None:
        node = self.nodes[item["node"]]
        report = apply(self.profiles[item["node"]], node, force=item.get("force", False))
        self.fabric_log.append({"at": self.sim.now, "node": item["node"], "changes": report.change_count, "ok": report.ok})

    # -- workloads ------------------------------------------------------------------

    def _arm_workload(self, w: dict) -> None:
        start = seconds_to_ms(w["start_s"])
        stop = seconds_to_ms(w["stop_s"]) if "stop_s" in w else self.horizon_ms
        template = parse_jdl(w["jdl_template"])
        if template.virtual_organisation is None:
            template.virtual_organisation = w["vo"]
        template.input_data = list(w["input_data"])
        template.walltime_s = w["walltime_s"]
        cert = Certificate(w["subject"], w.get("issuer_ca", ""), w["expired"])
        ctx = (w, template, cert)
        payload = {"workload": w["name"]}
        if "burst" in w:
            at = seconds_to_ms(w["burst"].get("at_s", 0))
            for _ in range(w["burst"]["count"]):
                self.sim.schedule(at, EventKind.JOB_ARRIVAL, lambda e: self._arrive(ctx), payload)
        for t in w.get("times_s", []):
            self.sim.schedule(seconds_to_ms(t), EventKind.JOB_ARRIVAL, lambda e: self._arrive(ctx), payload)
        if w["rate_per_hour"] > 0:
            rng = self.sim.rng(f"workload:{w['name']}")
            mean_ms = MS_PER_HOUR / w["rate_per_hour"]
            self._next_poisson(ctx, rng, mean_ms, start, stop)

    def _next_poisson(self, ctx, rng: RngStream, mean_ms: float, after: int, stop: int) -> None:
        t = after + rng.exponential_ms(mean_ms)
        if t > min(stop, self.horizon_ms):
            return

        def fire(event):
            self._arrive(ctx)
            self._next_poisson(ctx, rng, mean_ms, t, stop)

        self.sim.schedule(t, EventKind.JOB_ARRIVAL, fire, {"workload": ctx[0]["name"]})

    def _arrive(self, ctx) -> None:
        w, template, cert = ctx
        name = w["name"]
        self.arrivals[name] += 1
        if "rb" in w:
            rb_id = w["rb"]
        else:
            ids = sorted(self.rbs)
            rb_id = ids[self._rb_cycle[name] % len(ids)]
            self._rb_cycle[name] += 1
        ad = dataclasses.replace(template, input_data=list(template.input_data))
        try:
            self.rbs[rb_id].submit(
                ad,
                cert,
                walltime_ms=seconds_to_ms(w["walltime_s"]),
                unclean_fraction=w["unclean_fraction"],
                workload=name,
            )
        except Refusal:
            pass

    def data_sites(self, lfns, vo: str) -> set[str]:
        catalog = self.catalogs.get(vo)
        if catalog is None:
            return set()
        sites: Optional[set[str]] = None
        for lfn in lfns:
            here = {self.ses[h].site for h in catalog.hosts_of(lfn) if h in self.ses}
            sites = here if sites is None else sites & here
        return sites or set()

    # -- batch listener ------------------------------------------------------------

    def on_job_started(self, job: BatchJob, ce: ComputeElement) -> None:
        self.rbs[job.owner.rb_id].job_started(job.owner)

    def on_job_finished(self, job: BatchJob, ce: ComputeElement, clean: bool) -> None:
        self.rbs[job.owner.rb_id].job_finished(job.owner, clean)

    def on_job_lost(self, job: BatchJob, ce: ComputeElement, reason: str) -> None:
        self.rbs[job.owner.rb_id].job_lost(job.owner, reason)

    # -- storage and operator actions --------------------------------------------------

    def link_between(self, a: str, b: str) -> Link:
        return self.links.get(frozenset((a, b)), self.default_link)

    def _start_replication(self, r: dict) -> None:
        src, dst = self.ses[r["src"]], self.ses[r["dst"]]
        entry = {"at": self.sim.now, "lfn": r["lfn"], "src": r["src"], "dst": r["dst"], "result": None, "done_at": None}
        self.replication_log.append(entry)

        def done(reason):
            entry["result"] = reason or "ok"
            entry["done_at"] = self.sim.now
            self._publish_se(dst)

        try:
            replicate(
                self.sim,
                r["lfn"],
                src,
                dst,
                self.catalogs[r["vo"]],
                self.link_between(src.site, dst.site),
                self.replication,
                on_done=done,
            )
        except StorageError as exc:
            self.replication.fail(exc.reason)
            entry["result"] = exc.reason
            entry["done_at"] = self.sim.now

    def _operator_action(self, a: dict) -> None:
        if a["kind"] == "gass-cleanup":
            self.ces[a["target"]].gass_cache_cleanup(trigger="operator")
        else:
            self.rbs[a["target"]].recover(trigger="operator")

    # -- running ------------------------------------------------------------------------

    def start(self) -> None:
        """Arm every scenario input at t=0. Idempotent."""
        if not self._started:
            self._started = True
            self._boot()

    def advance(self, t_ms: int) -> None:
        """Step the run to ``t_ms`` (capped at the horizon), for inspection mid-run."""
        self.start()
        self.sim.run_until(min(t_ms, self.horizon_ms))

    def finish(self) -> dict[str, Any]:
        if self._finished:
            raise SimulationError("a Grid runs once")
        self.advance(self.horizon_ms)
        self._finished = True
        self.injector.finalize()
        self.check_invariants()
        return self.report()

    def run(self) -> dict[str, Any]:
        return self.finish()

    def check_invariants(self) -> None:
        try:
            for ce in self.ces.values():
                ce.check_invariants()
            for rb in self.rbs.values():
                rb.check_invariants()
        except AssertionError as exc:
            raise SimulationError(f"invariant violated at end of run: {exc}") from exc

    def catalog_consistent(self) -> bool:
        for catalog in self.catalogs.values():
            for lfn, pfns in catalog.entries.items():
                sizes = set()
                for text in pfns:
                    pfn = Pfn.parse(text)
                    se = self.ses.get(pfn.host)
                    stored = se.files.get(pfn.path) if se else None
                    if stored is None:
                        return False
                    sizes.add(stored.size_bytes)
                if len(sizes) > 1:
                    return False
        return True

    # -- reporting ---------------------------------------------------------------------------

    def _downtime(self) -> dict[str, int]:
        windows: dict[str, list[list[int]]] = {k: [list(w) for w in v] for k, v in self.injector.windows.items()}
        for ce_id, ce in self.ces.items():
            for c in ce.cleanups:
                windows.setdefault(f"ce:{ce_id}", []).append([c.started_ms, c.done_ms])
        totals = {}
        for target, spans in windows.items():
            total, cur_start, cur_end = 0, None, None
            for start, end in sorted(spans):
                end = min(end, self.horizon_ms)
                if cur_end is None or start > cur_end:
                    if cur_end is not None:
                        total += cur_end - cur_start
                    cur_start, cur_end = start, end
                else:
                    cur_end = max(cur_end, end)
            if cur_end is not None:
                total += cur_end - cur_start
            totals[target] = total
        return dict(sorted(totals.items()))

    def report(self) -> dict[str, Any]:
        jobs = [j for rb in self.rbs.values() for j in rb.jobs.values()]
        admitted = [j for j in jobs if j.state is not None]
        done = [j for j in admitted if j.state is JobState.DONE]
        aborted = Counter(j.reason for j in admitted if j.state is JobState.ABORTED)
        active = sum(len(rb.active) for rb in self.rbs.values())
        held = sum(len(rb.held) for rb in self.rbs.values())
        refused = Counter()
        for rb in self.rbs.values():
            refused.update(rb.refusals)
        finished = len(done) + sum(aborted.values())
        metrics = {
            "jobs": {
                "arrivals": sum(self.arrivals.values()),
                "submitted": len(jobs),
                "done": len(done),
                "done_unclean_exit": sum(1 for j in done if j.clean_exit is False),
                "aborted": sum(aborted.values()),
                "aborted_by_reason": dict(sorted(aborted.items())),
                "active_at_end": active,
                "held_at_end": held,
                "refused": sum(refused.values()),
                "refused_by_reason": dict(sorted(refused.items())),
                "success_rate": round(len(done) / finished, 6) if finished else None,
            },
            "refusals_at_capacity": refused.get("at-capacity", 0),
            "gram_wedged_failures": sum(ce.wedged_failures for ce in self.ces.values()),
            "jobs_lost_to_cleanup": aborted.get("lost-to-cleanup", 0),
            "jobs_lost_to_rb_recovery": aborted.get("rb-recovery", 0),
            "replication": {
                "successes": self.replication.successes,
                "failures": sum(self.replication.failures.values()),
                "failures_by_reason": dict(sorted(self.replication.failures.items())),
                "transfers": self.replication_log,
            },
            "misleading_free_space": self.replication.misleading_free_space,
            "rc_collection_full": self.replication.rc_collection_full,
            "catalog_consistent": self.catalog_consistent(),
            "initial_file_errors": self.initial_file_errors,
            "fault_events": [r.as_dict() for r in self.injector.records],
            "fault_noops": self.injector.noop_count,
            "service_downtime_ms": self._downtime(),
            "time_to_first_inode_exhaustion_ms": {
                ce_id: ce.first_exhaustion_ms for ce_id, ce in sorted(self.ces.items())
            },
            "rbs": {
                rb_id: {
                    "peak_active": rb.peak_active,
                    "active_at_end": len(rb.active),
                    "held_at_end": len(rb.held),
                    "corruptions": rb.corruptions,
                    "submission_failures": rb.submission_failures,
                    "recoveries": [dataclasses.asdict(r) for r in rb.recoveries],
                    "refused_by_reason": dict(sorted(rb.refusals.items())),
                }
                for rb_id, rb in sorted(self.rbs.items())
            },
            "ces": {
                ce_id: {
                    "inodes_used": ce.gass_cache.inodes_used,
                    "orphaned_inodes": ce.gass_cache.orphaned_inodes,
                    "inode_budget": ce.gass_cache.inode_budget,
                    "state": ce.state,
                    "peak_running": ce.peak_running,
                    "pool_exhausted_failures": ce.pool_failures,
                    "cleanups": [dataclasses.asdict(c) for c in ce.cleanups],
                }
                for ce_id, ce in sorted(self.ces.items())
            },
            "ses": {
                host: {
                    "aggregate_free_bytes": se.aggregate_free_bytes,
                    "partitions": {
                        pid: {"free_bytes": p.free_bytes, "inodes_used": p.inodes_used}
                        for pid, p in sorted(se.partitions.items())
                    },
                }
                for host, se in sorted(self.ses.items())
            },
            "gis": {
                "sites": self.gis.site_count,
                "queries": self.gis.queries,
                "timeouts": self.gis.timeouts,
                "rejected_records": self.gis.rejected,
            },
        }
        if self.nodes:
            ack = bool(self.scenario.raw["fabric"].get("ack_tool", False))
            server_view = {}
            for name, node in sorted(self.nodes.items()):
                if not ack:
                    server_view[name] = None
                elif node.last_report is None:
                    server_view[name] = "never-applied"
                else:
                    server_view[name] = ack_status(node)
            metrics["fabric"] = {
                "installs": self.fabric_log,
                "server_view": server_view,
                "compiled_versions": {n: p.version for n, p in sorted(self.profiles.items())},
            }
        if self.release is not None:
            metrics["release"] = self.release.summary()
        return {
            "header": {
                "scenario": self.scenario.name,
                "scenario_hash": self.scenario.scenario_hash,
                "seed": self.seed,
                "rng_algorithm": RngStream.ALGORITHM,
                "tool_version": __version__,
                "duration_ms": self.horizon_ms,
            },
            "metrics": metrics,
        }


def run_scenario(scenario: Scenario, seed: Optional[int] = None, trace: bool = False) -> tuple[dict, Grid]:
    grid = Grid(scenario, seed=seed, trace=trace)
    return grid.run(), grid
