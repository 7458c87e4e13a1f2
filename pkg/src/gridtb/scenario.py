"""Scenario files: validation against schema and cross references, then defaulting."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Union

import jsonschema

from .fabric import FabricError, compile_profiles
from .jdl import JdlError, parse_jdl
from .release import GATES

U64_MAX = 2**64 - 1

_num = {"type": "number", "minimum": 0}
_int = {"type": "integer", "minimum": 0}
_str = {"type": "string", "minLength": 1}
_strs = {"type": "array", "items": _str}

_CE = {
    "type": "object",
    "required": ["ce_id", "worker_nodes"],
    "additionalProperties": False,
    "properties": {
        "ce_id": _str,
        "site": _str,
        "worker_nodes": _int,
        "cpus_per_node": {"type": "integer", "minimum": 1},
        "gass_cache_inodes": _int,
        "files_per_job": {"type": "integer", "minimum": 1},
        "clean_leak_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "vos": _strs,
        "cleanup": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "auto_threshold": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                "base_s": _num,
                "per_inode_ms": _num,
            },
        },
    },
}

_SE = {
    "type": "object",
    "required": ["host", "partitions", "mounts", "vo_areas"],
    "additionalProperties": False,
    "properties": {
        "host": _str,
        "partitions": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "capacity_gb", "inodes"],
                "additionalProperties": False,
                "properties": {"id": _str, "capacity_gb": _num, "inodes": _int},
            },
        },
        "mounts": {"type": "object", "additionalProperties": _str},
        "vo_areas": {"type": "object", "additionalProperties": {"type": "string", "pattern": "^/"}},
        "mss": {
            "type": ["object", "null"],
            "required": ["migrate_latency_s"],
            "additionalProperties": False,
            "properties": {"migrate_latency_s": _num, "residency_s": _num},
        },
        "manual_paths": {"type": "boolean"},
    },
}

_LINK = {
    "type": "object",
    "required": ["bandwidth_mbps"],
    "properties": {"to": _str, "bandwidth_mbps": {"type": "number", "exclusiveMinimum": 0}, "latency_ms": _int},
    "additionalProperties": False,
}

_FAULT = {
    "type": "object",
    "required": ["target", "kind", "process"],
    "additionalProperties": False,
    "properties": {
        "target": {"type": "string", "pattern": "^(rb|ce|se|gis):.+$"},
        "kind": {"enum": ["restart-needed", "db-corruption", "gram-wedge-external"]},
        "process": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["type", "rate_per_day"],
                    "additionalProperties": False,
                    "properties": {"type": {"const": "poisson"}, "rate_per_day": _num},
                },
                {
                    "type": "object",
                    "required": ["type", "times_s"],
                    "additionalProperties": False,
                    "properties": {"type": {"const": "fixed-times"}, "times_s": {"type": "array", "items": _num}},
                },
            ]
        },
        "effect_duration_s": _num,
        "inodes": _int,
    },
}

_WORKLOAD = {
    "type": "object",
    "required": ["name", "vo", "jdl_template", "walltime_s"],
    "additionalProperties": False,
    "properties": {
        "name": _str,
        "vo": _str,
        "jdl_template": {"type": "string"},
        "rate_per_hour": _num,
        "walltime_s": _num,
        "unclean_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "input_data": _strs,
        "rb": _str,
        "subject": _str,
        "issuer_ca": _str,
        "expired": {"type": "boolean"},
        "burst": {
            "type": "object",
            "required": ["count"],
            "additionalProperties": False,
            "properties": {"count": _int, "at_s": _num},
        },
        "times_s": {"type": "array", "items": _num},
        "start_s": _num,
        "stop_s": _num,
    },
}

_RELEASE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "gate_duration_s": {
            "type": "object",
            "additionalProperties": False,
            "properties": {g: _num for g in GATES},
        },
        "tags": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["packages"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "packages": {
                        "type": "array",
                        "items": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
                    },
                    "proposed_at_s": _num,
                    "gate_verdicts": {
                        "type": "object",
                        "additionalProperties": False,
                        "properties": {
                            g: {
                                "type": "object",
                                "additionalProperties": {"oneOf": [{"type": "boolean"}, {"enum": ["pass", "fail"]}]},
                            }
                            for g in GATES
                        },
                    },
                    "failure_prob": {
                        "oneOf": [
                            {"type": "number", "minimum": 0, "maximum": 1},
                            {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
                        ]
                    },
                },
            },
        },
        "bypasses": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind"],
                "additionalProperties": False,
                "properties": {"kind": _str, "testbed": _str, "name": {"type": "string"}, "at_s": _num},
            },
        },
    },
}

SCHEMA = {
    "type": "object",
    "required": ["seed", "duration_h", "sites", "vos"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": U64_MAX},
        "duration_h": {"type": "number", "exclusiveMinimum": 0},
        "cas": _strs,
        "vos": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name"],
                "additionalProperties": False,
                "properties": {"name": _str, "members": _strs},
            },
        },
        "pools": {"type": "object", "additionalProperties": _int},
        "lease_idle_h": _num,
        "gis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "refresh_s": _num,
                "timeout_ms": _int,
                "degradation": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "model": {"enum": ["none", "linear-latency", "stale-prob"]},
                        "base_ms": _int,
                        "k": _num,
                    },
                },
            },
        },
        "default_link": _LINK,
        "sites": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name"],
                "additionalProperties": False,
                "properties": {
                    "name": _str,
                    "ces": {"type": "array", "items": _CE},
                    "ses": {"type": "array", "items": _SE},
                    "links": {"type": "array", "items": {**_LINK, "required": ["to", "bandwidth_mbps"]}},
                },
            },
        },
        "rbs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["rb_id"],
                "additionalProperties": False,
                "properties": {
                    "rb_id": _str,
                    "dual_cpu": {"type": "boolean"},
                    "recovery_s": _num,
                    "retry_s": {"type": "number", "exclusiveMinimum": 0},
                    "detect_s": {"type": ["number", "null"], "minimum": 0},
                    "overflow": {"enum": ["refuse", "queue"]},
                    "max_active": {"type": "integer", "minimum": 1},
                },
            },
        },
        "catalogs": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "properties": {"name_byte_budget": _int},
            },
        },
        "files": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["lfn", "vo", "se"],
                "additionalProperties": False,
                "properties": {"lfn": _str, "vo": _str, "se": _str, "size_bytes": _int, "size_gb": _num},
            },
        },
        "workloads": {"type": "array", "items": _WORKLOAD},
        "replication_jobs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["lfn", "vo", "src", "dst"],
                "additionalProperties": False,
                "properties": {"lfn": _str, "vo": _str, "src": _str, "dst": _str, "at_s": _num},
            },
        },
        "faults": {"oneOf": [{"const": "default"}, {"type": "array", "items": _FAULT}]},
        "actions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["at_s", "kind", "target"],
                "additionalProperties": False,
                "properties": {"at_s": _num, "kind": {"enum": ["gass-cleanup", "rb-recover"]}, "target": _str},
            },
        },
        "fabric": {
            "type": "object",
            "required": ["sources"],
            "additionalProperties": False,
            "properties": {
                "sources": {"type": "object", "additionalProperties": {"type": "string"}},
                "installs": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["node"],
                        "additionalProperties": False,
                        "properties": {"node": _str, "at_s": _num, "force": {"type": "boolean"}},
                    },
                },
                "drift": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["node", "key", "value"],
                        "additionalProperties": False,
                        "properties": {"node": _str, "at_s": _num, "key": _str, "value": {"type": "string"}},
                    },
                },
                "ack_tool": {"type": "boolean"},
                "faulty_objects": {"type": "object", "additionalProperties": _strs},
            },
        },
        "release": _RELEASE,
    },
}


class ScenarioError(Exception):
    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


@dataclass
class Scenario:
    raw: dict[str, Any]
    scenario_hash: str

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def name(self) -> str:
        return self.raw.get("name", "")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False) + "\n"


def _pointer(path) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path)


def _schema_errors(doc: Any) -> list[str]:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    return [f"{_pointer(e.absolute_path)}: {e.message}" for e in errors]


def _cross_ref_errors(doc: dict) -> list[str]:
    errs: list[str] = []
    vos = {v["name"] for v in doc.get("vos", [])}
    cas = set(doc.get("cas", []))
    site_names: set[str] = set()
    ce_ids: set[str] = set()
    se_areas: dict[str, dict] = {}
    for i, site in enumerate(doc.get("sites", [])):
        if site["name"] in site_names:
            errs.append(f"/sites/{i}/name: duplicate site {site['name']!r}")
        site_names.add(site["name"])
    for i, site in enumerate(doc.get("sites", [])):
        for j, ce in enumerate(site.get("ces", [])):
            where = f"/sites/{i}/ces/{j}"
            if ce["ce_id"] in ce_ids:
                errs.append(f"{where}/ce_id: duplicate CE {ce['ce_id']!r}")
            ce_ids.add(ce["ce_id"])
            if ce.get("site", site["name"]) != site["name"]:
                errs.append(f"{where}/site: CE listed under site {site['name']!r}")
            for k, vo in enumerate(ce.get("vos", [])):
                if vo not in vos:
                    errs.append(f"{where}/vos/{k}: unknown VO {vo!r}")
        for j, se in enumerate(site.get("ses", [])):
            where = f"/sites/{i}/ses/{j}"
            if se["host"] in se_areas:
                errs.append(f"{where}/host: duplicate SE {se['host']!r}")
            se_areas[se["host"]] = se.get("vo_areas", {})
            pids = [p["id"] for p in se.get("partitions", [])]
            if len(set(pids)) != len(pids):
                errs.append(f"{where}/partitions: duplicate partition ids")
            for mount, pid in se.get("mounts", {}).items():
                if not mount.startswith("/"):
                    errs.append(f"{where}/mounts: mount path {mount!r} must be absolute")
                if pid not in pids:
                    errs.append(f"{where}/mounts: {mount!r} names unknown partition {pid!r}")
            mounts = [m.rstrip("/") or "/" for m in se.get("mounts", {})]
            for vo, area in se.get("vo_areas", {}).items():
                if vo not in vos:
                    errs.append(f"{where}/vo_areas/{vo}: unknown VO {vo!r}")
                if not any(area == m or area.startswith(m.rstrip("/") + "/") for m in mounts):
                    errs.append(f"{where}/vo_areas/{vo}: {area!r} is not under any mount")
        for j, link in enumerate(site.get("links", [])):
            if link["to"] not in site_names:
                errs.append(f"/sites/{i}/links/{j}/to: unknown site {link['to']!r}")
    rb_ids = [rb["rb_id"] for rb in doc.get("rbs", [])]
    if len(set(rb_ids)) != len(rb_ids):
        errs.append("/rbs: duplicate rb_id")
    for vo in doc.get("pools", {}):
        if vo not in vos:
            errs.append(f"/pools/{vo}: unknown VO {vo!r}")
    for vo in doc.get("catalogs", {}):
        if vo not in vos:
            errs.append(f"/catalogs/{vo}: unknown VO {vo!r}")
    for i, f in enumerate(doc.get("files", [])):
        if f["vo"] not in vos:
            errs.append(f"/files/{i}/vo: unknown VO {f['vo']!r}")
        if f["se"] not in se_areas:
            errs.append(f"/files/{i}/se: unknown SE {f['se']!r}")
        elif f["vo"] not in se_areas[f["se"]]:
            errs.append(f"/files/{i}/se: {f['se']} has no area for {f['vo']}")
        if ("size_bytes" in f) == ("size_gb" in f):
            errs.append(f"/files/{i}: exactly one of size_bytes, size_gb")
    if doc.get("workloads") and not rb_ids:
        errs.append("/rbs: workloads need at least one resource broker")
    for i, w in enumerate(doc.get("workloads", [])):
        where = f"/workloads/{i}"
        if w["vo"] not in vos:
            errs.append(f"{where}/vo: unknown VO {w['vo']!r}")
        if "rb" in w and w["rb"] not in rb_ids:
            errs.append(f"{where}/rb: unknown RB {w['rb']!r}")
        if "issuer_ca" not in w and not cas:
            errs.append(f"{where}/issuer_ca: no CA given and scenario lists none")
        try:
            ad = parse_jdl(w["jdl_template"])
        except JdlError as exc:
            errs.append(f"{where}/jdl_template: {exc}")
        else:
            if ad.virtual_organisation not in (None, w["vo"]):
                errs.append(f"{where}/jdl_template: VirtualOrganisation {ad.virtual_organisation!r} != {w['vo']!r}")
    for i, r in enumerate(doc.get("replication_jobs", [])):
        if r["vo"] not in vos:
            errs.append(f"/replication_jobs/{i}/vo: unknown VO {r['vo']!r}")
        for key in ("src", "dst"):
            if r[key] not in se_areas:
                errs.append(f"/replication_jobs/{i}/{key}: unknown SE {r[key]!r}")
    faults = doc.get("faults", [])
    if isinstance(faults, list):
        for i, f in enumerate(faults):
            family, _, name = f["target"].partition(":")
            known = {
                "rb": set(rb_ids),
                "ce": ce_ids,
                "se": set(se_areas),
                "gis": site_names | {"top"},
            }[family]
            if name not in known:
                errs.append(f"/faults/{i}/target: unknown-target {f['target']!r}")
            elif f["kind"] == "db-corruption" and family != "rb":
                errs.append(f"/faults/{i}/kind: db-corruption needs an rb target")
            elif f["kind"] == "gram-wedge-external" and family != "ce":
                errs.append(f"/faults/{i}/kind: gram-wedge-external needs a ce target")
    for i, a in enumerate(doc.get("actions", [])):
        family = {"gass-cleanup": ce_ids, "rb-recover": set(rb_ids)}[a["kind"]]
        if a["target"] not in family:
            errs.append(f"/actions/{i}/target: unknown target {a['target']!r}")
    fabric = doc.get("fabric")
    if fabric:
        try:
            compiled = compile_profiles(fabric["sources"])
        except FabricError as exc:
            errs.append(f"/fabric/sources: {exc}")
        else:
            for key in ("installs", "drift"):
                for i, item in enumerate(fabric.get(key, [])):
                    if item["node"] not in compiled:
                        errs.append(f"/fabric/{key}/{i}/node: no profile for {item['node']!r}")
    return errs


def _with_defaults(doc: dict) -> dict:
    doc = copy.deepcopy(doc)
    doc.setdefault("cas", [])
    doc.setdefault("pools", {})
    doc.setdefault("lease_idle_h", 24)
    gis = doc.setdefault("gis", {})
    gis.setdefault("refresh_s", 30)
    gis.setdefault("timeout_ms", None)
    deg = gis.setdefault("degradation", {})
    deg.setdefault("model", "none")
    deg.setdefault("base_ms", 0)
    deg.setdefault("k", 0)
    link = doc.setdefault("default_link", {})
    link.setdefault("bandwidth_mbps", 100)
    link.setdefault("latency_ms", 1)
    for vo in doc["vos"]:
        vo.setdefault("members", [])
    for site in doc["sites"]:
        site.setdefault("links", [])
        for ce in site.setdefault("ces", []):
            ce.setdefault("site", site["name"])
            ce.setdefault("cpus_per_node", 2)
            ce.setdefault("gass_cache_inodes", 1_000_000)
            ce.setdefault("files_per_job", 128)
            ce.setdefault("clean_leak_fraction", 0.1)
            ce.setdefault("vos", [])
            cleanup = ce.setdefault("cleanup", {})
            cleanup.setdefault("auto_threshold", None)
            cleanup.setdefault("base_s", 600)
            cleanup.setdefault("per_inode_ms", 100)
        for se in site.setdefault("ses", []):
            se.setdefault("mss", None)
            se.setdefault("manual_paths", False)
    for rb in doc.setdefault("rbs", []):
        rb.setdefault("dual_cpu", True)
        rb.setdefault("recovery_s", 1800)
        rb.setdefault("retry_s", 300)
        rb.setdefault("detect_s", 3600)
        rb.setdefault("overflow", "refuse")
        rb.setdefault("max_active", 512)
    doc.setdefault("catalogs", {})
    for vo in doc["vos"]:
        doc["catalogs"].setdefault(vo["name"], {})
        doc["catalogs"][vo["name"]].setdefault("name_byte_budget", 64_000)
    doc.setdefault("files", [])
    members = {v["name"]: v["members"] for v in doc["vos"]}
    for w in doc.setdefault("workloads", []):
        w.setdefault("rate_per_hour", 0)
        w.setdefault("unclean_fraction", 0.0)
        w.setdefault("input_data", [])
        w.setdefault("subject", members[w["vo"]][0] if members.get(w["vo"]) else f"/O=Grid/CN={w['name']}")
        if doc["cas"]:
            w.setdefault("issuer_ca", doc["cas"][0])
        w.setdefault("expired", False)
        w.setdefault("start_s", 0)
    for r in doc.setdefault("replication_jobs", []):
        r.setdefault("at_s", 0)
    doc.setdefault("faults", [])
    doc.setdefault("actions", [])
    return doc


def _decode(data: Union[bytes, str, dict]) -> tuple[Any, str]:
    if isinstance(data, dict):
        text = canonical_json(data)
        return copy.deepcopy(data), hashlib.sha256(text.encode()).hexdigest()
    raw = data.encode() if isinstance(data, str) else data
    return json.loads(raw.decode("utf-8")), hashlib.sha256(raw).hexdigest()


def validate(data: Union[bytes, str, dict]) -> list[str]:
    """Every problem with the scenario (empty list when valid)."""
    try:
        doc, _ = _decode(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        return [f"/: not valid JSON: {exc}"]
    errors = _schema_errors(doc)
    if errors:
        return errors
    return _cross_ref_errors(doc)


def load_scenario(data: Union[bytes, str, dict]) -> Scenario:
    errors = validate(data)
    if errors:
        raise ScenarioError(errors)
    doc, digest = _decode(data)
    return Scenario(_with_defaults(doc), digest)


def load_scenario_file(path: Union[str, Path]) -> Scenario:
    return load_scenario(Path(path).read_bytes())


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("gridtb") / "scenarios"
    return {p.name[: -len(".json")]: Path(str(p)) for p in sorted(root.iterdir(), key=lambda p: p.name) if p.name.endswith(".json")}


def baseline_variant(doc: dict) -> dict:
    """Same scenario with every fault removed and every capacity made ample."""
    doc = copy.deepcopy(doc)
    doc["faults"] = []
    doc["actions"] = []
    huge = 10**12
    doc["pools"] = {vo["name"]: 999 for vo in doc.get("vos", [])}
    doc["catalogs"] = {vo["name"]: {"name_byte_budget": huge} for vo in doc.get("vos", [])}
    if "gis" in doc:
        doc["gis"].pop("degradation", None)
        doc["gis"].pop("timeout_ms", None)
    for site in doc.get("sites", []):
        for ce in site.get("ces", []):
            ce["gass_cache_inodes"] = huge
            ce.pop("cleanup", None)
        for se in site.get("ses", []):
            se["manual_paths"] = False
            for part in se["partitions"]:
                part["capacity_gb"] = 10**6
                part["inodes"] = huge
    for rb in doc.get("rbs", []):
        rb["max_active"] = 10**9
    for w in doc.get("workloads", []):
        w["expired"] = False
    if "fabric" in doc:
        doc["fabric"].pop("faulty_objects", None)
    return doc

