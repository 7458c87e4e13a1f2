"""Declarative node configuration: a profile compiler and the node agent that applies it.

Source files are line oriented::

    #include <base.h>
    auth.rootpw = s3cret
    disk.partitions += hda1

Templates are files named ``<name>.h``; every other file is a node profile
named after the file. Includes are resolved depth-first, each template at
most once, and the node's own lines are applied last (last write wins).
"""

from __future__ import annotations

import hashlib
import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

MAX_PRIMARY_PARTITIONS = 4
TEMPLATE_SUFFIX = ".h"
STANDARD_OBJECTS = ("auth", "disk", "edg-service", "nis-exempt")


class FabricError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


_INCLUDE_RE = re.compile(r"^#include\s+<([^>]+)>\s*$")
_ASSIGN_RE = re.compile(r"^([A-Za-z0-9_-]+)\.([A-Za-z0-9_.-]+)\s*(\+=|=)\s*(.*?)\s*$")


@dataclass
class ProfileSource:
    name: str
    includes: list[str] = field(default_factory=list)
    resources: list[tuple[str, str, str]] = field(default_factory=list)

    @classmethod
    def parse(cls, name: str, text: str) -> "ProfileSource":
        src = cls(name)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            m = _INCLUDE_RE.match(line)
            if m:
                if src.resources:
                    raise FabricError("syntax", f"{name}:{lineno}: #include after assignments")
                src.includes.append(m.group(1))
                continue
            if line.startswith("#"):
                continue
            m = _ASSIGN_RE.match(line)
            if m is None:
                raise FabricError("syntax", f"{name}:{lineno}: {raw!r}")
            component, key, op, value = m.groups()
            src.resources.append((f"{component}.{key}", op, value))
        return src


@dataclass(frozen=True)
class CompiledProfile:
    node: str
    version: str
    resources: Mapping[str, Mapping[str, tuple[str, ...]]]

    def flat(self) -> dict[str, tuple[str, ...]]:
        return {f"{c}.{k}": v for c, keys in self.resources.items() for k, v in keys.items()}

    def to_xml(self) -> str:
        return _render(self.node, self.version, self.resources)

    @classmethod
    def from_xml(cls, text: str) -> "CompiledProfile":
        root = ET.fromstring(text)
        if root.tag != "profile":
            raise FabricError("bad-profile", f"root element {root.tag}")
        resources: dict[str, dict[str, tuple[str, ...]]] = {}
        for comp in root.findall("component"):
            keys: dict[str, list[str]] = {}
            for res in comp.findall("resource"):
                keys.setdefault(res.get("key"), []).append(res.text or "")
            resources[comp.get("name")] = {k: tuple(v) for k, v in keys.items()}
        return cls(root.get("node"), root.get("version"), resources)


def _render(node: str, version: str, resources) -> str:
    root = ET.Element("profile", {"node": node, "version": version})
    for comp in sorted(resources):
        comp_el = ET.SubElement(root, "component", {"name": comp})
        for key in sorted(resources[comp]):
            for value in resources[comp][key]:
                ET.SubElement(comp_el, "resource", {"key": key}).text = value
    return ET.tostring(root, encoding="unicode")


def _content_hash(node: str, resources) -> str:
    body = _render(node, "", resources)
    return hashlib.sha256(body.encode()).hexdigest()[:16]


def _partition_count(values) -> int:
    return sum(len(v.split()) for v in values)


def compile_profiles(sources: Mapping[str, str]) -> dict[str, CompiledProfile]:
    """Compile every node profile in ``sources`` (file name -> text)."""
    parsed = {name: ProfileSource.parse(name, text) for name, text in sources.items()}
    templates = {n: s for n, s in parsed.items() if n.endswith(TEMPLATE_SUFFIX)}
    nodes = {n: s for n, s in parsed.items() if not n.endswith(TEMPLATE_SUFFIX)}
    return {name: _compile_node(src, templates) for name, src in sorted(nodes.items())}


def _compile_node(node: ProfileSource, templates: Mapping[str, ProfileSource]) -> CompiledProfile:
    ordered: list[ProfileSource] = []
    done: set[str] = set()

    def visit(src: ProfileSource, stack: tuple[str, ...]) -> None:
        for inc in src.includes:
            if inc in stack:
                raise FabricError("cycle-in-includes", " -> ".join(stack + (inc,)))
            if inc in done:
                continue
            tmpl = templates.get(inc)
            if tmpl is None:
                raise FabricError("unknown-template", f"{inc} (from {src.name})")
            visit(tmpl, stack + (inc,))
            done.add(inc)
            ordered.append(tmpl)

    visit(node, (node.name,))
    ordered.append(node)

    flat: dict[str, list[str]] = {}
    for src in ordered:
        for path, op, value in src.resources:
            if op == "=":
                flat[path] = [value]
            else:
                flat.setdefault(path, []).append(value)

    resources: dict[str, dict[str, tuple[str, ...]]] = {}
    for path, values in flat.items():
        comp, key = path.split(".", 1)
        resources.setdefault(comp, {})[key] = tuple(values)
    parts = resources.get("disk", {}).get("partitions", ())
    if _partition_count(parts) > MAX_PRIMARY_PARTITIONS:
        raise FabricError(
            "too-many-partitions",
            f"{node.name}: {_partition_count(parts)} > {MAX_PRIMARY_PARTITIONS} primary partitions",
        )
    return CompiledProfile(node.name, _content_hash(node.name, resources), resources)


def compile_directory(srcdir: Path) -> dict[str, CompiledProfile]:
    sources = {p.name: p.read_text() for p in sorted(Path(srcdir).iterdir()) if p.is_file()}
    return compile_profiles(sources)


# -- node agent ------------------------------------------------------------------


@dataclass
class ObjectResult:
    status: str  # ok | failed | skipped
    changes: list[dict] = field(default_factory=list)
    error: str = ""

    def as_dict(self) -> dict:
        return {"status": self.status, "changes": self.changes, "error": self.error}


@dataclass
class ApplyReport:
    version: str
    objects: dict[str, ObjectResult]
    skipped: bool = False

    @property
    def change_count(self) -> int:
        return sum(len(r.changes) for r in self.objects.values())

    @property
    def ok(self) -> bool:
        return all(r.status != "failed" for r in self.objects.values())

    def as_dict(self) -> dict:
        return {
            "version": self.version,
            "skipped": self.skipped,
            "changes": self.change_count,
            "objects": {k: v.as_dict() for k, v in sorted(self.objects.items())},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ApplyReport":
        objects = {k: ObjectResult(v["status"], v["changes"], v.get("error", "")) for k, v in raw["objects"].items()}
        return cls(raw["version"], objects, raw.get("skipped", False))


@dataclass
class NodeState:
    node: str = ""
    applied_version: Optional[str] = None
    live_values: dict[str, list[str]] = field(default_factory=dict)
    last_report: Optional[ApplyReport] = None
    faulty_objects: set[str] = field(default_factory=set)

    def to_json(self) -> str:
        return json.dumps(
            {
                "node": self.node,
                "applied_version": self.applied_version,
                "live_values": self.live_values,
                "last_report": self.last_report.as_dict() if self.last_report else None,
                "faulty_objects": sorted(self.faulty_objects),
            },
            sort_keys=True,
            indent=2,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NodeState":
        raw = json.loads(text)
        report = raw.get("last_report")
        return cls(
            raw.get("node", ""),
            raw.get("applied_version"),
            {k: list(v) for k, v in raw.get("live_values", {}).items()},
            ApplyReport.from_dict(report) if report else None,
            set(raw.get("faulty_objects", [])),
        )


Handler = Callable[[str, Mapping[str, tuple[str, ...]], NodeState], list[dict]]


def _set_keys(component: str, subtree, node: NodeState) -> list[dict]:
    changes = []
    for key in sorted(subtree):
        path = f"{component}.{key}"
        want = list(subtree[key])
        have = node.live_values.get(path)
        if have != want:
            node.live_values[path] = want
            changes.append({"key": path, "old": have, "new": want})
    return changes


def exempt_components(profile: CompiledProfile) -> set[str]:
    values = profile.resources.get("nis-exempt", {}).get("components", ())
    return {tok for v in values for tok in v.split()}


HANDLERS: dict[str, Handler] = {name: _set_keys for name in STANDARD_OBJECTS}


def managed_keys(profile: CompiledProfile) -> dict[str, tuple[str, ...]]:
    exempt = exempt_components(profile)
    return {k: v for k, v in profile.flat().items() if k.split(".", 1)[0] not in exempt}


def apply(profile: CompiledProfile, node: NodeState, force: bool = False) -> ApplyReport:
    """Run every object on its subtree. Failures are local to the object.

    The report is kept on the node only; nothing is sent back to the server.
    """
    if profile.version == node.applied_version and not force:
        # nothing to do; the previous report stays the one the ack tool sees
        return ApplyReport(profile.version, {}, skipped=True)
    exempt = exempt_components(profile)
    results: dict[str, ObjectResult] = {}
    for component in sorted(profile.resources):
        if component in exempt:
            results[component] = ObjectResult("skipped")
            continue
        handler = HANDLERS.get(component)
        if handler is None:
            results[component] = ObjectResult("failed", error="no object registered")
            continue
        if component in node.faulty_objects:
            results[component] = ObjectResult("failed", error="object script failed")
            continue
        results[component] = ObjectResult("ok", handler(component, profile.resources[component], node))
    report = ApplyReport(profile.version, results)
    if report.ok:
        node.applied_version = profile.version
    node.last_report = report
    return report


def ack_status(node: NodeState) -> dict:
    """What the explicit acknowledgement tool reports for ``node``."""
    if node.last_report is None:
        raise FabricError("never-applied", node.node)
    return {
        "applied_version": node.applied_version,
        "objects": {k: v.status for k, v in sorted(node.last_report.objects.items())},
    }
