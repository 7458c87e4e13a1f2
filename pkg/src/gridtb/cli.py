"""Command line entry point: ``gridtb run|validate|fabric|release``.

Exit codes: 0 success, 1 scenario or input error, 2 internal abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from . import __version__
from .fabric import CompiledProfile, FabricError, NodeState, ack_status, apply, compile_directory
from .grid import Grid
from .release import ReleaseError, ReleasePlan
from .scenario import ScenarioError, baseline_variant, canonical_json, load_scenario, validate
from .sim import SimulationError, Simulator

EXIT_OK, EXIT_SCENARIO, EXIT_ABORT = 0, 1, 2


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _parse_seed_range(text: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected a..b, got {text!r}")
    a, b = int(lo), int(hi)
    if b < a:
        raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
    return list(range(a, b + 1))


def _load(path: str, strip_faults: bool):
    data = Path(path).read_bytes()
    if strip_faults:
        errors = validate(data)
        if errors:
            raise ScenarioError(errors)
        return load_scenario(baseline_variant(json.loads(data)))
    return load_scenario(data)


def _run_one(path: str, seed: Optional[int], strip_faults: bool, trace: bool):
    grid = Grid(_load(path, strip_faults), seed=seed, trace=trace)
    report = grid.run()
    return report, grid.sim.trace


def _run_seed(args: tuple) -> tuple[int, str]:
    path, seed, strip = args
    report, _ = _run_one(path, seed, strip, False)
    return seed, canonical_json(report)


def cmd_run(ns) -> int:
    if ns.seeds:
        out = Path(ns.out) if ns.out else Path(".")
        out.mkdir(parents=True, exist_ok=True)
        work = [(ns.scenario, s, ns.strip_faults) for s in ns.seeds]
        if ns.jobs > 1:
            with ProcessPoolExecutor(max_workers=ns.jobs) as pool:
                results = list(pool.map(_run_seed, work))
        else:
            results = [_run_seed(w) for w in work]
        for seed, text in results:
            (out / f"report-{seed}.json").write_text(text, encoding="utf-8")
        print(f"{len(results)} reports written to {out}")
        return EXIT_OK

    report, trace = _run_one(ns.scenario, ns.seed, ns.strip_faults, bool(ns.trace))
    text = canonical_json(report)
    if ns.out:
        Path(ns.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if ns.trace:
        with open(ns.trace, "w", encoding="utf-8") as fh:
            for entry in trace:
                fh.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")
    return EXIT_OK


def cmd_validate(ns) -> int:
    errors = validate(Path(ns.scenario).read_bytes())
    for e in errors:
        print(e)
    if errors:
        return EXIT_SCENARIO
    print("valid")
    return EXIT_OK


def cmd_fabric_compile(ns) -> int:
    profiles = compile_directory(Path(ns.srcdir))
    out = Path(ns.output)
    out.mkdir(parents=True, exist_ok=True)
    for node, profile in profiles.items():
        (out / f"{node}.xml").write_text(profile.to_xml() + "\n", encoding="utf-8")
        print(f"{node} {profile.version}")
    return EXIT_OK


def cmd_fabric_apply(ns) -> int:
    profile = CompiledProfile.from_xml(Path(ns.profile).read_text(encoding="utf-8"))
    state_path = Path(ns.state)
    node = NodeState.from_json(state_path.read_text()) if state_path.exists() else NodeState(profile.node)
    report = apply(profile, node, force=ns.force)
    state_path.write_text(node.to_json(), encoding="utf-8")
    sys.stdout.write(canonical_json(report.as_dict()))
    return EXIT_OK


def cmd_fabric_ack(ns) -> int:
    node = NodeState.from_json(Path(ns.state).read_text())
    sys.stdout.write(canonical_json(ack_status(node)))
    return EXIT_OK


def cmd_release_simulate(ns) -> int:
    plan = json.loads(Path(ns.plan).read_bytes())
    sim = Simulator(ns.seed)
    runner = ReleasePlan(sim, plan)
    runner.start()
    while sim.peek() is not None:
        sim.run_until(sim.peek())
    sys.stdout.write(canonical_json(runner.summary()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridtb", description="Grid testbed simulator.")
    parser.add_argument("--version", action="version", version=f"gridtb {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its report")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--out", help="report path (directory with --seeds); stdout if omitted")
    run.add_argument("--trace", help="write the full event trace as JSON lines")
    run.add_argument("--strip-faults", action="store_true", help="run the fault-free, ample-capacity variant")
    run.add_argument("--seeds", type=_parse_seed_range, help="batch mode over seeds a..b (inclusive)")
    run.add_argument("--jobs", type=int, default=1, help="parallel runs in batch mode")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a scenario and list every error")
    val.add_argument("scenario")
    val.set_defaults(func=cmd_validate)

    fabric = sub.add_parser("fabric", help="node configuration tools")
    fsub = fabric.add_subparsers(dest="fabric_command", required=True)
    comp = fsub.add_parser("compile", help="compile profile sources to XML")
    comp.add_argument("srcdir")
    comp.add_argument("-o", "--output", required=True)
    comp.set_defaults(func=cmd_fabric_compile)
    app = fsub.add_parser("apply", help="apply a profile to a node state file")
    app.add_argument("profile")
    app.add_argument("--state", required=True)
    app.add_argument("--force", action="store_true")
    app.set_defaults(func=cmd_fabric_apply)
    ack = fsub.add_parser("ack", help="report what a node last applied")
    ack.add_argument("--state", required=True)
    ack.set_defaults(func=cmd_fabric_ack)

    release = sub.add_parser("release", help="release procedure tools")
    rsub = release.add_subparsers(dest="release_command", required=True)
    sim = rsub.add_parser("simulate", help="drive a release plan through its gates")
    sim.add_argument("plan")
    sim.add_argument("--seed", type=int, default=0)
    sim.set_defaults(func=cmd_release_simulate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except ScenarioError as exc:
        for e in exc.errors:
            _err(e)
        return EXIT_SCENARIO
    except (FabricError, ReleaseError, OSError, json.JSONDecodeError, KeyError) as exc:
        _err(f"error: {exc}")
        return EXIT_SCENARIO
    except SimulationError as exc:
        _err(f"internal abort: {exc}")
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
