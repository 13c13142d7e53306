"""sensorcloud-harness: run adversary scenarios and transport attack trials."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from sensorcloud.harness.scenario import builtin_scenarios, junit_xml, load_scenario, run_scenario
from sensorcloud.harness.shim import ATTACKS, C2S, S2C
from sensorcloud.harness.trials import run_attack_trial, unpinned_handshake_completes


def _cmd_run(args: argparse.Namespace) -> int:
    names = builtin_scenarios() if args.all else args.scenarios
    if not names:
        print("error: name at least one scenario or pass --all", file=sys.stderr)
        return 2
    reports = []
    for name in names:
        report = run_scenario(load_scenario(name))
        reports.append(report)
        verdicts = " ".join(f"{k}={v}" for k, v in report.verdicts().items())
        state = "PASS" if report.passed else "FAIL"
        print(f"{state} {report.scenario} ({report.metrics['elapsed_s']:.1f}s) {verdicts}")
        if report.error:
            print(f"  {report.error}")
        for c in report.checks:
            if not c.passed or args.verbose:
                print(f"  [{'ok' if c.passed else 'FAIL'}] {c.event:02d} {c.op} {c.name}: {c.detail}")
    if args.junit:
        Path(args.junit).write_text(junit_xml(reports))
    if args.report:
        Path(args.report).write_text(json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n")
    return 0 if all(r.passed for r in reports) else 1


def _cmd_trials(args: argparse.Namespace) -> int:
    kinds = args.kinds or [k for k in ATTACKS if k != "drop"]
    ok = True
    for kind in kinds:
        for direction in (C2S, S2C):
            results = [run_attack_trial(kind, seed, direction) for seed in range(args.trials)]
            closed = sum(r.failed_closed for r in results)
            ok &= closed == len(results)
            print(f"{kind:9s} {direction}: {closed}/{len(results)} failed closed")
    for case in ("responder-unpinned", "initiator-unpinned", "impostor"):
        done = unpinned_handshake_completes(case)
        ok &= not done
        print(f"handshake {case}: {'COMPLETED' if done else 'refused'}")
    return 0 if ok else 1


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="sensorcloud-harness", description="Adversary scenarios for sensorcloud.")
    sub = p.add_subparsers(dest="cmd", required=True)
    sp = sub.add_parser("list", help="list built-in scenarios")
    sp = sub.add_parser("run", help="run scenarios and report verdicts")
    sp.add_argument("scenarios", nargs="*", help="built-in names or paths to scenario JSON files")
    sp.add_argument("--all", action="store_true", help="run every built-in scenario")
    sp.add_argument("--junit", help="write a JUnit XML report here")
    sp.add_argument("--report", help="write the stable JSON verdict report here")
    sp.add_argument("-v", "--verbose", action="store_true", help="print passing checks too")
    sp = sub.add_parser("trials", help="seeded wire-attack trials against the transport")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--kinds", nargs="*", choices=ATTACKS)
    args = p.parse_args(argv)
    if args.cmd == "list":
        print("\n".join(builtin_scenarios()))
        return 0
    if args.cmd == "run":
        return _cmd_run(args)
    return _cmd_trials(args)


if __name__ == "__main__":
    sys.exit(main())
