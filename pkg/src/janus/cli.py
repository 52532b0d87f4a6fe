"""Command-line driver: analyze, harden, validate, simulate.

Exit status: 0 success, 1 violation or leak, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import InputDecls, MissingSignature, Signatures, TagSpaceExhausted, analyze
from .asm import ParseError, emit_program, parse_program
from .attacks import ScenarioError, harden_scenario, load_scenario, run_attack
from .instrument import InstrumentError, harden, strip_spectre
from .policy import (InstrumentationPlan, PolicyParseError, PolicySet, UnresolvedLoc,
                     load_external_policy, merge_policies)
from .sim import InvalidMistrain, StepBudgetExceeded
from .validator import stats, validate

INPUT_ERRORS = (OSError, ParseError, PolicyParseError, UnresolvedLoc, MissingSignature,
                TagSpaceExhausted, InstrumentError, ScenarioError, InvalidMistrain,
                StepBudgetExceeded, ValueError, KeyError)


class UsageError(Exception):
    pass


def _pins(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, val = item.rpartition("=")
        if not sep:
            raise UsageError(f"--pin expects KEY=TAG, got {item!r}")
        out[key] = int(val, 0)
    return out


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _policies(asm, files, sig, inputs, seed, pins) -> PolicySet:
    ps = PolicySet()
    if sig:
        decl = InputDecls.parse(Path(inputs).read_text()) if inputs else InputDecls()
        ps = analyze(asm, Signatures.parse(Path(sig).read_text()), decl, seed, pins)
    for f in files:
        ps = merge_policies(ps, load_external_policy(Path(f).read_text()))
    return ps


def cmd_analyze(a) -> int:
    p = parse_program(Path(a.asm).read_text())
    decl = InputDecls.parse(Path(a.inputs).read_text()) if a.inputs else InputDecls()
    ps = analyze(p, Signatures.parse(Path(a.sig).read_text()), decl, a.seed, _pins(a.pin))
    _write(a.output, ps.dump())
    return 0


def cmd_harden(a) -> int:
    p = parse_program(Path(a.asm).read_text())
    ps = _policies(p, a.policy, a.sig, a.inputs, a.seed, _pins(a.pin))
    out, plan = harden(p, ps, mf=a.mf, cr=a.cr)
    if a.strip_janus:
        out = strip_spectre(out)
    _write(a.output, emit_program(out))
    plan_path = a.plan or (f"{a.output}.plan.json" if a.output and a.output != "-" else None)
    if plan_path:
        Path(plan_path).write_text(plan.to_json())
    if a.emit_policy:
        Path(a.emit_policy).write_text(ps.dump())
    report = stats(p, out)
    if a.stats:
        Path(a.stats).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"{report['instructions_before']} -> {report['instructions_after']} instructions "
          f"({report['overhead_pct']:+.2f}%)", file=sys.stderr)
    return 0


def cmd_validate(a) -> int:
    text = Path(a.asm).read_text()
    try:
        plan = InstrumentationPlan.from_json(Path(a.plan).read_text())
    except FileNotFoundError:
        raise UsageError(f"plan file {a.plan} not found") from None
    ps = PolicySet()
    for f in a.policy:
        ps = merge_policies(ps, load_external_policy(Path(f).read_text()))
    violations = validate(text, plan, ps)
    for v in violations:
        print(v)
    print(f"{len(violations)} violation(s)")
    return 1 if violations else 0


def cmd_simulate(a) -> int:
    sc = load_scenario(a.scenario)
    program = None
    if a.after:
        program, _, _ = harden_scenario(sc, mf=a.mf, cr=a.cr, seed=a.seed)
    verdict = run_attack(sc, program)
    phase = "after" if a.after else "before"
    print(f"{sc.variant} {phase}: {verdict.summary()}")
    if a.dump_trace:
        traces = verdict.traces or [verdict.trace]
        for i, t in enumerate(traces):
            if len(traces) > 1:
                print(f"-- guess {i}")
            sys.stdout.write(t.dump())
    return 1 if verdict.leaked else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="janus", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def analysis_opts(sp, required: bool):
        sp.add_argument("--sig", required=required, help="function signature sidecar")
        sp.add_argument("--inputs", help="input declarations for taint analysis")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--pin", action="append", default=[], metavar="KEY=TAG",
                        help="fix a tag, e.g. class:handler=0x9c2")

    sp = sub.add_parser("analyze", help="derive a policy from a program")
    sp.add_argument("asm")
    analysis_opts(sp, True)
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("harden", help="instrument a program")
    sp.add_argument("asm")
    sp.add_argument("policy", nargs="*", help="external policy files")
    analysis_opts(sp, False)
    sp.add_argument("--mf", action=argparse.BooleanOptionalAction, default=True,
                    help="modifier fusion")
    sp.add_argument("--cr", action=argparse.BooleanOptionalAction, default=True,
                    help="carrier reuse")
    sp.add_argument("--strip-janus", action="store_true",
                    help="drop branch-outcome protection after hardening")
    sp.add_argument("-o", "--output")
    sp.add_argument("--plan", help="plan output (default: <output>.plan.json)")
    sp.add_argument("--stats", help="write stats JSON here")
    sp.add_argument("--emit-policy", help="write the merged policy here")
    sp.set_defaults(fn=cmd_harden)

    sp = sub.add_parser("validate", help="check hardened assembly against its plan")
    sp.add_argument("asm")
    sp.add_argument("plan")
    sp.add_argument("policy", nargs="*")
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("simulate", help="run an attack scenario")
    sp.add_argument("scenario")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--before", action="store_true", help="unhardened program (default)")
    g.add_argument("--after", action="store_true", help="hardened program")
    sp.add_argument("--dump-trace", action="store_true")
    sp.add_argument("--mf", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--cr", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_simulate)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.fn(a)
    except UsageError as e:
        print(f"janus: {e}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as e:
        print(f"janus: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
