"""Acceptance criteria 1-11, one PASS/FAIL line each.

Run with ``pytest -v -s tests/test_acceptance.py`` to see the lines inline;
they are also written to the terminal summary.
"""
from collections import Counter

import pytest

from conftest import (CORPUS, MUTANTS, SCENARIOS, by_variant, dispatch_hardened, hardened,
                      scenario)
from janus.asm import emit_program, resolve_loc
from janus.attacks import PACMAN_GUESSES, harden_scenario, load_scenario, run_attack, run_honest
from janus.instrument import FALLBACK_REG, TAG_REG, fuse_cfi_context, strip_spectre
from janus.validator import stats, validate

RESULTS: dict[int, str] = {}
GUARD_CAUSES = {"PAC-mismatch", "BTI-mismatch"}
ABLATIONS = {"full": (True, True), "mf": (True, False), "cr": (False, True), "none": (False, False)}


def report(n: int, failures: list, detail: str) -> None:
    status = "PASS" if not failures else "FAIL"
    line = f"criterion {n:>2} {status}: {detail}"
    if failures:
        line += " | " + "; ".join(map(str, failures[:5]))
    RESULTS[n] = line
    print(line)
    assert not failures, line


def _pacs(p) -> int:
    return sum(1 for f in p.functions for i in f.instrs()
               if i.mech and i.mnemonic in ("pacia", "pacda"))


def test_c01_spectre_v1_v2_v5():
    bad, counts = [], Counter()
    for name in by_variant("V1", "V2", "V5"):
        sc = scenario(name)
        counts[sc.variant] += 1
        before = run_attack(sc)
        after = run_attack(sc, hardened(name)[0])
        if not before.leaked:
            bad.append(f"{name}: no leak before hardening")
        if after.leaked:
            bad.append(f"{name}: leaks after hardening ({after.summary()})")
        if not GUARD_CAUSES & set(after.squash_causes):
            bad.append(f"{name}: no PAC/BTI squash recorded")
    for v in ("V1", "V2", "V5"):
        if counts[v] < 6:
            bad.append(f"only {counts[v]} {v} programs")
    report(1, bad, "leak before, squash after on "
           + ", ".join(f"{counts[v]} {v}" for v in ("V1", "V2", "V5")))


def test_c02_pacman():
    bad = []
    names = by_variant("PACMAN")
    for name in names:
        sc = scenario(name)
        before = run_attack(sc)
        obs = [t.observable() for t in before.traces]
        if len(before.traces) != PACMAN_GUESSES or all(o == obs[0] for o in obs[1:]):
            bad.append(f"{name}: unhardened guesses indistinguishable")
        after = run_attack(sc, hardened(name)[0])
        dumps = {t.dump() for t in after.traces}
        if len(after.traces) != PACMAN_GUESSES or len(dumps) != 1:
            bad.append(f"{name}: hardened traces differ across guesses")
    report(2, bad, f"{len(names)} oracles, {PACMAN_GUESSES} guesses each")


def test_c03_architectural_cfi_dop():
    bad = []
    names = by_variant("DOP", "CFI-hijack")
    for name in names:
        sc = scenario(name)
        before = run_attack(sc)
        h = hardened(name)[0]
        after = run_attack(sc, h)
        if before.fault is not None:
            bad.append(f"{name}: corrupted run faults before hardening")
        if after.fault is None or after.fault.kind != "PAC-auth-failure":
            bad.append(f"{name}: hardened run did not fault on authentication")
        elif sc.variant == "DOP" and after.fault.instr.mnemonic != "autda":
            bad.append(f"{name}: DOP fault not at an autda sink")
    kinds = Counter(scenario(n).variant for n in names)
    report(3, bad, f"{kinds['CFI-hijack']} hijacks and {kinds['DOP']} DOP writes blocked")


def test_c04_noninterference():
    bad = []
    for name in SCENARIOS:
        sc, h = scenario(name), hardened(name)[0]
        runs = [run_attack(sc, h, secret=s) for s in (b"\x11\x22\x33\x44", b"\xa5\x5a\xc3\x3c")]
        a, b = ([t.dump() for t in (r.traces or [r.trace])] for r in runs)
        if a != b:
            bad.append(name)
    report(4, bad, f"{len(SCENARIOS)} hardened scenarios, two secrets each")


def _oracle_pairs(ps, p) -> dict:
    """Brute-force group-by: every (variable, loc) with both a DFI sink and a
    branch-outcome policy, mapped to the XOR of their modifiers."""
    out = {}
    for s in ps.s_spectre:
        var = s.variable
        if var is None:
            mem = next(o for o in resolve_loc(p, s.loc).operands if hasattr(o, "base"))
            reg = mem.offset if hasattr(mem.offset, "num") else mem.base
            var = f"x{reg.num}"
        for d in ps.s_dfi:
            if d.kind == "dfi-sink" and d.variable == var and d.loc == s.loc:
                out[(var, s.loc)] = d.mod ^ s.mod
    return out


def test_c05_modifier_fusion():
    bad, total_k = [], 0
    for name in SCENARIOS:
        sc = scenario(name)
        full, plan, ps = hardened(name, True, True)
        nomf = hardened(name, False, True)[0]
        pairs = _oracle_pairs(ps, sc.program)
        total_k += len(pairs)
        if _pacs(nomf) - _pacs(full) != len(pairs):
            bad.append(f"{name}: {_pacs(nomf)} - {_pacs(full)} pac != k={len(pairs)}")
        for (var, loc), want in pairs.items():
            got = [pr.modifier for pr in plan.pairings if pr.origin == f"dfi-sink:{var}@{loc}"]
            if got != [want]:
                bad.append(f"{name}: fused modifier at {loc} is {got}, expected {want:#x}")
    if total_k < 3:
        bad.append(f"corpus has only {total_k} fusable pairs")
    report(5, bad, f"{total_k} fused pairs, one pac saved per pair")


def _written(p, fname: str, label: str) -> set:
    blk = p.function(fname).block(label)
    return {r for i in blk.instrs if i.mech for r in i.writes()}


def test_c06_carrier_reuse_and_ablation():
    bad, reused = [], 0
    for name in SCENARIOS:
        sc = scenario(name)
        counts = {k: hardened(name, *v)[0].instr_count() for k, v in ABLATIONS.items()}
        if not (counts["full"] <= counts["mf"] <= counts["none"]
                and counts["full"] <= counts["cr"] <= counts["none"]):
            bad.append(f"{name}: non-monotone {counts}")
        full, _, ps = hardened(name)
        for c in fuse_cfi_context(ps, sc.program, cr=True):
            if c.kind != "existing":
                continue
            reused += 1
            f = full.function(c.target)
            extra = _written(full, c.target, f.entry) - {TAG_REG, int(c.register[1:])}
            if len(extra) != 1:
                bad.append(f"{name}:{c.target} check allocates {sorted(extra)}")
            for s in c.call_sites:
                if FALLBACK_REG in _written(full, s.func, s.block):
                    bad.append(f"{name}: site {s} still signs the fallback carrier")
    if not reused:
        bad.append("no carrier reuse exercised")
    report(6, bad, f"{reused} reused carrier(s), ablation counts monotone on {len(SCENARIOS)} programs")


def test_c07_net_spectre_overhead():
    bad = []
    for name in SCENARIOS:
        full, plan, _ = hardened(name)
        diff = full.instr_count() - strip_spectre(full).instr_count()
        if diff != plan.mechanism_counts()["E"]:
            bad.append(f"{name}: {diff} != {plan.mechanism_counts()['E']}")
    report(7, bad, "full minus stripped equals planned E insertions")


def test_c08_stats_monotone():
    bad = []
    for name in SCENARIOS:
        sc = scenario(name)
        pct = {k: stats(sc.program, hardened(name, *v)[0])["overhead_pct"]
               for k, v in ABLATIONS.items()}
        if not (pct["full"] <= pct["mf"] <= pct["none"] and pct["full"] <= pct["cr"] <= pct["none"]):
            bad.append(f"{name}: {pct}")
    report(8, bad, "overhead_pct(full) <= single-opt <= none everywhere")


def test_c09_validator_mutants():
    text, plan, ps = dispatch_hardened()
    bad = [f"clean output: {v}" for v in validate(text, plan, ps)]
    for rule, mutate in MUTANTS.items():
        got = {v.rule for v in validate(mutate(text), plan, ps)}
        if got != {rule}:
            bad.append(f"{rule} mutant flagged {sorted(got) or 'nothing'}")
    for name in SCENARIOS:
        full, plan2, ps2 = hardened(name)
        bad += [f"{name}: {v}" for v in validate(emit_program(full), plan2, ps2)]
    report(9, bad, f"{len(MUTANTS)} mutants caught by their own rule, corpus clean")


def test_c10_semantic_preservation():
    bad, runs = [], 0
    for name in SCENARIOS:
        sc = scenario(name)
        for k, v in ABLATIONS.items():
            before, after = run_honest(sc), run_honest(sc, hardened(name, *v)[0])
            runs += len(before)
            if before != after or any(r[1] is None for r in before):
                bad.append(f"{name} [{k}]")
    report(10, bad, f"{runs} honest runs identical before and after")


def _pipeline(name: str) -> tuple:
    sc = load_scenario(CORPUS / name)
    h, plan, _ = harden_scenario(sc, seed=7)
    v = run_attack(sc, h)
    return emit_program(h), plan.to_json(), [t.dump() for t in (v.traces or [v.trace])]


def test_c11_determinism():
    bad = [name for name in SCENARIOS if _pipeline(name) != _pipeline(name)]
    report(11, bad, "two seeded runs byte-identical in asm, plan and traces")


@pytest.fixture(scope="module", autouse=True)
def _summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None and RESULTS:
        tr.write_line("")
        for n in sorted(RESULTS):
            tr.write_line(RESULTS[n])
