from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from conftest import CORPUS, dispatch_hardened, hardened, scenario
from janus.analysis import InputDecls, Signatures, analyze
from janus.asm import Loc, emit_program, parse_program
from janus.attacks import run_honest
from janus.instrument import (InstrumentError, NoProtectedValue, NoSinkForSource, NoSourceForSink,
                              OrderingUnsatisfiable, ScratchConflict, UnguardableBranch,
                              fuse_cfi_context, fuse_modifiers, harden, strip_spectre)
from janus.policy import PolicyTuple, load_external_policy
from janus.validator import validate

MF_ONE = parse_program((CORPUS / "mf_one.s").read_text())


def _block(text: str, label: str) -> list[str]:
    lines = text.splitlines()
    i = lines.index(label + ":") + 1
    while lines[i].startswith("."):
        i += 1
    out = []
    while i < len(lines) and lines[i].startswith("    "):
        out.append(lines[i].strip())
        i += 1
    return out


def test_dispatch_layout():
    text, plan, _ = dispatch_hardened()
    assert _block(text, "handler")[:4] == [
        "bti c // janus:A",
        "cmp x11, #0x9c2 // janus:B",
        "csel x12, x11, xzr, eq // janus:B",
        "autda x10, x12 // janus:B",
    ]
    bb6 = _block(text, ".bb6")
    assert bb6[-4:] == ["mov x11, #0x9c2 // janus:B", "mov x10, x11 // janus:B",
                        "pacda x10, x11 // janus:B", "blr x8"]
    bb4 = _block(text, ".bb4")
    i = bb4.index("ldrb w8, [x7, x0]")
    assert [ln.split()[0] for ln in bb4[i - 3:i]] == ["pacia", "mov", "autia"]
    bb5 = _block(text, ".bb5")
    assert bb5.index("autda x5, x11 // janus:C") < bb5.index("cmp x5, #1")
    assert plan.mechanism_counts() == {"A": 1, "B": 6, "C": 4, "D": 0, "E": 5}


def test_input_program_untouched():
    sc = scenario("dispatch_v1.scn")
    before = emit_program(sc.program)
    hardened("dispatch_v1.scn")
    assert emit_program(sc.program) == before


def test_fuse_modifiers_xor():
    loc = Loc("f", "b", 1)
    d = [PolicyTuple("dfi-sink", loc, 0x135, "x3")]
    s = [PolicyTuple("spectre", loc, 0x9c2, "x3"), PolicyTuple("spectre", Loc("f", "c", 0), 0x7, "x4")]
    fused = fuse_modifiers(d, s)
    assert [(f.variable, f.mod_fused) for f in fused] == [("x3", 0x8f7), ("x4", 0x7)]


def test_mf_emits_one_check():
    ps = load_external_policy((CORPUS / "mf_one.pol").read_text())
    on, _ = harden(MF_ONE, ps, mf=True)
    off, _ = harden(MF_ONE, ps, mf=False)
    body_on = _block(emit_program(on), ".Lbody")
    assert "autda x3, x12 // janus:C" in body_on
    assert not any(ln.startswith(("pacia", "autia")) for ln in body_on)
    assert "mov x12, #0x8f7 // janus:C" in _block(emit_program(on), "victim")
    assert sum(ln.startswith("autia") for ln in _block(emit_program(off), ".Lbody")) == 1


def test_strip_spectre_removes_only_e():
    text, plan, _ = dispatch_hardened()
    stripped = emit_program(strip_spectre(parse_program(text)))
    assert "janus:E" not in stripped
    assert stripped.count("janus:") == text.count("janus:") - plan.mechanism_counts()["E"]


def test_carrier_kinds():
    kinds = {}
    for name in ("cr_carrier.scn", "cfi_nonleaf.scn", "cfi_leaf.scn"):
        sc = scenario(name)
        _, _, ps = hardened(name)
        kinds[name] = {c.target: c.kind for c in fuse_cfi_context(ps, sc.program)}
    assert kinds["cr_carrier.scn"]["handler"] == "existing"
    assert kinds["cfi_nonleaf.scn"]["evil"] == "lr"
    assert kinds["cfi_leaf.scn"]["handler"] == "x10"


def test_carrier_without_sites_falls_back():
    # a non-leaf target nobody calls legitimately gains nothing from the LR carrier
    sc = scenario("cfi_nonleaf.scn")
    _, _, ps = hardened("cfi_nonleaf.scn")
    ps = replace(ps, s_cfi=[t for t in ps.s_cfi if t.loc != Loc.parse("victim:.Lsecond:2")])
    assert {c.target: c.kind for c in fuse_cfi_context(ps, sc.program)}["evil"] == "x10"


def test_no_cr_means_no_carrier():
    sc = scenario("cr_carrier.scn")
    _, _, ps = hardened("cr_carrier.scn")
    assert {c.kind for c in fuse_cfi_context(ps, sc.program, cr=False)} == {"x10"}


def test_already_hardened_rejected():
    text, _, ps = dispatch_hardened()
    with pytest.raises(InstrumentError):
        harden(parse_program(text), ps)


@pytest.mark.parametrize("policy,exc", [
    ("dfi x3 victim:victim:0 src 0x5\n", NoSinkForSource),
    ("dfi x3 victim:.Lbody:1 sink 0x5\n", NoSourceForSink),
    ("spectre victim:victim:1 0x5\n", NoProtectedValue),
    ("spectre victim:victim:2 0x5\n", UnguardableBranch),
])
def test_policy_errors(policy, exc):
    with pytest.raises(exc):
        harden(MF_ONE, load_external_policy(policy))


def test_scratch_conflict():
    src = (CORPUS / "mf_one.s").read_text().replace("    mov x3, x0\n", "    mov x3, x0\n"
                                                     "    mov x11, #1\n    mov x12, #1\n"
                                                     "    mov x13, #1\n    mov x14, #1\n"
                                                     "    mov x15, #1\n")
    with pytest.raises(ScratchConflict):
        harden(parse_program(src), load_external_policy((CORPUS / "mf_one.pol").read_text()))


def test_ordering_unsatisfiable():
    # the signed value feeds an arithmetic use before the sink can check it
    src = """
f:
    mov x3, x0
    add x4, x3, #1
.Lnext:
    cmp x3, #2
    ret
"""
    ps = load_external_policy("dfi x3 f:f:0 src 0x5\ndfi x3 f:.Lnext:0 sink 0x5\n")
    with pytest.raises(OrderingUnsatisfiable):
        harden(parse_program(src), ps)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_any_seed_validates_and_preserves(seed):
    p = parse_program((CORPUS / "dispatch.s").read_text())
    sig = Signatures.parse((CORPUS / "dispatch.sig").read_text())
    decl = InputDecls.parse((CORPUS / "dispatch.inputs").read_text())
    ps = analyze(p, sig, decl, seed)
    out, plan = harden(p, ps)
    assert validate(emit_program(out), plan, ps) == []
    sc = scenario("dispatch_v1.scn")
    assert run_honest(sc, out) == run_honest(sc)
