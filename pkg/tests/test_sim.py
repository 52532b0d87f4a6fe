import pytest
from hypothesis import given, strategies as st

from janus.asm import Loc, parse_program
from janus.sim import (DEFAULT_KEY, DOMAIN_D, DOMAIN_I, LINE, InvalidMistrain, Machine, Mistrain,
                       StepBudgetExceeded, authenticate, compute_pac, run_architectural,
                       run_speculative_episode, strip)

GADGET = """
    .data
size:
    .quad 4
arr:
    .byte 0, 1, 2, 3
secret:
    .byte 0x21
probe:
    .zero 16384
    .text
victim:
    ldr x6, =size
    ldr x6, [x6]
    cmp x0, x6
    b.hs .Lout
.Lbody:
    ldr x7, =arr
    ldrb w8, [x7, x0]
    lsl x8, x8, #6
    ldr x9, =probe
    ldrb w9, [x9, x8]
.Lout:
    ret
"""


def _gadget():
    p = parse_program(GADGET)
    m = Machine(p)
    off = m.symbols["secret"] - m.symbols["arr"]
    return p, m, off


def test_pac_round_trip():
    v = compute_pac(0x1234_5678, 0x77)
    assert v.address == 0x1234_5678 and v.pac != 0
    assert authenticate(v.raw, 0x77, DEFAULT_KEY, DOMAIN_D) == 0x1234_5678
    assert authenticate(v.raw, 0x78, DEFAULT_KEY, DOMAIN_D) is None
    assert authenticate(v.raw, 0x77, DEFAULT_KEY, DOMAIN_I) is None
    assert authenticate(v.raw, 0x77, bytes(16), DOMAIN_D) is None


@given(st.integers(0, (1 << 48) - 1), st.integers(0, (1 << 64) - 1))
def test_pac_property(addr, mod):
    v = compute_pac(addr, mod)
    assert strip(v.raw) == addr
    assert authenticate(v.raw, mod, DEFAULT_KEY, DOMAIN_D) == addr
    assert compute_pac(addr, mod) == v


def test_architectural_run_in_bounds():
    p, _, _ = _gadget()
    st_, trace = run_architectural(p, "victim", {"x0": 2})
    assert st_.x(8) == 2 << 6
    assert not trace.lines("transient")


def test_mistrained_branch_leaks_secret_line():
    p, m, off = _gadget()
    trace = run_speculative_episode(p, "victim", Mistrain("branch", Loc.parse("victim:victim:3"), False),
                                    inputs={"x0": off})
    probe = m.symbols["probe"]
    assert probe // LINE + 0x21 in trace.lines("transient")
    assert [s.cause for s in trace.squashes] == ["resolve"]


def test_window_limits_speculation():
    p, m, off = _gadget()
    trace = run_speculative_episode(p, "victim", Mistrain("branch", Loc.parse("victim:victim:3"), False),
                                    window=2, inputs={"x0": off})
    assert m.symbols["probe"] // LINE + 0x21 not in trace.lines("transient")
    assert trace.squashes[0].cause == "budget"


def test_speculative_stores_are_buffered():
    src = """
    .data
cell:
    .quad 5
    .text
f:
    cmp x0, #1
    b.eq .Lout
.Lw:
    ldr x1, =cell
    mov x2, #9
    str x2, [x1]
.Lout:
    ldr x1, =cell
    ldr x0, [x1]
    ret
"""
    p = parse_program(src)
    res = Machine(p).run("f", args={"x0": 1},
                         mistrain=Mistrain("branch", Loc.parse("f:f:1"), False))
    assert res.retval == 5


def test_invalid_mistrain():
    p, _, _ = _gadget()
    with pytest.raises(InvalidMistrain):
        Machine(p).run("victim", mistrain=Mistrain("indirect", Loc.parse("victim:victim:3"), None, "victim"))
    with pytest.raises(InvalidMistrain):
        Machine(p).run("victim", mistrain=Mistrain("branch", Loc.parse("victim:nowhere:0"), True))


def test_auth_failure_faults_architecturally():
    src = "f:\n    mov x1, #5\n    pacda x0, x1\n    mov x1, #6\n    autda x0, x1\n    ret\n"
    res = Machine(parse_program(src)).run("f", args={"x0": 0x1000})
    assert res.fault.kind == "PAC-auth-failure"
    assert res.fault.instr.mnemonic == "autda"


def test_bti_enforced_only_with_landing_pads():
    src = """
    .data
fp:
    .quad g
    .text
f:
    sub sp, sp, #16
    str x30, [sp]
    ldr x8, =fp
    ldr x8, [x8]
    blr x8
    ldr x30, [sp]
    add sp, sp, #16
    ret
g:
    mov x0, #7
    ret
"""
    assert Machine(parse_program(src)).run("f").retval == 7
    marked = src.replace("f:\n", "f:\n    bti c\n", 1)
    res = Machine(parse_program(marked)).run("f")
    assert res.fault.kind == "BTI-violation"
    ok = marked.replace("g:\n", "g:\n    bti c\n")
    assert Machine(parse_program(ok)).run("f").retval == 7


def test_step_budget():
    p = parse_program("f:\n.Lloop:\n    b .Lloop\n")
    with pytest.raises(StepBudgetExceeded):
        Machine(p, max_steps=100).run("f")


def test_bad_address_fault():
    p = parse_program("f:\n    mov x1, #0\n    ldr x0, [x1]\n    ret\n")
    assert Machine(p).run("f").fault.kind == "bad-address"


def test_deterministic_trace():
    p, _, off = _gadget()
    mt = Mistrain("branch", Loc.parse("victim:victim:3"), False)
    a = run_speculative_episode(p, "victim", mt, inputs={"x0": off})
    b = run_speculative_episode(p, "victim", mt, inputs={"x0": off})
    assert a.dump() == b.dump()
