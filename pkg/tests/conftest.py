from functools import lru_cache
from pathlib import Path

import pytest

from janus.attacks import harden_scenario, load_scenario

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "corpus"
SCENARIOS = sorted(p.name for p in CORPUS.glob("*.scn"))


@lru_cache(maxsize=None)
def scenario(name: str):
    return load_scenario(CORPUS / name)


@lru_cache(maxsize=None)
def hardened(name: str, mf: bool = True, cr: bool = True):
    return harden_scenario(scenario(name), mf=mf, cr=cr)


def by_variant(*variants: str) -> list[str]:
    return [n for n in SCENARIOS if scenario(n).variant in variants]


@pytest.fixture
def corpus():
    return CORPUS


DISPATCH_PINS = {"class:handler": 0x9c2, "dfi:victim:.bb2:0": 0x135}


def _drop(text: str, line: str) -> str:
    lines = text.splitlines()
    lines.remove(line)
    return "\n".join(lines) + "\n"


def _swap_before(text: str, anchor: str, moved: str) -> str:
    lines = text.splitlines()
    lines.remove(moved)
    lines.insert(lines.index(anchor), moved)
    return "\n".join(lines) + "\n"


def _clobber_tag(text: str) -> str:
    lines = text.splitlines()
    lines.insert(lines.index("    blr x8"), "    mov x11, x0")
    return "\n".join(lines) + "\n"


def _dup(text: str, line: str) -> str:
    lines = text.splitlines()
    i = lines.index(line)
    lines.insert(i, line)
    return "\n".join(lines) + "\n"


# one targeted mutation of hardened dispatch per rule
MUTANTS = {
    "R1": lambda t: _drop(t, "    bti c // janus:A"),
    "R2": lambda t: _drop(t, "    csel x12, x12, xzr, lo // janus:E"),
    "R3": lambda t: t.replace("mov x11, #0x135 // janus:C", "mov x11, #0x136 // janus:C", 1),
    "R4": lambda t: _swap_before(t, "    autda x5, x11 // janus:C", "    cmp x5, #1"),
    "R5": _clobber_tag,
    "R6": lambda t: _dup(t, "    autda x10, x12 // janus:B"),
}


@lru_cache(maxsize=None)
def dispatch_hardened():
    """(text, plan, policies) for dispatch with the pinned tags."""
    from janus.analysis import InputDecls, Signatures, analyze
    from janus.asm import emit_program, parse_program
    from janus.instrument import harden

    p = parse_program((CORPUS / "dispatch.s").read_text())
    sig = Signatures.parse((CORPUS / "dispatch.sig").read_text())
    decl = InputDecls.parse((CORPUS / "dispatch.inputs").read_text())
    ps = analyze(p, sig, decl, 0, DISPATCH_PINS)
    out, plan = harden(p, ps)
    return emit_program(out), plan, ps
