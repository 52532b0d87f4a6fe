"""Post-hoc checks on hardened assembly against its plan and policies.

Rules:

    R1  every indirect-call target starts with ``bti c``
    R2  every planned instruction is present in its block
    R3  sign/auth pairs use the modifier the plan expects
    R4  an inserted ``aut`` precedes the original readers of its value
    R5  every protected call site sets the tag register first
    R6  no block carries more inserted pac/aut/bti/csel than planned
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .asm import (LR, PAC_AUTH, PAC_SIGN, SP, AsmFunction, AsmProgram, Imm, Instr, Reg,
                  build_cfg, parse_instr, parse_program)
from .instrument import TAG_REG
from .policy import InstrRef, InstrumentationPlan, PolicySet

CHECKED = PAC_SIGN + PAC_AUTH + ("bti", "csel")


@dataclass(frozen=True)
class Violation:
    rule: str
    where: str
    message: str

    def __str__(self) -> str:
        return f"{self.rule} {self.where}: {self.message}"


def _find(p: AsmProgram, ref: InstrRef) -> tuple[AsmFunction, str, int] | None:
    try:
        f = p.function(ref.func)
        blk = f.block(ref.block)
    except KeyError:
        return None
    n = 0
    for i, ins in enumerate(blk.instrs):
        if ins.text() == ref.text:
            if n == ref.occurrence:
                return f, ref.block, i
            n += 1
    return None


def _value(f: AsmFunction, label: str, pos: int, reg: int, depth: int = 0):
    """Statically known value of ``reg`` just before ``instrs[pos]``.

    Returns an int, ``"sp"``, or None when unknown.
    """
    if reg == SP:
        return "sp"
    if reg == 32:
        return 0
    if depth > 16:
        return None
    instrs = f.block(label).instrs
    for i in range(pos - 1, -1, -1):
        ins = instrs[i]
        if reg not in ins.writes():
            continue
        m, ops = ins.mnemonic, ins.operands
        if m == "mov":
            if isinstance(ops[1], Imm):
                return ops[1].value << ops[1].shift
            return _value(f, label, i, ops[1].num, depth + 1)
        if m == "csel":
            src = ops[1].num
            if ops[3].code == "eq":
                for j in range(i - 1, -1, -1):
                    c = instrs[j]
                    if c.mnemonic == "cmp":
                        if c.operands[0].num == src and isinstance(c.operands[1], Imm):
                            return c.operands[1].value
                        break
            return _value(f, label, i, src, depth + 1)
        if m == "eor" and isinstance(ops[2], Reg):
            a = _value(f, label, i, ops[1].num, depth + 1)
            b = _value(f, label, i, ops[2].num, depth + 1)
            return a ^ b if isinstance(a, int) and isinstance(b, int) else None
        return None
    preds = build_cfg(f).pred[label]
    if len(preds) == 1:
        src = preds[0].src
        return _value(f, src, len(f.block(src).instrs), reg, depth + 1)
    return None


def _r1(p: AsmProgram, ps: PolicySet) -> list[Violation]:
    out = []
    for fn in sorted(ps.target_tags):
        f = p.function(fn)
        first = f.block(f.entry).instrs[0]
        if first.text() != "bti c":
            out.append(Violation("R1", fn, f"target entry is {first.text()!r}, not bti c"))
    return out


def _planned(plan: InstrumentationPlan) -> dict[tuple, Counter]:
    by_block: dict[tuple, Counter] = {}
    for ins in plan.insertions:
        shape = parse_instr(ins.text).shape
        by_block.setdefault((ins.func, ins.block), Counter())[shape] += 1
    return by_block


def _is_tag_mov(ins: Instr) -> bool:
    return (ins.mnemonic == "mov" and ins.operands[0].num == TAG_REG
            and isinstance(ins.operands[1], Imm))


def _r2(p: AsmProgram, plan: InstrumentationPlan) -> list[Violation]:
    out = []
    for (fn, label), want in sorted(_planned(plan).items()):
        try:
            have = Counter(i.shape for i in p.function(fn).block(label).instrs)
        except KeyError:
            out.append(Violation("R2", f"{fn}:{label}", "planned block is missing"))
            continue
        for shape, n in sorted(want.items()):
            if shape[0] == "bti" or (shape[0] == "mov" and shape[1:] == (f"x{TAG_REG}",)):
                continue  # R1 and R5
            if have[shape] < n:
                out.append(Violation("R2", f"{fn}:{label}",
                                     f"expected {n} x {' '.join(shape)}, found {have[shape]}"))
    return out


def _r3(p: AsmProgram, plan: InstrumentationPlan) -> list[Violation]:
    out = []
    for pr in plan.pairings:
        for ref in (pr.sign, pr.auth):
            hit = _find(p, ref)
            if hit is None:
                continue  # a missing instruction is R2's finding
            f, label, i = hit
            ins = f.block(label).instrs[i]
            got = _value(f, label, i, ins.operands[1].num)
            if got is not None and got != pr.modifier:
                want = pr.modifier if isinstance(pr.modifier, str) else f"{pr.modifier:#x}"
                have = got if isinstance(got, str) else f"{got:#x}"
                out.append(Violation("R3", f"{ref.func}:{ref.block}",
                                     f"{ref.text}: modifier {have}, expected {want}"))
    return out


def _r4(p: AsmProgram) -> list[Violation]:
    out = []
    for f in p.functions:
        for b in f.blocks:
            lst = b.instrs
            for a, ins in enumerate(lst):
                if ins.mech is None or ins.mnemonic not in PAC_AUTH:
                    continue
                v = ins.operands[0].num
                if v == LR:
                    continue
                for u in range(a - 1, -1, -1):
                    x = lst[u]
                    if v in x.writes() or (x.mnemonic in PAC_SIGN and x.operands[0].num == v):
                        break
                    if x.mech is None and v in x.reads():
                        out.append(Violation("R4", f"{f.name}:{b.label}",
                                             f"{x.text()!r} reads {ins.operands[0]} before {ins.text()!r}"))
                        break
    return out


def _r5(p: AsmProgram, ps: PolicySet) -> list[Violation]:
    out = []
    targets = set(ps.target_tags)
    for f in p.functions:
        for b in f.blocks:
            for i, ins in enumerate(b.instrs):
                if not (ins.mnemonic in ("blr", "br") or
                        (ins.mnemonic == "bl" and ins.operands[0].name in targets)):
                    continue
                ok = False
                for x in reversed(b.instrs[:i]):
                    if TAG_REG in x.writes():
                        ok = x.mech is not None and _is_tag_mov(x)
                        break
                if not ok:
                    out.append(Violation("R5", f"{f.name}:{b.label}",
                                         f"{ins.text()!r} without a preceding tag move"))
    return out


def _r6(p: AsmProgram, plan: InstrumentationPlan) -> list[Violation]:
    out = []
    planned = _planned(plan)
    for f in p.functions:
        for b in f.blocks:
            have = Counter(i.shape for i in b.instrs if i.mech and i.mnemonic in CHECKED)
            want = planned.get((f.name, b.label), Counter())
            for shape, n in sorted(have.items()):
                if n > want[shape]:
                    out.append(Violation("R6", f"{f.name}:{b.label}",
                                         f"{n} x {' '.join(shape)}, plan allows {want[shape]}"))
    return out


def validate(hardened: str | AsmProgram, plan: InstrumentationPlan,
             policies: PolicySet) -> list[Violation]:
    """All rule violations; an empty list means the program passes."""
    p = parse_program(hardened) if isinstance(hardened, str) else hardened
    return _r1(p, policies) + _r2(p, plan) + _r3(p, plan) + _r4(p) + _r5(p, policies) + _r6(p, plan)


def stats(before: AsmProgram, after: AsmProgram) -> dict:
    n0, n1 = before.instr_count(), after.instr_count()
    mech = Counter(i.mech for f in after.functions for i in f.instrs() if i.mech)
    return {
        "instructions_before": n0,
        "instructions_after": n1,
        "inserted": n1 - n0,
        "overhead_pct": round((n1 - n0) / n0 * 100, 2) if n0 else 0.0,
        "per_mechanism": {m: mech.get(m, 0) for m in "ABCDE"},
    }
