"""Inserts the five hardening mechanisms into a program.

Mechanism tags carried on every inserted instruction:

    A  ``bti c`` landing pads on indirect-call targets
    B  call-site tags and the cryptographic check at target entry
    C  data-flow signing (``pacda``/``autda``)
    D  reordering of inserted code (no instructions of its own)
    E  branch-outcome modifiers for mis-speculated paths
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace

from .analysis import EquivClass
from .asm import (CALLS, LR, PAC_AUTH, PAC_SIGN, AsmFunction, AsmProgram, BasicBlock,
                  Instr, Loc, Mem, Reg, build_cfg, invert_cond, parse_instr, resolve_loc)
from .policy import (Insertion, InstrRef, InstrumentationPlan, Pairing, PolicySet,
                     PolicyTuple)

log = logging.getLogger(__name__)

TAG_REG = 11
FALLBACK_REG = 10
SCRATCH_POOL = (11, 12, 13, 14, 15)


class InstrumentError(Exception):
    pass


class NoSinkForSource(InstrumentError):
    pass


class NoSourceForSink(InstrumentError):
    pass


class NoProtectedValue(InstrumentError):
    pass


class UnguardableBranch(InstrumentError):
    pass


class ScratchConflict(InstrumentError):
    pass


class CarrierConflict(InstrumentError):
    pass


class OrderingUnsatisfiable(InstrumentError):
    pass


@dataclass(frozen=True)
class FusedPolicy:
    variable: str
    loc: Loc
    mod_fused: int
    sources: tuple


@dataclass(frozen=True)
class CarrierChoice:
    target: str
    kind: str  # existing | lr | x10
    register: str | None = None
    orig_mod: int | None = None
    call_sites: tuple = ()


@dataclass
class Options:
    mf: bool = True
    cr: bool = True


def _j(text: str, mech: str, origin=()) -> Instr:
    return replace(parse_instr(text, mech=mech), origin=tuple(origin))


def _used_regs(f: AsmFunction) -> set[int]:
    regs: set[int] = set()
    for b in f.blocks:
        for _, ins in b.original():
            regs |= ins.reads() | ins.writes()
    return regs


class _Work:
    """Mutable per-block instruction lists over an immutable program."""

    def __init__(self, p: AsmProgram):
        self.p = p
        self.blocks = {f.name: {b.label: list(b.instrs) for b in f.blocks} for f in p.functions}
        self.pairs: list[tuple[Instr, Instr, object, str]] = []

    def raw(self, loc: Loc) -> int:
        n = -1
        for i, ins in enumerate(self.blocks[loc.func][loc.block]):
            if ins.mech is None:
                n += 1
                if n == loc.index:
                    return i
        raise KeyError(str(loc))

    def before(self, loc: Loc, new: list[Instr]) -> None:
        i = self.raw(loc)
        self.blocks[loc.func][loc.block][i:i] = new

    def after(self, loc: Loc, new: list[Instr]) -> None:
        lst = self.blocks[loc.func][loc.block]
        i = self.raw(loc) + 1
        while i < len(lst) and lst[i].mech is not None and lst[i].mech in "C":
            i += 1
        lst[i:i] = new

    def at_entry(self, fname: str, new: list[Instr]) -> None:
        f = self.p.function(fname)
        lst = self.blocks[fname][f.entry]
        i = 0
        while i < len(lst) and lst[i].mech == "A":
            i += 1
        lst[i:i] = new

    def remove(self, ins: Instr) -> None:
        for blocks in self.blocks.values():
            for lst in blocks.values():
                for i, x in enumerate(lst):
                    if x is ins:
                        del lst[i]
                        return

    def pair(self, sign: Instr, auth: Instr, mod, origin: str) -> None:
        self.pairs.append((sign, auth, mod, origin))

    def build(self) -> AsmProgram:
        funcs = []
        for f in self.p.functions:
            blocks = tuple(BasicBlock(b.label, tuple(self.blocks[f.name][b.label])) for b in f.blocks)
            funcs.append(replace(f, blocks=blocks))
        return replace(self.p, functions=tuple(funcs))


# --------------------------------------------------------------------------
# A: landing pads
# --------------------------------------------------------------------------

def _bti(w: _Work, classes: list[EquivClass]) -> None:
    for c in sorted(classes, key=lambda c: c.id):
        for fn in sorted(c.members):
            lst = w.blocks[fn][w.p.function(fn).entry]
            if lst and lst[0].mnemonic == "bti":
                continue
            lst.insert(0, _j("bti c", "A", (f"cfitarget:{fn}",)))


def insert_bti(p: AsmProgram, classes: list[EquivClass]) -> AsmProgram:
    w = _Work(p)
    _bti(w, classes)
    return w.build()


# --------------------------------------------------------------------------
# modifier fusion: group flows that share a guarded value
# --------------------------------------------------------------------------

def fuse_modifiers(s_dfi: list[PolicyTuple], s_spectre: list[PolicyTuple]) -> list[FusedPolicy]:
    """One policy per (variable, loc); modifiers XOR, an absent side counts 0."""
    groups: dict[tuple, dict] = {}
    for t in list(s_dfi) + list(s_spectre):
        g = groups.setdefault((t.variable, t.loc), {"dfi": 0, "spectre": 0, "ids": []})
        g["dfi" if t.kind.startswith("dfi") else "spectre"] ^= t.mod
        g["ids"].append(t.id)
    return [FusedPolicy(v, loc, g["dfi"] ^ g["spectre"], tuple(g["ids"]))
            for (v, loc), g in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0] or ""))]


# --------------------------------------------------------------------------
# scratch registers
# --------------------------------------------------------------------------

class _Scratch:
    def __init__(self, p: AsmProgram):
        self.p = p
        self.used = {f.name: _used_regs(f) for f in p.functions}
        self.assign: dict[str, dict] = defaultdict(dict)

    def free(self, fname: str, pool=SCRATCH_POOL, exclude=()) -> list[int]:
        return [r for r in pool if r not in self.used[fname] and r not in exclude]

    def dfi(self, fname: str) -> int:
        regs = self.free(fname)
        if not regs:
            raise ScratchConflict(f"{fname}: no free scratch register for DFI modifiers")
        self.assign[fname]["dfi"] = f"x{regs[0]}"
        return regs[0]

    def spectre(self, fname: str, n: int) -> list[int]:
        regs = self.free(fname, SCRATCH_POOL[1:], exclude=(self.dfi_reg(fname),))
        if len(regs) < n:
            raise ScratchConflict(f"{fname}: not enough free scratch registers for branch modifiers")
        self.assign[fname]["spectre"] = sorted(set(self.assign[fname].get("spectre", [])) | {f"x{r}" for r in regs[:n]})
        return regs[:n]

    def dfi_reg(self, fname: str) -> int:
        regs = self.free(fname)
        return regs[0] if regs else -1

    def cfi(self, fname: str) -> int:
        if TAG_REG in self.used[fname]:
            raise ScratchConflict(f"{fname}: uses the tag register x{TAG_REG}")
        regs = self.free(fname, SCRATCH_POOL[1:])
        if not regs:
            raise ScratchConflict(f"{fname}: no free scratch register for the CFI check")
        self.assign[fname]["cfi"] = f"x{regs[0]}"
        return regs[0]


# --------------------------------------------------------------------------
# C / E: data-flow and branch-outcome signing
# --------------------------------------------------------------------------

def _resolve_spectre(p: AsmProgram, t: PolicyTuple) -> PolicyTuple:
    if t.variable:
        return t
    ins = resolve_loc(p, t.loc)
    mem = next((o for o in ins.operands if isinstance(o, Mem)), None)
    if mem is None:
        raise NoProtectedValue(str(t.loc))
    reg = mem.offset if isinstance(mem.offset, Reg) else mem.base
    return replace(t, variable=reg.x.name)


def _guard(p: AsmProgram, t: PolicyTuple) -> tuple[str, str]:
    """(branch block, guarded condition) for a Spectre tuple."""
    f = p.function(t.loc.func)
    cfg = build_cfg(f)
    preds = cfg.pred[t.loc.block]
    if len(preds) != 1 or preds[0].kind not in ("taken", "fallthrough"):
        raise UnguardableBranch(f"{t.loc}: block is not the sole successor side of a conditional branch")
    src = preds[0].src
    if src == t.loc.block:
        raise UnguardableBranch(f"{t.loc}: self loop")
    term = f.block(src).terminator
    cond = term.cond if preds[0].kind == "taken" else invert_cond(term.cond)
    other = [e for e in cfg.succ[src] if e.dst == t.loc.block]
    if len(other) != 1:
        raise UnguardableBranch(f"{t.loc}: both branch directions reach the same block")
    blk = f.block(t.loc.block)
    for _, ins in blk.original()[:t.loc.index]:
        if ins.mnemonic in CALLS:
            raise UnguardableBranch(f"{t.loc}: call between branch and guarded use")
    return src, cond


def _check_flows(s_dfi: list[PolicyTuple]) -> dict[int, tuple[list, list]]:
    flows: dict[int, tuple[list, list]] = {}
    for t in s_dfi:
        src, snk = flows.setdefault(t.mod, ([], []))
        (src if t.kind == "dfi-src" else snk).append(t)
    for tag, (src, snk) in flows.items():
        if src and not snk:
            raise NoSinkForSource(f"tag {tag:#x}: {src[0].id}")
        if snk and not src:
            raise NoSourceForSink(f"tag {tag:#x}: {snk[0].id}")
    return flows


def _plan_fusion(s_dfi, s_spectre) -> dict[PolicyTuple, PolicyTuple]:
    """spectre tuple -> the DFI sink it fuses with."""
    sinks = {(t.variable, t.loc): t for t in s_dfi if t.kind == "dfi-sink"}
    fused: dict = {}
    flow_s: dict[int, int] = {}
    for g in fuse_modifiers(s_dfi, s_spectre):
        sp = [t for t in s_spectre if (t.variable, t.loc) == (g.variable, g.loc)]
        snk = sinks.get((g.variable, g.loc))
        if not sp or snk is None:
            continue
        s = sp[0]
        if snk.mod == s.mod:
            log.warning("%s: equal DFI and branch tags would fuse to 0; not fused", s.id)
            continue
        if snk.mod in flow_s and flow_s[snk.mod] != s.mod:
            continue  # flow already fused under a different branch tag
        flow_s[snk.mod] = s.mod
        fused[s] = snk
    return fused


def _dfi_and_spectre(w: _Work, ps: PolicySet, opts: Options, scratch: _Scratch,
                     skip_sinks: set) -> None:
    p = w.p
    flows = _check_flows(ps.s_dfi)
    spectre = [_resolve_spectre(p, t) for t in ps.s_spectre]
    fused = _plan_fusion(ps.s_dfi, spectre) if opts.mf else {}
    fused_tag = {snk.mod: snk.mod ^ s.mod for s, snk in fused.items()}
    fused_sinks = {snk for snk in fused.values()}

    # DFI sources first so that sinks can pair against them
    src_instrs: dict[int, list[Instr]] = defaultdict(list)
    for tag, (srcs, snks) in sorted(flows.items()):
        mod = fused_tag.get(tag, tag)
        for t in srcs:
            r = scratch.dfi(t.loc.func)
            ids = [t.id] + [s.id for s, k in fused.items() if k.mod == tag]
            pac = _j(f"pacda {t.variable}, x{r}", "C", ids)
            w.after(t.loc, [_j(f"mov x{r}, #{mod:#x}", "C", ids), pac])
            src_instrs[tag].append(pac)
        for t in snks:
            if t in fused_sinks or t in skip_sinks:
                continue
            r = scratch.dfi(t.loc.func)
            aut = _j(f"autda {t.variable}, x{r}", "C", [t.id])
            w.before(t.loc, [_j(f"mov x{r}, #{mod:#x}", "C", [t.id]), aut])
            for pac in src_instrs[tag]:
                w.pair(pac, aut, mod, t.id)

    # branch-outcome modifiers, grouped per branch block so both sides of one
    # branch get distinct registers
    by_branch: dict[tuple, list] = defaultdict(list)
    for t in spectre:
        blk, cond = _guard(p, t)
        by_branch[(t.loc.func, blk)].append((t, cond))
    for (fname, blk), items in sorted(by_branch.items()):
        regs = scratch.spectre(fname, len({t.loc.block for t, _ in items}))
        side_reg = {side: regs[i] for i, side in enumerate(sorted({t.loc.block for t, _ in items}))}
        term = Loc(fname, blk, len(p.function(fname).block(blk).original()) - 1)
        for t, cond in items:
            m = side_reg[t.loc.block]
            if t in fused:
                snk = fused[t]
                f = snk.mod ^ t.mod
                ids = [snk.id, t.id]
                w.before(term, [_j(f"mov x{m}, #{f:#x}", "C", ids),
                                _j(f"csel x{m}, x{m}, xzr, {cond}", "E", [t.id])])
                aut = _j(f"autda {t.variable}, x{m}", "C", ids)
                w.before(t.loc, [aut])
                for pac in src_instrs[snk.mod]:
                    w.pair(pac, aut, f, snk.id)
            else:
                w.before(term, [_j(f"mov x{m}, #{t.mod:#x}", "E", [t.id]),
                                _j(f"csel x{m}, x{m}, xzr, {cond}", "E", [t.id])])
                pac = _j(f"pacia {t.variable}, x{m}", "E", [t.id])
                aut = _j(f"autia {t.variable}, x{m}", "E", [t.id])
                w.before(t.loc, [pac, _j(f"mov x{m}, #{t.mod:#x}", "E", [t.id]), aut])
                w.pair(pac, aut, t.mod, t.id)


def instrument_dfi(p: AsmProgram, s_dfi: list[PolicyTuple]) -> AsmProgram:
    w = _Work(p)
    _dfi_and_spectre(w, PolicySet(s_dfi=list(s_dfi)), Options(mf=False), _Scratch(p), set())
    return w.build()


def instrument_spectre_v1(p: AsmProgram, s_spectre: list[PolicyTuple]) -> AsmProgram:
    w = _Work(p)
    _dfi_and_spectre(w, PolicySet(s_spectre=list(s_spectre)), Options(mf=False), _Scratch(p), set())
    return w.build()


# --------------------------------------------------------------------------
# B: CFI, optionally reusing a signed argument as carrier
# --------------------------------------------------------------------------

def _class_sites(ps: PolicySet, p: AsmProgram) -> dict[str, list[Loc]]:
    """target function -> call sites that may reach it."""
    by_tag: dict[int, list[str]] = defaultdict(list)
    for fn, tag in ps.target_tags.items():
        by_tag[tag].append(fn)
    out: dict[str, list[Loc]] = {fn: [] for fn in ps.target_tags}
    for t in ps.s_cfi:
        ins = resolve_loc(p, t.loc)
        if ins.mnemonic == "bl":
            callee = ins.operands[0].name
            if callee in out:
                out[callee].append(t.loc)
        else:
            for fn in by_tag.get(t.mod, []):
                out[fn].append(t.loc)
    return out


def _written_between(blk: BasicBlock, start: int, end: int, reg: int) -> bool:
    return any(reg in ins.writes() for i, ins in blk.original() if start < i < end)


def _find_carrier(p: AsmProgram, fn: str, sites: list[Loc], ps: PolicySet,
                  fused_sinks: set) -> tuple[int, int, PolicyTuple] | None:
    f = p.function(fn)
    entry = f.block(f.entry)
    for r in range(8):
        name = f"x{r}"
        sink = next((t for t in ps.s_dfi if t.kind == "dfi-sink" and t.variable == name
                     and t.loc.func == fn and t.loc.block == f.entry
                     and not _written_between(entry, -1, t.loc.index, r)), None)
        if sink is None or sink in fused_sinks or not sites:
            continue
        ok = True
        for s in sites:
            src = next((t for t in ps.s_dfi if t.kind == "dfi-src" and t.variable == name
                        and t.mod == sink.mod and t.loc.func == s.func
                        and t.loc.block == s.block and t.loc.index < s.index), None)
            caller_sink = any(t.kind == "dfi-sink" and t.mod == sink.mod and t.loc.func == s.func
                              for t in ps.s_dfi)
            blk = p.function(s.func).block(s.block)
            if src is None or caller_sink or _written_between(blk, src.loc.index, s.index, r):
                ok = False
                break
        if ok:
            return r, sink.mod, sink
    return None


def fuse_cfi_context(ps: PolicySet, p: AsmProgram, cr: bool = True,
                     fused_sinks: set = frozenset()) -> list[CarrierChoice]:
    out = []
    sites = _class_sites(ps, p)
    for fn in sorted(ps.target_tags):
        f = p.function(fn)
        ss = tuple(sorted(sites[fn]))
        rets = sum(1 for i in f.instrs() if i.mnemonic == "ret")
        has_pacsp = any(i.mnemonic in ("paciasp", "autiasp") for i in f.instrs())
        found = _find_carrier(p, fn, list(ss), ps, fused_sinks) if cr else None
        if found is not None:
            r, m, _ = found
            out.append(CarrierChoice(fn, "existing", f"x{r}", m, ss))
        elif cr and ss and not f.is_leaf and rets == 1 and not has_pacsp:
            # the LR carrier trades two instructions per site for two at the target
            out.append(CarrierChoice(fn, "lr", "lr", None, ss))
        else:
            out.append(CarrierChoice(fn, "x10", f"x{FALLBACK_REG}", None, ss))
    return out


def _cfi(w: _Work, ps: PolicySet, carriers: list[CarrierChoice], scratch: _Scratch) -> None:
    p = w.p
    by_fn = {c.target: c for c in carriers}
    site_targets: dict[Loc, list[str]] = defaultdict(list)
    for c in carriers:
        for s in c.call_sites:
            site_targets[s].append(c.target)
    site_setup: dict[Loc, list[Instr]] = {}
    for t in sorted(ps.s_cfi, key=lambda t: t.loc):
        ins = resolve_loc(p, t.loc)
        indirect = ins.mnemonic in ("blr", "br")
        if indirect and ins.operands[0].num in (FALLBACK_REG,) + SCRATCH_POOL:
            raise ScratchConflict(f"{t.loc}: call register {ins.operands[0]} is a scratch register")
        if TAG_REG in scratch.used[t.loc.func] and indirect:
            raise ScratchConflict(f"{t.loc}: caller uses the tag register x{TAG_REG}")
        new = [_j(f"mov x{TAG_REG}, #{t.mod:#x}", "B", [t.id])]
        if any(by_fn[fn].kind == "x10" for fn in site_targets[t.loc]):
            if FALLBACK_REG in scratch.used[t.loc.func]:
                raise ScratchConflict(f"{t.loc}: caller uses the fallback register x{FALLBACK_REG}")
            new += [_j(f"mov x{FALLBACK_REG}, x{TAG_REG}", "B", [t.id]),
                    _j(f"pacda x{FALLBACK_REG}, x{TAG_REG}", "B", [t.id])]
        w.before(t.loc, new)
        site_setup[t.loc] = new

    for c in carriers:
        fn, tag = c.target, ps.target_tags[c.target]
        ids = [f"cfitarget:{fn}"]
        m = scratch.cfi(fn)
        entry = [_j(f"cmp x{TAG_REG}, #{tag:#x}", "B", ids)]
        if c.kind == "existing":
            aut = _j(f"autda {c.register}, x{m}", "B", ids)
            entry += [_j(f"mov x{m}, #{c.orig_mod:#x}", "B", ids),
                      _j(f"csel x{m}, x{m}, xzr, eq", "B", ids), aut]
            for s in c.call_sites:
                for pac in _source_pacs(w, s, c.register):
                    w.pair(pac, aut, c.orig_mod, f"cfitarget:{fn}")
        elif c.kind == "lr":
            pac = _j(f"pacia lr, x{m}", "B", ids)
            entry += [_j(f"mov x{m}, sp", "B", ids),
                      _j(f"csel x{m}, x{m}, xzr, eq", "B", ids), pac]
            f = p.function(fn)
            for b in f.blocks:
                for i, ins in b.original():
                    if ins.mnemonic == "ret":
                        aut = _j("autia lr, sp", "B", ids)
                        w.before(Loc(fn, b.label, i), [aut])
                        w.pair(pac, aut, "sp", f"cfitarget:{fn}")
        else:
            aut = _j(f"autda x{FALLBACK_REG}, x{m}", "B", ids)
            entry += [_j(f"csel x{m}, x{TAG_REG}, xzr, eq", "B", ids), aut]
            for s in c.call_sites:
                pac = site_setup[s][-1]
                w.pair(pac, aut, tag, f"cfitarget:{fn}")
        w.at_entry(fn, entry)


def _source_pacs(w: _Work, site: Loc, reg: str) -> list[Instr]:
    lst = w.blocks[site.func][site.block]
    return [i for i in lst[:w.raw(site)] if i.mech == "C" and i.mnemonic == "pacda"
            and i.operands[0].name == reg]


def instrument_cfi(p: AsmProgram, ps: PolicySet, carriers: list[CarrierChoice]) -> AsmProgram:
    w = _Work(p)
    _cfi(w, ps, carriers, _Scratch(p))
    return w.build()


# --------------------------------------------------------------------------
# D: ordering
# --------------------------------------------------------------------------

_PASSIVE = ("str", "strb")  # storing a signed value does not expose it


def _group_start(lst: list[Instr], a: int) -> int:
    s = a
    while s > 0 and lst[s - 1].mech is not None and lst[s - 1].mnemonic not in PAC_AUTH:
        s -= 1
    return s


def _order_block(lst: list[Instr], where: str) -> list[Instr]:
    lst = list(lst)
    changed = True
    while changed:
        changed = False
        for a, ins in enumerate(lst):
            if ins.mech is None or ins.mnemonic not in PAC_AUTH:
                continue
            v = ins.operands[0].num
            if v == LR:
                continue
            first = None
            for u in range(a - 1, -1, -1):
                x = lst[u]
                if v in x.writes() or (x.mnemonic in PAC_SIGN and x.operands[0].num == v):
                    break
                if x.mech is None and v in x.reads():
                    first = u
            if first is None:
                continue
            s = _group_start(lst, a)
            group = lst[s:a + 1]
            needs = set().union(*(g.reads() for g in group)) - {v}
            between = lst[first:s]
            if any(x.mech is None and x.writes() & needs for x in between):
                raise OrderingUnsatisfiable(f"{where}: inserted check on x{v} depends on code it must precede")
            lst = lst[:first] + group + between + lst[a + 1:]
            changed = True
            break
    for a, ins in enumerate(lst):
        if ins.mech is None or ins.mnemonic not in PAC_SIGN or ins.operands[0].num == LR:
            continue
        v = ins.operands[0].num
        for x in lst[a + 1:]:
            if x.mnemonic in PAC_AUTH and x.operands[0].num == v:
                break
            if x.mech is None and v in x.reads() and x.mnemonic not in _PASSIVE + CALLS:
                raise OrderingUnsatisfiable(f"{where}: signed x{v} is consumed before it is checked")
            if v in x.writes():
                break
    return lst


def enforce_ordering(f: AsmFunction) -> AsmFunction:
    blocks = tuple(BasicBlock(b.label, tuple(_order_block(list(b.instrs), f"{f.name}:{b.label}")))
                   for b in f.blocks)
    return replace(f, blocks=blocks)


# --------------------------------------------------------------------------
# strip-janus
# --------------------------------------------------------------------------

def strip_spectre(p: AsmProgram) -> AsmProgram:
    """Drop branch-outcome code; CFI poison selects become plain moves."""
    funcs = []
    for f in p.functions:
        blocks = []
        for b in f.blocks:
            out = []
            for ins in b.instrs:
                if ins.mech == "E":
                    continue
                if ins.mech == "B" and ins.mnemonic == "csel":
                    ins = Instr("mov", ins.operands[:2], "B", ins.origin)
                out.append(ins)
            blocks.append(BasicBlock(b.label, tuple(out)))
        funcs.append(replace(f, blocks=tuple(blocks)))
    return replace(p, functions=tuple(funcs))


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

def _classes_from(ps: PolicySet) -> list[EquivClass]:
    by_tag: dict[int, set] = defaultdict(set)
    for fn, tag in ps.target_tags.items():
        by_tag[tag].add(fn)
    return [EquivClass(i, (tag,), frozenset(m), tag)
            for i, (tag, m) in enumerate(sorted(by_tag.items(), key=lambda kv: min(kv[1])))]


def _derive_plan(p: AsmProgram, w: _Work, scratch: _Scratch) -> InstrumentationPlan:
    plan = InstrumentationPlan(scratch_assignments={k: dict(v) for k, v in sorted(scratch.assign.items())})
    where: dict[int, InstrRef] = {}
    for f in p.functions:
        for b in f.blocks:
            seen: dict[str, int] = defaultdict(int)
            orig_n = len(b.original())
            k = 0
            for ins in b.instrs:
                text = ins.text()
                where[id(ins)] = InstrRef(f.name, b.label, text, seen[text])
                seen[text] += 1
                if ins.mech is None:
                    k += 1
                    continue
                anchor, pos = (k, "before") if k < orig_n else (orig_n - 1, "after")
                plan.insertions.append(Insertion(f.name, b.label, anchor, pos, text,
                                                 ins.mech, tuple(ins.origin)))
    for sign, auth, mod, origin in w.pairs:
        if id(sign) in where and id(auth) in where:
            plan.pairings.append(Pairing(where[id(sign)], where[id(auth)], mod, origin))
    return plan


def harden(p: AsmProgram, ps: PolicySet, mf: bool = True, cr: bool = True,
           classes: list[EquivClass] | None = None) -> tuple[AsmProgram, InstrumentationPlan]:
    opts = Options(mf, cr)
    ps.resolve(p)
    if p.instr_count() and any(i.mech for f in p.functions for i in f.instrs()):
        raise InstrumentError("program already carries inserted instructions")
    classes = classes if classes is not None else _classes_from(ps)
    w = _Work(p)
    scratch = _Scratch(p)
    _bti(w, classes)

    spectre = [_resolve_spectre(p, t) for t in ps.s_spectre]
    fused = _plan_fusion(ps.s_dfi, spectre) if mf else {}
    carriers = fuse_cfi_context(ps, p, cr, set(fused.values()))
    skip = set()
    for c in carriers:
        if c.kind == "existing":
            skip |= {t for t in ps.s_dfi if t.kind == "dfi-sink" and t.variable == c.register
                     and t.loc.func == c.target and t.mod == c.orig_mod}
    _dfi_and_spectre(w, replace(ps, s_spectre=spectre), opts, scratch, skip)
    _cfi(w, ps, carriers, scratch)

    for f in p.functions:
        for b in f.blocks:
            w.blocks[f.name][b.label] = _order_block(w.blocks[f.name][b.label], f"{f.name}:{b.label}")
    out = w.build()
    return out, _derive_plan(out, w, scratch)
