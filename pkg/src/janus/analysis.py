"""Internal analyses: call sites and type classes, taint, DOP branches, tags."""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .asm import (CALLS, LR, PAC_AUTH, SP, XZR, AsmFunction, AsmProgram, Imm, Instr, Loc,
                  Mem, Reg, Sym, build_cfg, invert_cond, iter_locs)
from .policy import CFI_TAG_MAX, TAG_MAX, PolicySet, PolicyTuple

# caller-saved registers clobbered by a call (AAPCS64)
CALL_CLOBBERED = frozenset(range(0, 19)) | {LR}


class MissingSignature(Exception):
    pass


class TagSpaceExhausted(Exception):
    pass


@dataclass(frozen=True)
class CallSiteInfo:
    site: Loc
    pointer_register: str | None  # None for direct bl sites
    target_class: int | None = None
    callee: str | None = None  # direct calls only


@dataclass(frozen=True)
class EquivClass:
    id: int
    signature: tuple
    members: frozenset
    tag: int | None = None


@dataclass(frozen=True)
class GuardedUse:
    side: str  # successor block label
    cond: str  # condition under which that side is architecturally taken
    loc: Loc  # first instruction on that side consuming `var`
    var: str


@dataclass(frozen=True)
class CondBranchInfo:
    site: Loc
    cmp_loc: Loc
    condition_inputs: frozenset
    tainted: bool
    taken_target: str
    fallthrough_target: str
    guarded: tuple = ()


@dataclass(frozen=True)
class DfiFlow:
    slot: tuple
    sources: tuple  # (var, Loc)
    sinks: tuple


@dataclass
class Signatures:
    functions: dict = field(default_factory=dict)
    sites: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "Signatures":
        sigs = cls()
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            f = line.split()
            if f[0] == "sig" and len(f) == 4:
                sigs.functions[f[1]] = (int(f[2]), int(f[3]))
            elif f[0] == "callsig" and len(f) == 4:
                sigs.sites[Loc.parse(f[1])] = (int(f[2]), int(f[3]))
            else:
                raise ValueError(f"bad signature line {line!r}")
        return sigs


@dataclass
class InputDecls:
    regions: set = field(default_factory=set)
    args: set = field(default_factory=set)  # (func, reg number)

    @classmethod
    def parse(cls, text: str) -> "InputDecls":
        decl = cls()
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            f = line.split()
            if f[0] != "input" or len(f) != 2:
                raise ValueError(f"bad input declaration {line!r}")
            if ":" in f[1]:
                fn, reg = f[1].split(":")
                decl.args.add((fn, int(reg.lower().lstrip("xw"))))
            else:
                decl.regions.add(f[1])
        return decl


# --------------------------------------------------------------------------
# liveness
# --------------------------------------------------------------------------

def liveness(f: AsmFunction) -> dict[str, set]:
    """live-in register sets per block (backward, to fixed point)."""
    cfg = build_cfg(f)
    live_in = {b.label: set() for b in f.blocks}
    changed = True
    while changed:
        changed = False
        for b in reversed(f.blocks):
            out: set = set()
            for e in cfg.succ[b.label]:
                if e.dst is not None:
                    out |= live_in[e.dst]
            t = b.terminator
            if t is not None and t.mnemonic == "ret":
                out |= {0, LR, SP}
            live = _live_through(b.instrs, out)
            if live != live_in[b.label]:
                live_in[b.label] = live
                changed = True
    return live_in


def live_after(f: AsmFunction, label: str, pos: int, live_in: dict | None = None) -> set:
    """Registers live after the instruction at raw position ``pos`` of block."""
    live_in = live_in if live_in is not None else liveness(f)
    cfg = build_cfg(f)
    blk = f.block(label)
    live: set = set()
    for e in cfg.succ[label]:
        if e.dst is not None:
            live |= live_in[e.dst]
    t = blk.terminator
    if t is not None and t.mnemonic == "ret":
        live |= {0, LR, SP}
    return _live_through(blk.instrs[pos + 1:], live, blk.instrs)


def _live_through(instrs, live: set, block=None) -> set:
    # a call reads the argument registers its block sets up
    args = {r for ins in (block or instrs) for r in ins.writes() if r < 8}
    for ins in reversed(instrs):
        if ins.mnemonic in CALLS:
            live = (live - CALL_CLOBBERED) | args
        live = (live - ins.writes()) | ins.reads()
    return live


# --------------------------------------------------------------------------
# CFI
# --------------------------------------------------------------------------

def find_indirect_branches(p: AsmProgram) -> list[CallSiteInfo]:
    out = []
    for loc, ins in iter_locs(p):
        if ins.mnemonic in ("blr", "br"):
            out.append(CallSiteInfo(loc, ins.operands[0].x.name))
    return sorted(out, key=lambda s: s.site)


def find_direct_target_calls(p: AsmProgram, targets: set) -> list[CallSiteInfo]:
    """``bl`` sites whose callee is an indirect-call target."""
    out = []
    for loc, ins in iter_locs(p):
        if ins.mnemonic == "bl" and ins.operands[0].name in targets:
            out.append(CallSiteInfo(loc, None, callee=ins.operands[0].name))
    return sorted(out, key=lambda s: s.site)


def _pointer_source(p: AsmProgram, site: CallSiteInfo) -> str | None:
    """Function whose address the call register holds, when it is set by an
    ``ldr xN, =func`` earlier in the same block."""
    f = p.function(site.site.func)
    blk = f.block(site.site.block)
    reg = Reg(int(site.pointer_register[1:]))
    for _, ins in reversed(blk.original()[:site.site.index]):
        if reg.num in ins.writes():
            if ins.mnemonic == "ldr" and isinstance(ins.operands[1], Sym):
                return ins.operands[1].name
            return None
    return None


def compute_equivalence_classes(p: AsmProgram, sites: list[CallSiteInfo],
                                signatures: Signatures) -> tuple[list[EquivClass], list[CallSiteInfo]]:
    """Type-based classes over address-taken functions.

    Returns the classes and the sites annotated with their class id.
    """
    taken = sorted(p.address_taken())
    by_sig: dict[tuple, set] = {}
    for fn in taken:
        if fn not in signatures.functions:
            raise MissingSignature(fn)
        by_sig.setdefault(signatures.functions[fn], set()).add(fn)
    ordered = sorted(by_sig.items(), key=lambda kv: min(kv[1]))
    classes = [EquivClass(i, sig, frozenset(members)) for i, (sig, members) in enumerate(ordered)]
    sig_to_id = {c.signature: c.id for c in classes}
    annotated = []
    for s in sites:
        sig = signatures.sites.get(s.site)
        if sig is None:
            src = _pointer_source(p, s)
            if src is not None and src in signatures.functions:
                sig = signatures.functions[src]
            elif len(classes) == 1:
                sig = classes[0].signature
            else:
                raise MissingSignature(str(s.site))
        if sig not in sig_to_id:
            raise MissingSignature(f"{s.site}: no address-taken function has signature {sig}")
        annotated.append(CallSiteInfo(s.site, s.pointer_register, sig_to_id[sig], s.callee))
    return classes, annotated


# --------------------------------------------------------------------------
# taint
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _State:
    regs: frozenset = frozenset()  # tainted registers
    slots: frozenset = frozenset()  # tainted memory slots
    ptrs: tuple = ()  # (reg, symbol, offset) for registers holding &symbol+off
    sp_delta: int = 0

    def join(self, other: "_State") -> "_State":
        ptrs = tuple(sorted(set(self.ptrs) & set(other.ptrs)))
        return _State(self.regs | other.regs, self.slots | other.slots, ptrs,
                      self.sp_delta)


@dataclass
class TaintSummary:
    before: dict = field(default_factory=dict)  # Loc -> frozenset of tainted regs
    slots_before: dict = field(default_factory=dict)  # Loc -> frozenset of slots
    slot_of: dict = field(default_factory=dict)  # Loc of ldr/str -> memory slot
    returns_tainted: dict = field(default_factory=dict)  # func -> bool

    def tainted(self, loc: Loc, reg: int) -> bool:
        return reg in self.before.get(loc, frozenset())


def _slot(mem: Mem, st: _State) -> tuple | None:
    if mem.base.num == SP:
        off = mem.offset.value if isinstance(mem.offset, Imm) else 0
        if isinstance(mem.offset, Reg):
            return None
        return ("stack", "sp", st.sp_delta + off)
    for reg, sym, off in st.ptrs:
        if reg == mem.base.num:
            if isinstance(mem.offset, Reg):
                return ("sym", sym, None)
            extra = mem.offset.value if isinstance(mem.offset, Imm) else 0
            return ("sym", sym, off + extra)
    return None


def _transfer(ins: Instr, st: _State, inputs: InputDecls, summaries: dict,
              rec: dict | None) -> _State:
    regs, slots, sp = set(st.regs), set(st.slots), st.sp_delta
    ptrs = {r: (s, o) for r, s, o in st.ptrs}
    m, ops = ins.mnemonic, ins.operands
    writes = ins.writes()
    for w in writes:
        ptrs.pop(w, None)
    if m == "ldr" and isinstance(ops[1], Sym):
        regs.discard(ops[0].num)
        ptrs[ops[0].num] = (ops[1].name, 0)
    elif m in ("ldr", "ldrb"):
        mem = ops[1]
        slot = _slot(mem, st)
        if rec is not None and slot is not None:
            rec["slot"] = slot
        src = False
        if slot is not None and slot[0] == "sym" and slot[1] in inputs.regions:
            src = True
        if slot is not None and (slot in slots or (slot[0], slot[1], None) in slots):
            src = True
        if any(r in st.regs for r in (mem.base.num, getattr(mem.offset, "num", -1))):
            src = True
        (regs.add if src else regs.discard)(ops[0].num)
    elif m in ("str", "strb"):
        slot = _slot(ops[1], st)
        if rec is not None and slot is not None:
            rec["slot"] = slot
        if slot is not None:
            if ops[0].num in st.regs:
                slots.add(slot)
            elif slot[2] is not None:
                slots.discard(slot)
    elif m in CALLS:
        regs -= CALL_CLOBBERED
        if m == "bl" and summaries.get(ops[0].name):
            regs.add(0)
    elif m == "add" and ops[1].num in ptrs and isinstance(ops[2], Imm):
        s, o = ptrs[ops[1].num]
        regs.discard(ops[0].num)
        ptrs[ops[0].num] = (s, o + ops[2].value)
    elif m in ("sub", "add") and ops[0].num == SP and ops[1].num == SP and isinstance(ops[2], Imm):
        sp += ops[2].value if m == "add" else -ops[2].value
    elif m in ("mov", "movk", "add", "sub", "and", "orr", "eor", "lsl", "lsr", "csel",
               "pacia", "pacda", "autia", "autda"):
        src = bool(ins.reads() & st.regs)
        if m == "mov" and isinstance(ops[1], Reg) and ops[1].num in ptrs:
            ptrs[ops[0].num] = ptrs[ops[1].num]
        for w in writes:
            (regs.add if src else regs.discard)(w)
    else:
        for w in writes:
            regs.discard(w)
    return _State(frozenset(regs), frozenset(slots),
                  tuple(sorted((r, s, o) for r, (s, o) in ptrs.items())), sp)


def _taint_function(f: AsmFunction, inputs: InputDecls, summaries: dict,
                    out: TaintSummary | None, arg_taint: bool = True,
                    globals_: frozenset = frozenset(), stored: set | None = None) -> bool:
    """Forward fixed point over one function; returns whether x0 may be
    tainted at any ``ret``.  ``globals_`` are data slots tainted on entry;
    data slots this function taints are added to ``stored``."""
    cfg = build_cfg(f)
    entry_regs = frozenset(r for fn, r in inputs.args if fn == f.name) if arg_taint else frozenset()
    states: dict[str, _State] = {f.entry: _State(entry_regs, globals_)}
    ret_tainted = False
    work = [b.label for b in f.blocks]
    order = {b.label: i for i, b in enumerate(f.blocks)}
    while work:
        work.sort(key=order.get)
        label = work.pop(0)
        if label not in states:
            continue
        st = states[label]
        blk = f.block(label)
        for i, ins in blk.original():
            loc = Loc(f.name, label, i)
            rec: dict = {}
            if out is not None:
                out.before[loc] = out.before.get(loc, frozenset()) | st.regs
                out.slots_before[loc] = out.slots_before.get(loc, frozenset()) | st.slots
            st = _transfer(ins, st, inputs, summaries, rec)
            if stored is not None:
                stored |= {x for x in st.slots if x[0] == "sym"}
            if out is not None and "slot" in rec:
                out.slot_of[loc] = rec["slot"]
            if ins.mnemonic == "ret" and 0 in st.regs:
                ret_tainted = True
        for e in cfg.succ[label]:
            if e.dst is None:
                continue
            old = states.get(e.dst)
            new = st if old is None else old.join(st)
            if new != old:
                states[e.dst] = new
                if e.dst not in work:
                    work.append(e.dst)
    return ret_tainted


def compute_taint(p: AsmProgram, inputs: InputDecls) -> TaintSummary:
    """Intra-procedural forward taint plus one level of call summaries.

    A callee's summary is computed with calls inside it treated as
    returning clean values, so taint crosses exactly one call level.
    """
    summaries = {f.name: _taint_function(f, inputs, {}, None, arg_taint=False)
                 for f in p.functions}
    # data slots are shared between functions: iterate until the set of
    # tainted globals is stable
    globals_: set = set()
    while True:
        stored: set = set()
        for f in p.functions:
            _taint_function(f, inputs, summaries, None, True, frozenset(globals_), stored)
        if stored <= globals_:
            break
        globals_ |= stored
    out = TaintSummary(returns_tainted=dict(summaries))
    for f in p.functions:
        _taint_function(f, inputs, summaries, out, True, frozenset(globals_))
    return out


# --------------------------------------------------------------------------
# DOP / Spectre branches
# --------------------------------------------------------------------------

def _guarded_use(f: AsmFunction, side: str, cond: str, taint: TaintSummary,
                 preds: dict) -> GuardedUse | None:
    if len(preds[side]) != 1:
        return None
    blk = f.block(side)
    orig = blk.original()
    for i, ins in orig:
        if ins.mnemonic in ("ldr", "ldrb") and isinstance(ins.operands[1], Mem):
            mem = ins.operands[1]
            cands = [mem.offset] if isinstance(mem.offset, Reg) else []
            cands.append(mem.base)
            loc = Loc(f.name, side, i)
            var = next((r for r in cands if taint.tainted(loc, r.num)), None)
            if var is None:
                continue
            start = 0
            for j in range(i - 1, -1, -1):
                w = orig[j][1]
                if var.num in w.writes() and not (w.mnemonic in PAC_AUTH
                                                  and w.operands[0].num == var.num):
                    start = j + 1
                    break
            first = next(j for j in range(start, i + 1) if var.num in orig[j][1].reads())
            use = orig[first][1]
            if use.mnemonic in PAC_AUTH and use.operands[0].num == var.num:
                # re-signing a signed pointer would lose its PAC; guard the
                # modifier instead so every guess squashes at the same point
                mod = use.operands[1]
                if mod.num not in (SP, XZR):
                    var = mod
            return GuardedUse(side, cond, Loc(f.name, side, first), var.x.name)
        if ins.is_transfer:
            break
    return None


def find_dop_branches(p: AsmProgram, taint: TaintSummary) -> list[CondBranchInfo]:
    out = []
    for f in p.functions:
        cfg = build_cfg(f)
        for bi, b in enumerate(f.blocks):
            t = b.terminator
            if t is None or t.cond is None:
                continue
            orig = b.original()
            idx = len(orig) - 1
            cmp_i = next((i for i, ins in reversed(orig[:idx]) if ins.mnemonic == "cmp"), None)
            if cmp_i is None:
                continue
            cmp_loc = Loc(f.name, b.label, cmp_i)
            inputs = frozenset(orig[cmp_i][1].reads())
            tainted = any(taint.tainted(cmp_loc, r) for r in inputs)
            if not tainted:
                continue
            taken = t.operands[0].name
            fall = f.blocks[bi + 1].label
            guarded = []
            for side, cond in ((taken, t.cond), (fall, invert_cond(t.cond))):
                if side == taken and side == fall:
                    continue
                g = _guarded_use(f, side, cond, taint, cfg.pred)
                if g is not None:
                    guarded.append(g)
            out.append(CondBranchInfo(Loc(f.name, b.label, idx), cmp_loc, inputs, True,
                                      taken, fall, tuple(guarded)))
    return out


def find_dfi_flows(p: AsmProgram, taint: TaintSummary, branches: list[CondBranchInfo]) -> list[DfiFlow]:
    """DOP-sensitive branch variables: a compared register reloaded from a
    memory slot, paired with every store into that slot."""
    loads: dict[tuple, list] = {}
    stores: dict[tuple, list] = {}
    for loc, ins in iter_locs(p):
        slot = taint.slot_of.get(loc)
        if slot is None or ins.mnemonic not in ("ldr", "str"):
            continue
        (loads if ins.mnemonic == "ldr" else stores).setdefault(slot, []).append((loc, ins))
    sink_of: dict[tuple, list] = {}
    for br in branches:
        f = p.function(br.site.func)
        orig = f.block(br.site.block).original()
        for r in sorted(br.condition_inputs):
            for j in range(br.cmp_loc.index - 1, -1, -1):
                ins = orig[j][1]
                if r in ins.writes():
                    loc = Loc(f.name, br.site.block, j)
                    if ins.mnemonic == "ldr" and loc in taint.slot_of and ins.operands[0].wide:
                        sink_of.setdefault(taint.slot_of[loc], []).append(
                            (loc, (f"x{r}", br.cmp_loc)))
                    break
    flows = []
    for slot, sinks in sorted(sink_of.items(), key=lambda kv: str(kv[0])):
        if slot[0] == "sym" and slot[2] is None:
            continue
        sink_loads = {s[0] for s in sinks}
        if any(loc not in sink_loads for loc, _ in loads.get(slot, [])):
            continue  # an unchecked reload would see the signed value
        sources = []
        for loc, ins in stores.get(slot, []):
            src = _source_def(p, loc, ins)
            if src is None:
                sources = []
                break
            sources.append(src)
        if sources:
            flows.append(DfiFlow(slot, tuple(sorted(sources, key=lambda s: s[1])),
                                 tuple(sorted({s[1] for s in sinks}, key=lambda s: s[1]))))
    return flows


def _source_def(p: AsmProgram, loc: Loc, store: Instr) -> tuple | None:
    """(var, def loc) for the value a store writes, when signing right after
    its definition cannot disturb any other reader."""
    if not store.operands[0].wide:
        return None
    reg = store.operands[0].num
    f = p.function(loc.func)
    blk = f.block(loc.block)
    orig = blk.original()
    d = next((j for j in range(loc.index - 1, -1, -1) if reg in orig[j][1].writes()), None)
    if d is None or reg in (XZR, SP):
        return None
    if any(reg in orig[j][1].reads() for j in range(d + 1, loc.index)):
        return None
    raw_pos = blk.instrs.index(store)
    if reg in live_after(f, loc.block, raw_pos):
        return None
    return (f"x{reg}", Loc(f.name, loc.block, d))


# --------------------------------------------------------------------------
# modifier assignment
# --------------------------------------------------------------------------

def assign_modifiers(classes: list[EquivClass], sites: list[CallSiteInfo],
                     dfi_flows: list[DfiFlow], branches: list[CondBranchInfo],
                     seed: int = 0, pins: dict | None = None) -> PolicySet:
    """Give every class, DFI flow and guarded Spectre use a unique nonzero tag.

    ``pins`` fixes tags by key: ``class:<member>``, ``dfi:<source loc>`` or
    ``spectre:<guarded loc>``.
    """
    pins = dict(pins or {})
    keys_cfi = [f"class:{min(c.members)}" for c in sorted(classes, key=lambda c: c.id)]
    keys_other = [f"dfi:{fl.sources[0][1]}" for fl in dfi_flows]
    uses = sorted({g for br in branches for g in br.guarded}, key=lambda g: g.loc)
    keys_other += [f"spectre:{g.loc}" for g in uses]
    for c in classes:
        for m in c.members:
            if f"class:{m}" in pins:
                pins.setdefault(f"class:{min(c.members)}", pins[f"class:{m}"])
    if len(keys_cfi) > CFI_TAG_MAX or len(keys_cfi) + len(keys_other) > TAG_MAX:
        raise TagSpaceExhausted(f"{len(keys_cfi) + len(keys_other)} tags requested")
    rng = random.Random(seed)
    used = {v for k, v in pins.items() if k in keys_cfi or k in keys_other}
    tags: dict[str, int] = {}
    free_cfi = [v for v in range(1, CFI_TAG_MAX + 1) if v not in used]
    need = [k for k in keys_cfi if k not in pins]
    if len(need) > len(free_cfi):
        raise TagSpaceExhausted("cfi tags")
    for k, v in zip(need, rng.sample(free_cfi, len(need))):
        tags[k] = v
    used |= set(tags.values())
    free = [v for v in range(1, TAG_MAX + 1) if v not in used]
    need = [k for k in keys_other if k not in pins]
    if len(need) > len(free):
        raise TagSpaceExhausted("dfi/spectre tags")
    for k, v in zip(need, rng.sample(free, len(need))):
        tags[k] = v
    for k in keys_cfi + keys_other:
        if k in pins:
            tags[k] = pins[k]

    ps = PolicySet()
    class_tag = {}
    for c, k in zip(sorted(classes, key=lambda c: c.id), keys_cfi):
        class_tag[c.id] = tags[k]
        for m in sorted(c.members):
            ps.target_tags[m] = tags[k]
    member_class = {m: c.id for c in classes for m in c.members}
    for s in sites:
        cid = s.target_class if s.callee is None else member_class[s.callee]
        ps.s_cfi.append(PolicyTuple("cfi-site", s.site, class_tag[cid]))
    for fl in dfi_flows:
        t = tags[f"dfi:{fl.sources[0][1]}"]
        for var, loc in fl.sources:
            ps.s_dfi.append(PolicyTuple("dfi-src", loc, t, var))
        for var, loc in fl.sinks:
            ps.s_dfi.append(PolicyTuple("dfi-sink", loc, t, var))
    for g in uses:
        ps.s_spectre.append(PolicyTuple("spectre", g.loc, tags[f"spectre:{g.loc}"], g.var))
    return ps


def analyze(p: AsmProgram, signatures: Signatures, inputs: InputDecls,
            seed: int = 0, pins: dict | None = None) -> PolicySet:
    """The whole internal analysis front half."""
    sites = find_indirect_branches(p)
    classes, sites = compute_equivalence_classes(p, sites, signatures)
    members = {m for c in classes for m in c.members}
    direct = find_direct_target_calls(p, members)
    taint = compute_taint(p, inputs)
    branches = find_dop_branches(p, taint)
    flows = find_dfi_flows(p, taint, branches)
    return assign_modifiers(classes, sorted(sites + direct, key=lambda s: s.site),
                            flows, branches, seed, pins)
