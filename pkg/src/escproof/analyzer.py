"""Abstract interpreter for kernel runtimes.

The analysis computes a post-fixpoint over the system loop

    kernel entry -> runtime code -> kernel exit (reti)
                 -> attacker havoc -> interrupt -> kernel entry

with program locations (address, call string, unroll index) mapped to a
storage abstraction that pairs the numeric store with the type store.
Control flow is discovered together with values: static branches fork
with branch refinement, computed jumps are resolved by concretizing the
target expression against the current storage and the read-only image.

Alarms are assumptions the analyzer cannot discharge (imprecise jump,
store into read-only or untracked protected memory, type or predicate
violations at stores and privilege-relevant register writes, maybe-null
dereferences, bound and division checks).  Analysis continues under the
logged assumption; a runtime alarm therefore voids the final verdict
but does not cascade.
"""

from __future__ import annotations

import json
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace

from . import ir, numdom, typedom
from .bitvec import BinOp, UnOp, mask, to_signed
from .machine import MachineConfig
from .numdom import NumAbstract, NumStore
from .typedom import TypeStore, TypeTable, WORD

CATEGORIES = (
    "ComputedJumpImprecise", "StoreToReadOnly", "StoreOutsideWritable",
    "TypeViolation", "PredicateViolation", "NullDeref", "OutOfBounds",
    "PrivilegeSinkViolation", "DecodeFailure", "DivByZero",
)

_SIGNAL_CATEGORY = {
    "null-deref": "NullDeref",
    "out-of-bounds": "OutOfBounds",
    "type-violation": "TypeViolation",
    "predicate-violation": "PredicateViolation",
}


class AnalysisError(Exception):
    pass


@dataclass(frozen=True, order=True)
class Location:
    addr: int
    callstring: tuple[int, ...] = ()
    unroll: int = 0

    def key(self) -> str:
        cs = ",".join(f"{a:#x}" for a in self.callstring)
        return f"{self.addr:#x}/{cs}/{self.unroll}"

    @classmethod
    def from_key(cls, key: str) -> "Location":
        addr, cs, k = key.split("/")
        call = tuple(int(x, 16) for x in cs.split(",") if x)
        return cls(int(addr, 16), call, int(k))


@dataclass(frozen=True)
class Storage:
    num: NumStore
    types: TypeStore


@dataclass(frozen=True)
class Alarm:
    category: str
    addr: int
    phase: str
    message: str

    def to_doc(self) -> dict:
        return {"category": self.category, "addr": self.addr,
                "phase": self.phase, "message": self.message}


@dataclass
class AnalysisOptions:
    unroll: int = 64
    call_depth: int = 8
    widen_delay: int = 2
    jump_cap: int = 64
    step_cap: int = 200_000


@dataclass
class AnalysisResult:
    entry: Location
    locations: dict[Location, Storage]
    edges: set[tuple[Location, Location]]
    alarms: list[Alarm]
    nontrivial: bool
    stable: bool
    iterations: int
    wall_time: float
    cfg: MachineConfig
    tt: TypeTable

    def runtime_alarms(self) -> list[Alarm]:
        return [a for a in self.alarms if a.phase == "runtime"]

    def boot_alarms(self) -> list[Alarm]:
        return [a for a in self.alarms if a.phase == "boot"]


def widen_thresholds(cfg: MachineConfig, tt: TypeTable) -> tuple[int, ...]:
    """Section boundaries and structure sizes: the constants that matter
    for protection proofs."""
    out = {0, 1}
    for lo, hi in cfg.fixed_ro + cfg.fixed_rw + cfg.param:
        out |= {lo, hi, hi + 1}
    for s in tt.structs.values():
        out.add(s.size)
    out.add(mask(cfg.addr_width))
    return tuple(sorted(out))


# ---------------------------------------------------------------------------
# Joint evaluation of expressions over (numeric, type) storage


@dataclass
class AbsVal:
    num: NumAbstract
    type: typedom.TypeExpr
    signals: list[str] = field(default_factory=list)


class Analyzer:
    def __init__(self, program: ir.Program, cfg: MachineConfig, tt: TypeTable,
                 opts: AnalysisOptions | None = None):
        self.program = program
        self.cfg = cfg
        self.tt = tt
        self.opts = opts or AnalysisOptions()
        self.image = program.image()
        self.thresholds = widen_thresholds(cfg, tt)
        self.aw = cfg.addr_width
        self.alarms: dict[tuple[str, int], Alarm] = {}
        self.param_env = self._build_param_env()

    # -- plumbing ------------------------------------------------------

    def alarm(self, category: str, addr: int, message: str) -> None:
        key = (category, addr)
        if key not in self.alarms:
            self.alarms[key] = Alarm(category, addr, self.cfg.phase_of(addr), message)

    def rofetch(self, addr: int, size: int) -> int | None:
        """Little-endian read of the immutable program image."""
        if not all(self.cfg.in_ranges(addr + k, self.cfg.fixed_ro) for k in range(size)):
            return None
        if not all(addr + k in self.image for k in range(size)):
            return None
        return int.from_bytes(bytes(self.image[addr + k] for k in range(size)), "little")

    def _build_param_env(self) -> dict[str, NumAbstract]:
        env = {}
        for name, p in self.tt.params.items():
            width = 8 * p.cell[1] if p.cell else 64
            env[name] = numdom._norm(width, p.lo, p.hi, 0, (1 << width - 1) - 1, 0, 1)
        return env

    def _scalar_const(self, t: typedom.TypeExpr) -> NumAbstract | None:
        """Numeric translation of simple `self == const` predicates."""
        if not isinstance(t, typedom.ScalarRef):
            return None
        d = self.tt.scalars[t.name]
        if d.pred is None:
            return None
        p = d.pred.pred
        from .annot import PCmp, PConst, PSelf
        if isinstance(p, PCmp) and p.op == "==":
            if isinstance(p.a, PSelf) and isinstance(p.b, PConst):
                return NumAbstract.const(d.bits, p.b.value)
            if isinstance(p.b, PSelf) and isinstance(p.a, PConst):
                return NumAbstract.const(d.bits, p.a.value)
        return None

    def entry_location(self) -> Location:
        entry = self.program.entry_interrupt
        if entry is None:
            raise AnalysisError("program declares no interrupt entry point")
        return Location(entry)

    def precondition(self) -> Storage:
        """Kernel-entry abstraction from the annotation roots: typed system
        registers and globals, interrupt number in r0, privileged flags."""
        regs_n: dict[str, NumAbstract] = {}
        regs_t: dict[str, typedom.TypeExpr] = {}
        for reg, t in self.tt.reg_roots.items():
            regs_t[reg] = t
            c = self._scalar_const(t)
            if c is not None:
                regs_n[reg] = c
        regs_n["r0"] = NumAbstract.from_values(
            ir.reg_width("r0", self.aw), self.cfg.runtime_interrupts)
        regs_n["flags"] = self._privileged_flags(NumAbstract.top(ir.reg_width("flags", self.aw)))
        cells_n: dict[tuple[int, int], NumAbstract] = {}
        cells_t: dict[tuple[int, int], typedom.TypeExpr] = {}
        for addr, (size, t) in self.tt.global_roots.items():
            cells_t[(addr, size)] = t
            c = self._scalar_const(t)
            cells_n[(addr, size)] = c if c is not None else NumAbstract.top(8 * size)
        param_cells = {p.cell: name for name, p in self.tt.params.items() if p.cell}
        num = NumStore(self.aw, regs_n, cells_n, dict(self.param_env), param_cells)
        return Storage(num, TypeStore(regs_t, cells_t))

    def _privileged_flags(self, na: NumAbstract) -> NumAbstract:
        """The hardware clears the UNPRIVILEGED bit: flags & ~(1 << bit)."""
        m = mask(na.width) ^ (1 << self.cfg.unprivileged_bit)
        return numdom.transfer_binop(BinOp.AND, na, NumAbstract.const(na.width, m))

    # -- expression evaluation -----------------------------------------

    def eval(self, e: ir.Expr, st: Storage, loc: Location) -> AbsVal:
        if isinstance(e, ir.Const):
            return AbsVal(NumAbstract.const(e.w, e.value), WORD)
        if isinstance(e, ir.Reg):
            if e.name == "pc":
                return AbsVal(NumAbstract.const(e.width, loc.addr), WORD)
            return AbsVal(st.num.reg(e.name), st.types.reg(e.name))
        if isinstance(e, ir.Load):
            a = self.eval(e.addr, st, loc)
            sigs = list(a.signals)
            if isinstance(a.type, typedom.Ptr):
                t, s2 = typedom.type_load(a.type, NumAbstract.const(self.aw, 0), e.size, self.tt)
                sigs += s2
                return AbsVal(NumAbstract.top(8 * e.size), t, sigs)
            v = numdom.load_value(a.num, e.size, st.num, self.rofetch)
            t = WORD
            c = a.num.const_value()
            if c is not None:
                t = st.types.cell(c, e.size)
            return AbsVal(v, t, sigs)
        if isinstance(e, ir.Un):
            a = self.eval(e.a, st, loc)
            return AbsVal(numdom.transfer_unop(e.op, a.num, e.p1, e.p2), WORD, a.signals)
        if isinstance(e, ir.Bin):
            a = self.eval(e.a, st, loc)
            b = self.eval(e.b, st, loc)
            sigs = a.signals + b.signals
            bnum = b.num
            if e.op in (BinOp.UDIV, BinOp.UREM, BinOp.SDIV, BinOp.SREM) and bnum.contains(0):
                sigs.append("div-by-zero")
                bnum = self._exclude_zero(bnum)
            num = numdom.transfer_binop(e.op, a.num, bnum)
            ty: typedom.TypeExpr = WORD
            if e.op is BinOp.ADD:
                if isinstance(a.type, typedom.Ptr):
                    ty, _ = typedom.ptr_arith(a.type, b.num, self.tt)
                elif isinstance(b.type, typedom.Ptr):
                    ty, _ = typedom.ptr_arith(b.type, a.num, self.tt)
            elif e.op is BinOp.SUB and isinstance(a.type, typedom.Ptr):
                ty, _ = typedom.ptr_arith(a.type, numdom.transfer_unop(UnOp.NEG, b.num), self.tt)
            return AbsVal(num, ty, sigs)
        raise AssertionError(e)

    @staticmethod
    def _exclude_zero(na: NumAbstract) -> NumAbstract:
        if na.bot or na.lo_u > 0:
            return na
        return numdom._norm(na.width, max(na.lo_u, 1), na.hi_u, na.lo_s, na.hi_s, na.r, na.m)

    def _raise_signals(self, sigs: list[str], addr: int, what: str) -> None:
        for s in sigs:
            if s == "div-by-zero":
                self.alarm("DivByZero", addr, f"possible division by zero in {what}")
            elif s in _SIGNAL_CATEGORY:
                self.alarm(_SIGNAL_CATEGORY[s], addr, f"{s} in {what}")

    # -- target concretization ------------------------------------------

    def concretize(self, e: ir.Expr, st: Storage, loc: Location) -> set[int] | None:
        cap = self.opts.jump_cap
        if isinstance(e, ir.Const):
            return {e.value}
        if isinstance(e, ir.Reg):
            if e.name == "pc":
                return {loc.addr}
            vals = st.num.reg(e.name).enumerate(cap)
            return set(vals) if vals is not None else None
        if isinstance(e, ir.Load):
            addrs = self.concretize(e.addr, st, loc)
            if addrs is None:
                return None
            out = set()
            for a in addrs:
                v = numdom.load_value(NumAbstract.const(self.aw, a), e.size, st.num, self.rofetch)
                if not v.is_const():
                    return None
                out.add(v.const_value())
            return out if len(out) <= cap else None
        if isinstance(e, ir.Un):
            vals = self.concretize(e.a, st, loc)
            if vals is None:
                return None
            from .bitvec import apply_unop, unop_result_width
            w = unop_result_width(e.op, e.a.width, e.p1, e.p2)
            return {apply_unop(e.op, v, e.a.width, e.p1, e.p2) & mask(w) for v in vals}
        if isinstance(e, ir.Bin):
            va = self.concretize(e.a, st, loc)
            vb = self.concretize(e.b, st, loc)
            if va is None or vb is None or len(va) * len(vb) > cap:
                return None
            from .bitvec import apply_binop, binop_result_width
            w = binop_result_width(e.op, e.a.width, e.b.width)
            try:
                return {apply_binop(e.op, x, y, e.a.width, e.b.width) & mask(w)
                        for x in va for y in vb}
            except Exception:
                return None
        raise AssertionError(e)

    def _valid_code_target(self, addr: int) -> bool:
        sec = self.program.section_at(addr)
        return (sec is not None and sec.kind == "code-ro"
                and (addr - sec.base) % ir.INSTR_SIZE == 0 and addr in self.program.instrs)

    # -- privilege-relevant sink checks ---------------------------------

    def _sink_check(self, reg: str, val: AbsVal, addr: int) -> AbsVal:
        root = self.tt.reg_roots.get(reg)
        if not isinstance(root, typedom.ScalarRef):
            return val
        d = self.tt.scalars[root.name]
        if d.pred is None:
            return val
        ok = (isinstance(val.type, typedom.ScalarRef) and val.type.name == root.name) \
            or d.pred.holds_abstract(val.num, self.param_env)
        if not ok:
            cat = "PrivilegeSinkViolation" if reg in ir.MPU_REGS else "PredicateViolation"
            self.alarm(cat, addr, f"cannot prove the {root.name} predicate for {reg}")
        # Continue under the logged assumption that the contract held.
        return AbsVal(val.num, root, val.signals)

    # -- stores ----------------------------------------------------------

    def _transfer_store(self, instr: ir.Store, st: Storage, loc: Location) -> Storage:
        a = self.eval(instr.addr, st, loc)
        v = self.eval(instr.value, st, loc)
        self._raise_signals(a.signals + v.signals, loc.addr, "store")
        size = instr.size

        if isinstance(a.type, typedom.Ptr):
            ok, sigs = typedom.type_store(a.type, NumAbstract.const(self.aw, 0), size,
                                          v.type, v.num, self.tt, self.param_env)
            self._raise_signals(sigs, loc.addr, f"store through {a.type}")
            # Weak shape update: the labeling invariant itself is unchanged.
            return st

        lo = a.num.lo_u
        hi = min(a.num.hi_u + size - 1, mask(self.aw))

        def touches(ranges) -> bool:
            return any(lo <= rhi and rlo <= hi for rlo, rhi in ranges)

        if touches(self.cfg.fixed_ro):
            self.alarm("StoreToReadOnly", loc.addr,
                       f"store may hit read-only memory [{lo:#x},{hi:#x}]")
        if touches(self.cfg.param):
            self.alarm("StoreOutsideWritable", loc.addr,
                       f"untyped store may hit protected parameterized memory [{lo:#x},{hi:#x}]")
        if not touches(self.cfg.fixed_rw):
            return st

        num, status = numdom.store_to(st.num, a.num, size, v.num, self.cfg.fixed_rw)
        types = st.types
        c = a.num.const_value()
        if status == "strong" and c is not None:
            types = types.with_cell(c, size, v.type)
        else:
            addrs = a.num.enumerate(numdom.ENUM_CAP)
            if addrs:
                for ad in addrs:
                    old = types.cell(ad, size)
                    types = types.with_cell(ad, size, typedom.type_join(old, v.type, self.tt))
            else:
                types = TypeStore(types.regs, {k: t for k, t in types.cells.items()
                                               if not (k[0] <= hi and lo <= k[0] + k[1] - 1)})
        if status == "outside":
            self.alarm("StoreOutsideWritable", loc.addr,
                       f"store not provably inside writable fixed memory [{lo:#x},{hi:#x}]")
        return Storage(num, types)

    # -- branch refinement ------------------------------------------------

    def _assume(self, cond: ir.Expr, st: Storage, value: bool) -> Storage | None:
        num = numdom.assume(cond, st.num, self.rofetch, value)
        if num is None:
            return None
        types = st.types
        # Null-check refinement: (p != 0) / (p == 0) on a maybe-null pointer.
        e = cond
        positive = value
        if isinstance(e, ir.Un) and e.op is UnOp.NOT:
            e, positive = e.a, not positive
        if isinstance(e, ir.Bin) and e.op in (BinOp.EQ, BinOp.NEQ):
            if e.op is BinOp.EQ:
                positive = positive
                nonnull_when = not positive
            else:
                nonnull_when = positive
            reg, const = None, None
            if isinstance(e.a, ir.Reg) and isinstance(e.b, ir.Const):
                reg, const = e.a.name, e.b.value
            elif isinstance(e.b, ir.Reg) and isinstance(e.a, ir.Const):
                reg, const = e.b.name, e.a.value
            if reg is not None and const == 0 and nonnull_when:
                t = types.reg(reg)
                if isinstance(t, typedom.Ptr) and t.nullable:
                    types = types.with_reg(reg, replace(t, nullable=False))
        return Storage(num, types)

    # -- the attacker edge -------------------------------------------------

    def attacker_transition(self, st: Storage, exit_addr: int) -> Storage:
        """Havoc what unprivileged execution may change, then the interrupt.

        Fixed and parameterized memory knowledge survives only because the
        protection registers provably grant no write access over the
        protected range; that proof is demanded here (and already at every
        assignment to a protection register)."""
        for reg in ir.MPU_REGS:
            root = self.tt.reg_roots.get(reg)
            if isinstance(root, typedom.ScalarRef) and self.tt.scalars[root.name].pred is not None:
                d = self.tt.scalars[root.name]
                ok = (isinstance(st.types.reg(reg), typedom.ScalarRef)
                      and st.types.reg(reg).name == root.name) \
                    or d.pred.holds_abstract(st.num.reg(reg), self.param_env)
                if not ok:
                    self.alarm("PrivilegeSinkViolation", exit_addr,
                               f"{reg} not provably protective at kernel exit")
        # User registers: all knowledge removed (numeric and type).
        regs_n = {name: v for name, v in st.num.regs.items() if name not in ir.USER_REGS}
        num = replace(st.num, regs=regs_n)
        types = typedom.attacker_havoc_types(st.types)
        return Storage(num, types)

    def interrupt_entry(self, st: Storage, n_values: tuple[int, ...]) -> Storage:
        """Abstract mirror of the hardware interrupt transition."""
        w = ir.reg_width("flags", self.aw)
        regs_n = dict(st.num.regs)
        regs_t = dict(st.types.regs)
        top = NumAbstract.top(w)

        def moved(name: str) -> tuple[NumAbstract, typedom.TypeExpr]:
            return st.num.reg(name), st.types.reg(name)

        for user, banked in (("sp", "sp_b"), ("flags", "flags_b"), ("pc", "pc_b")):
            un, ut = moved(user)
            bn, bt = moved(banked)
            regs_n[user], regs_n[banked] = bn, un
            regs_t[user], regs_t[banked] = bt, ut
        regs_n["flags"] = self._privileged_flags(regs_n.get("flags", top))
        regs_t["flags"] = WORD
        regs_n["pc"] = NumAbstract.const(w, self.cfg.kernel_entry)
        regs_t["pc"] = WORD
        regs_n["r0"] = NumAbstract.from_values(w, n_values)
        regs_t["r0"] = WORD
        regs_n = {k: v for k, v in regs_n.items() if not v.is_top()}
        regs_t = {k: t for k, t in regs_t.items() if not isinstance(t, typedom.Word)}
        return Storage(replace(st.num, regs=regs_n), TypeStore(regs_t, st.types.cells))

    # -- per-instruction transfer ------------------------------------------

    def transfer(self, loc: Location, st: Storage) -> list[tuple[Location, Storage]]:
        """Successor locations with their storages; alarms accumulate."""
        instr = self.program.instrs.get(loc.addr)
        if instr is None:
            raw = bytes(self.image.get(loc.addr + k, 0) for k in range(ir.INSTR_SIZE))
            try:
                instr = ir.decode_instruction(raw, self.aw)
            except ir.DecodeFault as exc:
                self.alarm("DecodeFailure", loc.addr, f"cannot decode target: {exc}")
                return []
        succ: list[tuple[Location, Storage]] = []

        def step_to(addr: int, storage: Storage, callstring=None) -> None:
            cs = loc.callstring if callstring is None else callstring
            k = loc.unroll
            if addr <= loc.addr:  # backward edge: unroll or saturate
                k = min(k + 1, self.opts.unroll)
            succ.append((Location(addr, cs, k), storage))

        if isinstance(instr, ir.Assign):
            v = self.eval(instr.expr, st, loc)
            self._raise_signals(v.signals, loc.addr, f"assign {instr.reg}")
            if instr.reg in ("mpu1", "mpu2", "flags_b"):
                v = self._sink_check(instr.reg, v, loc.addr)
            num = st.num.with_reg(instr.reg, v.num)
            types = st.types.with_reg(instr.reg, v.type)
            step_to(loc.addr + ir.INSTR_SIZE, Storage(num, types))

        elif isinstance(instr, ir.Store):
            step_to(loc.addr + ir.INSTR_SIZE, self._transfer_store(instr, st, loc))

        elif isinstance(instr, ir.CGoto):
            for value, delta in ((True, instr.then_delta), (False, instr.else_delta)):
                refined = self._assume(instr.cond, st, value)
                if refined is not None:
                    step_to(loc.addr + ir.INSTR_SIZE * delta, refined)

        elif isinstance(instr, ir.Goto):
            hint = self.program.hints.get(loc.addr)
            targets = self.concretize(instr.target, st, loc)
            if targets is None:
                self.alarm("ComputedJumpImprecise", loc.addr,
                           "jump target not resolvable to a small set")
                return succ
            bad = sorted(t for t in targets if not self._valid_code_target(t))
            good = sorted(t for t in targets if self._valid_code_target(t))
            if bad:
                self.alarm("ComputedJumpImprecise", loc.addr,
                           f"jump may leave decoded code ({len(bad)} of "
                           f"{len(targets)} targets, e.g. {bad[0]:#x})")
            for t in good:
                if hint == "call":
                    if loc.addr in loc.callstring:
                        raise AnalysisError(
                            f"recursive call through {loc.addr:#x}; call strings do not terminate")
                    if len(loc.callstring) >= self.opts.call_depth:
                        raise AnalysisError("call depth exceeded")
                    succ.append((Location(t, loc.callstring + (loc.addr,), loc.unroll), st))
                elif hint == "return":
                    succ.append((Location(t, loc.callstring[:-1], 0), st))
                else:
                    step_to(t, st)

        elif isinstance(instr, ir.Swi):
            # A software interrupt in privileged mode halts the machine;
            # the path simply ends.
            return []

        elif isinstance(instr, ir.Reti):
            # Kernel exit: flags_b must be provably unprivileged-after-swap.
            fb = AbsVal(st.num.reg("flags_b"), st.types.reg("flags_b"))
            fb = self._sink_check("flags_b", fb, loc.addr)
            st2 = Storage(st.num.with_reg("flags_b", fb.num),
                          st.types.with_reg("flags_b", fb.type))
            post = self._reti(st2, loc.addr)
            havoc = self.attacker_transition(post, loc.addr)
            entry_st = self.interrupt_entry(havoc, self.cfg.runtime_interrupts)
            succ.append((self.entry_location(), entry_st))
        else:
            raise AssertionError(instr)
        return succ

    def _reti(self, st: Storage, addr: int) -> Storage:
        regs_n = dict(st.num.regs)
        regs_t = dict(st.types.regs)

        def get(name):
            return st.num.reg(name), st.types.reg(name)

        for user, banked in (("sp", "sp_b"), ("flags", "flags_b"), ("pc", "pc_b")):
            un, ut = get(user)
            bn, bt = get(banked)
            regs_n[user], regs_n[banked] = bn, un
            regs_t[user], regs_t[banked] = bt, ut
        w = ir.reg_width("pc", self.aw)
        regs_n["pc_b"] = NumAbstract.const(w, addr)
        regs_n = {k: v for k, v in regs_n.items() if not v.is_top()}
        regs_t = {k: t for k, t in regs_t.items() if not isinstance(t, typedom.Word)}
        return Storage(replace(st.num, regs=regs_n), TypeStore(regs_t, st.types.cells))

    # -- fixpoint ------------------------------------------------------------

    def join_widen_at(self, loc: Location, old: Storage, new: Storage, visits: int) -> Storage:
        if visits < self.opts.widen_delay:
            num = numdom.store_join(old.num, new.num)
        else:
            num = numdom.store_widen(old.num, numdom.store_join(old.num, new.num), self.thresholds)
        return Storage(num, typedom.ts_join(old.types, new.types, self.tt))

    def _leq(self, a: Storage, b: Storage) -> bool:
        return numdom.store_leq(a.num, b.num) and typedom.ts_leq(a.types, b.types, self.tt)

    def run(self) -> AnalysisResult:
        t0 = time.monotonic()
        entry = self.entry_location()
        pre = self.precondition()
        states: dict[Location, Storage] = {entry: pre}
        edges: set[tuple[Location, Location]] = set()
        visits: dict[Location, int] = defaultdict(int)
        work: deque[Location] = deque([entry])
        queued = {entry}
        iterations = 0
        while work:
            iterations += 1
            if iterations > self.opts.step_cap:
                raise AnalysisError(f"fixpoint not reached within {self.opts.step_cap} steps")
            loc = work.popleft()
            queued.discard(loc)
            st = states[loc]
            for (nloc, nst) in self.transfer(loc, st):
                edges.add((loc, nloc))
                if nloc == entry:
                    nst = self._join_entry(pre, nst)
                if nloc not in states:
                    states[nloc] = nst
                    changed = True
                else:
                    visits[nloc] += 1
                    joined = self.join_widen_at(nloc, states[nloc], nst, visits[nloc])
                    changed = not self._leq(joined, states[nloc])
                    if changed:
                        states[nloc] = joined
                if changed and nloc not in queued:
                    work.append(nloc)
                    queued.add(nloc)
        alarms = sorted(self.alarms.values(), key=lambda a: (a.addr, a.category))
        result = AnalysisResult(
            entry=entry, locations=states, edges=edges, alarms=alarms,
            nontrivial=False, stable=False, iterations=iterations,
            wall_time=time.monotonic() - t0, cfg=self.cfg, tt=self.tt)
        result.nontrivial = check_nontrivial(result)
        result.stable = self.verify_stable(result)
        return result

    def _join_entry(self, pre: Storage, st: Storage) -> Storage:
        return Storage(numdom.store_join(pre.num, st.num),
                       typedom.ts_join(pre.types, st.types, self.tt))

    def verify_stable(self, result: AnalysisResult) -> bool:
        """F#(P#) <= P#: one more transfer round changes nothing."""
        for loc, st in result.locations.items():
            for (nloc, nst) in self.transfer(loc, st):
                if nloc == result.entry:
                    nst = self._join_entry(self.precondition(), nst)
                have = result.locations.get(nloc)
                if have is None or not self._leq(nst, have):
                    return False
        return True


def analyze_runtime(program: ir.Program, cfg: MachineConfig, tt: TypeTable,
                    opts: AnalysisOptions | None = None) -> AnalysisResult:
    """Compute the runtime invariant under the annotated precondition."""
    return Analyzer(program, cfg, tt, opts).run()


def check_nontrivial(result: AnalysisResult) -> bool:
    """True iff some location's storage excludes at least one concrete state."""
    for st in result.locations.values():
        for v in st.num.regs.values():
            if not v.is_top():
                return True
        for v in st.num.cells.values():
            if not v.is_top():
                return True
        if st.types.regs or st.types.cells:
            return True
    return False


# ---------------------------------------------------------------------------
# Invariant serialization


def _num_doc(v: NumAbstract) -> dict:
    return {"width": v.width, "u": [v.lo_u, v.hi_u], "s": [v.lo_s, v.hi_s],
            "cong": [v.r, v.m], "bot": v.bot}


def _num_from_doc(doc: dict) -> NumAbstract:
    if doc["bot"]:
        return NumAbstract.bottom(doc["width"])
    return numdom._norm(doc["width"], doc["u"][0], doc["u"][1],
                        doc["s"][0], doc["s"][1], doc["cong"][0], doc["cong"][1])


def serialize_invariant(result: AnalysisResult) -> str:
    locations = {}
    for loc, st in sorted(result.locations.items(), key=lambda kv: kv[0]):
        regs = {}
        for name in sorted(set(st.num.regs) | set(st.types.regs)):
            regs[name] = _num_doc(st.num.reg(name))
            regs[name]["type"] = str(st.types.reg(name))
        cells = {}
        for (addr, size) in sorted(set(st.num.cells) | set(st.types.cells)):
            key = f"{addr:#x}:{size}"
            cells[key] = _num_doc(st.num.cell(addr, size))
            cells[key]["type"] = str(st.types.cell(addr, size))
        locations[loc.key()] = {"regs": regs, "cells": cells}
    doc = {
        "schema": "escproof-invariant@1",
        "addr_width": result.cfg.addr_width,
        "entry": result.entry.key(),
        "nontrivial": result.nontrivial,
        "stable": result.stable,
        "alarms": [a.to_doc() for a in result.alarms],
        "locations": locations,
    }
    return json.dumps(doc, indent=1, sort_keys=True)


@dataclass
class LocationInvariant:
    regs: dict[str, tuple[NumAbstract, typedom.TypeExpr]]
    cells: dict[tuple[int, int], tuple[NumAbstract, typedom.TypeExpr]]


@dataclass
class InvariantDoc:
    addr_width: int
    entry: Location
    nontrivial: bool
    stable: bool
    alarms: list[Alarm]
    locations: dict[Location, LocationInvariant]

    def runtime_alarms(self) -> list[Alarm]:
        return [a for a in self.alarms if a.phase == "runtime"]


def parse_invariant(text: str) -> InvariantDoc:
    doc = json.loads(text)
    if doc.get("schema") != "escproof-invariant@1":
        raise ValueError(f"unsupported invariant schema {doc.get('schema')!r}")
    locations = {}
    for key, body in doc["locations"].items():
        regs = {name: (_num_from_doc(d), typedom.parse_type_string(d["type"]))
                for name, d in body["regs"].items()}
        cells = {}
        for ck, d in body["cells"].items():
            addr, size = ck.split(":")
            cells[(int(addr, 16), int(size))] = (_num_from_doc(d),
                                                 typedom.parse_type_string(d["type"]))
        locations[Location.from_key(key)] = LocationInvariant(regs, cells)
    alarms = [Alarm(a["category"], a["addr"], a["phase"], a["message"])
              for a in doc["alarms"]]
    return InvariantDoc(doc["addr_width"], Location.from_key(doc["entry"]),
                        doc["nontrivial"], doc["stable"], alarms, locations)
