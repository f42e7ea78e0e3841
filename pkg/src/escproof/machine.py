"""Concrete small-step semantics of the protected machine.

The machine is a single processor with byte memory, the fixed register
file (user registers plus banked system registers), and a two-range
memory protection unit.  Privilege is the UNPRIVILEGED bit of `flags`
being clear; when privileged the MPU is bypassed.  Unprivileged code
cannot write system registers, cannot clear its own UNPRIVILEGED bit,
and every memory access is checked against the MPU, a fault turning
into an interrupt back to the kernel entry point.

MPU register layout (64 bits): bits 63..32 hold the base address,
bits 31..3 the exclusive limit (8-byte aligned), bits 2..0 the X/W/R
grants, so a value built as `base << 32 | limit | READ | EXEC` grants
[base, limit) as in the usual packing idiom.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from . import ir
from .bitvec import Bitvector, EvalFault, mask

R, W, X = 1, 2, 4
RIGHTS_NONE = 0
RIGHTS_ALL = R | W | X


class MachineFault(Exception):
    """A fault during a regular step: kind in {access, decode, eval, privilege}."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail


@dataclass(frozen=True)
class MachineConfig:
    addr_width: int = 32
    kernel_entry: int = 0
    fixed_ro: tuple[tuple[int, int], ...] = ()   # inclusive [lo, hi] ranges
    fixed_rw: tuple[tuple[int, int], ...] = ()
    param: tuple[tuple[int, int], ...] = ()
    boot: tuple[tuple[int, int], ...] = ()       # boot-phase code addresses
    unprivileged_bit: int = 0
    mmio: dict[int, tuple[int, ...]] = field(default_factory=dict)
    swi_numbers: tuple[int, ...] = (1,)
    fault_number: int = 7
    reset_number: int = 0

    def __post_init__(self):
        ranges = list(self.fixed_ro) + list(self.fixed_rw) + list(self.param)
        ranges.sort()
        for (l1, h1), (l2, h2) in zip(ranges, ranges[1:]):
            if h1 >= l2:
                raise ValueError(f"overlapping address ranges [{l1:#x},{h1:#x}] and [{l2:#x},{h2:#x}]")
        for lo, hi in ranges:
            if not 0 <= lo <= hi < (1 << self.addr_width):
                raise ValueError(f"range [{lo:#x},{hi:#x}] outside the address space")
        if self.reset_number in self.swi_numbers:
            raise ValueError("the reset interrupt number cannot be a software interrupt")

    @property
    def protected_bounds(self) -> tuple[int, int]:
        """First and last protected address (fixed plus parameterized parts)."""
        ranges = list(self.fixed_ro) + list(self.fixed_rw) + list(self.param)
        return min(lo for lo, _ in ranges), max(hi for _, hi in ranges)

    @property
    def runtime_interrupts(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.swi_numbers) | {self.fault_number}))

    def in_ranges(self, addr: int, ranges) -> bool:
        return any(lo <= addr <= hi for lo, hi in ranges)

    def phase_of(self, addr: int) -> str:
        return "boot" if self.in_ranges(addr, self.boot) else "runtime"

    def to_json(self) -> str:
        doc = {
            "schema": "escproof-config@1",
            "addr_width": self.addr_width,
            "kernel_entry": self.kernel_entry,
            "ranges": {
                "fixed_ro": [list(r) for r in self.fixed_ro],
                "fixed_rw": [list(r) for r in self.fixed_rw],
                "param": [list(r) for r in self.param],
                "boot": [list(r) for r in self.boot],
            },
            "unprivileged_bit": self.unprivileged_bit,
            "mmio": {hex(a): list(vs) for a, vs in sorted(self.mmio.items())},
            "swi_numbers": list(self.swi_numbers),
            "fault_number": self.fault_number,
            "reset_number": self.reset_number,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MachineConfig":
        doc = json.loads(text)
        if doc.get("schema") != "escproof-config@1":
            raise ValueError(f"unsupported config schema {doc.get('schema')!r}")
        r = doc["ranges"]
        return cls(
            addr_width=doc["addr_width"],
            kernel_entry=doc["kernel_entry"],
            fixed_ro=tuple(tuple(x) for x in r["fixed_ro"]),
            fixed_rw=tuple(tuple(x) for x in r["fixed_rw"]),
            param=tuple(tuple(x) for x in r["param"]),
            boot=tuple(tuple(x) for x in r.get("boot", [])),
            unprivileged_bit=doc["unprivileged_bit"],
            mmio={int(a, 0): tuple(vs) for a, vs in doc.get("mmio", {}).items()},
            swi_numbers=tuple(doc["swi_numbers"]),
            fault_number=doc["fault_number"],
            reset_number=doc.get("reset_number", 0),
        )


def mpu_fields(value: int, addr_width: int) -> tuple[int, int, int]:
    """Decode an MPU register into (base, exclusive limit, rights bits)."""
    base = (value >> 32) & mask(addr_width)
    limit = (value & 0xFFFF_FFF8) & mask(addr_width)
    return base, limit, value & 0x7


@dataclass
class ConcreteState:
    """Byte memory (sparse, zero-default) plus the register file.

    Step functions never mutate their input: registers are copied and
    memory is copied on write, so unmodified memory is shared.
    """

    mem: dict[int, int]
    regs: dict[str, int]
    addr_width: int = 32

    @classmethod
    def initial(cls, cfg: MachineConfig, image: dict[int, int] | None = None) -> "ConcreteState":
        regs = {name: 0 for name in ir.ALL_REGS}
        return cls(dict(image or {}), regs, cfg.addr_width)

    def read_mem(self, addr: int, size: int) -> int:
        m = mask(self.addr_width)
        return int.from_bytes(bytes(self.mem.get((addr + k) & m, 0) for k in range(size)), "little")

    def reg_bv(self, name: str) -> Bitvector:
        return Bitvector(ir.reg_width(name, self.addr_width), self.regs[name])

    def snapshot(self) -> tuple:
        """Hashable identity for state-set exploration."""
        return (tuple(sorted((a, b) for a, b in self.mem.items() if b)),
                tuple(sorted(self.regs.items())))


def privileged(state: ConcreteState, cfg: MachineConfig) -> bool:
    return not (state.regs["flags"] >> cfg.unprivileged_bit) & 1


def accessible(state: ConcreteState, addr: int, cfg: MachineConfig) -> int:
    """Access rights bitmask for addr; the MPU is bypassed when privileged."""
    if privileged(state, cfg):
        return RIGHTS_ALL
    rights = RIGHTS_NONE
    for reg in ir.MPU_REGS:
        base, limit, r = mpu_fields(state.regs[reg], cfg.addr_width)
        if base <= addr < limit:
            rights |= r
    return rights


def step_interrupt(state: ConcreteState, n: int, cfg: MachineConfig) -> ConcreteState:
    """Hardware interrupt transition: banked swaps, privilege raised,
    control at the kernel entry point, interrupt number in r0."""
    regs = dict(state.regs)
    regs["sp"], regs["sp_b"] = state.regs["sp_b"], state.regs["sp"]
    regs["flags"], regs["flags_b"] = state.regs["flags_b"], state.regs["flags"]
    regs["pc"], regs["pc_b"] = state.regs["pc_b"], state.regs["pc"]
    regs["flags"] &= ~(1 << cfg.unprivileged_bit) & mask(ir.reg_width("flags", cfg.addr_width))
    regs["pc"] = cfg.kernel_entry
    regs["r0"] = n & mask(ir.reg_width("r0", cfg.addr_width))
    return ConcreteState(state.mem, regs, state.addr_width)


class _MMIOChoice(Exception):
    def __init__(self, addr: int, values: tuple[int, ...]):
        self.addr = addr
        self.values = values


def _eval(state: ConcreteState, e: ir.Expr, cfg: MachineConfig, priv: bool,
          choices: dict[int, int]) -> Bitvector:
    def read_reg(name: str) -> Bitvector:
        return state.reg_bv(name)

    def read_mem(addr: int, size: int) -> int:
        m = mask(state.addr_width)
        out = []
        for k in range(size):
            a = (addr + k) & m
            if not priv and not accessible(state, a, cfg) & R:
                raise MachineFault("access", f"read of {a:#x} without R")
            if a in cfg.mmio:
                if a not in choices:
                    raise _MMIOChoice(a, cfg.mmio[a])
                out.append(choices[a] & 0xFF)
            else:
                out.append(state.mem.get(a, 0))
        return int.from_bytes(bytes(out), "little")

    try:
        return ir.eval_expr(e, read_reg, read_mem)
    except EvalFault as exc:
        raise MachineFault("eval", str(exc)) from exc


def _eval_all(state: ConcreteState, exprs: list[ir.Expr], cfg: MachineConfig,
              priv: bool) -> list[tuple[list[Bitvector], dict[int, int]]]:
    """Evaluate expressions under every combination of MMIO read values.

    One value is chosen per MMIO address per instruction.  Returns the
    list of (values, choices) outcomes; a single entry when deterministic.
    """
    results = []
    pending = [dict()]
    while pending:
        choices = pending.pop()
        try:
            results.append(([_eval(state, e, cfg, priv, choices) for e in exprs], choices))
        except _MMIOChoice as ch:
            for v in ch.values:
                ext = dict(choices)
                ext[ch.addr] = v
                pending.append(ext)
    results.sort(key=lambda rc: sorted(rc[1].items()))
    return results


def fetch_instruction(state: ConcreteState, cfg: MachineConfig) -> ir.Instr:
    """next(s): fetch and decode the instruction at pc, checking X|R rights."""
    pc = state.regs["pc"]
    priv = privileged(state, cfg)
    m = mask(state.addr_width)
    raw = []
    for k in range(ir.INSTR_SIZE):
        a = (pc + k) & m
        if not priv and accessible(state, a, cfg) & (R | X) != (R | X):
            raise MachineFault("access", f"fetch of {a:#x} without R|X")
        raw.append(state.mem.get(a, 0))
    try:
        return ir.decode_instruction(bytes(raw), state.addr_width)
    except ir.DecodeFault as exc:
        raise MachineFault("decode", str(exc)) from exc


def step_regular(state: ConcreteState, cfg: MachineConfig,
                 instr: ir.Instr | None = None) -> list[ConcreteState]:
    """exec(s, next(s)): the set of successor states of one regular step.

    The set is a singleton unless the instruction reads a modeled MMIO
    address.  Raises MachineFault on access/decode/eval/privilege faults;
    an unprivileged step can neither write a system register nor clear
    the UNPRIVILEGED bit of flags.
    """
    priv = privileged(state, cfg)
    if instr is None:
        instr = fetch_instruction(state, cfg)
    pc = state.regs["pc"]
    aw = state.addr_width
    next_pc = (pc + ir.INSTR_SIZE) & mask(aw)

    def with_regs(choice_vals: dict[str, int], new_pc: int) -> ConcreteState:
        regs = dict(state.regs)
        regs.update(choice_vals)
        regs["pc"] = new_pc
        return ConcreteState(state.mem, regs, aw)

    if isinstance(instr, ir.Assign):
        if not priv and instr.reg in ir.SYSTEM_REGS:
            raise MachineFault("privilege", f"unprivileged write of {instr.reg}")
        out = []
        for (vals, _) in _eval_all(state, [instr.expr], cfg, priv):
            v = vals[0].value
            if not priv and instr.reg == "flags" and not (v >> cfg.unprivileged_bit) & 1:
                raise MachineFault("privilege", "unprivileged clearing of the UNPRIVILEGED bit")
            out.append(with_regs({instr.reg: v}, next_pc))
        return out

    if isinstance(instr, ir.Store):
        out = []
        for (vals, _) in _eval_all(state, [instr.addr, instr.value], cfg, priv):
            addr, value = vals[0].value, vals[1].value
            mem = dict(state.mem)
            for k, byte in enumerate(value.to_bytes(instr.size, "little")):
                a = (addr + k) & mask(aw)
                if not priv and not accessible(state, a, cfg) & W:
                    raise MachineFault("access", f"write of {a:#x} without W")
                mem[a] = byte
            regs = dict(state.regs)
            regs["pc"] = next_pc
            out.append(ConcreteState(mem, regs, aw))
        return out

    if isinstance(instr, ir.Goto):
        return [with_regs({}, vals[0].value) for (vals, _) in _eval_all(state, [instr.target], cfg, priv)]

    if isinstance(instr, ir.CGoto):
        out = []
        for (vals, _) in _eval_all(state, [instr.cond], cfg, priv):
            delta = instr.then_delta if vals[0].value else instr.else_delta
            out.append(with_regs({}, (pc + ir.INSTR_SIZE * delta) & mask(aw)))
        return out

    if isinstance(instr, ir.Swi):
        if priv:
            raise MachineFault("privilege", "software interrupt while privileged")
        n = instr.num if instr.num in cfg.swi_numbers else cfg.fault_number
        return [step_interrupt(state, n, cfg)]

    if isinstance(instr, ir.Reti):
        if not priv:
            raise MachineFault("privilege", "unprivileged return from interrupt")
        regs = dict(state.regs)
        regs["sp"], regs["sp_b"] = state.regs["sp_b"], state.regs["sp"]
        regs["flags"], regs["flags_b"] = state.regs["flags_b"], state.regs["flags"]
        regs["pc"], regs["pc_b"] = state.regs["pc_b"], pc
        return [ConcreteState(state.mem, regs, aw)]

    raise AssertionError(instr)


@dataclass
class RunResult:
    state: ConcreteState
    executed: int = 0
    deterministic: int = 0
    stop_reason: str = "budget"
    fault: str | None = None
    trace: list[tuple[int, bool]] = field(default_factory=list)
    nondet_sites: list[int] = field(default_factory=list)
    kernel_entries: int = 0
    kernel_exits: int = 0

    @property
    def determinism_fraction(self) -> float:
        return 1.0 if not self.executed else self.deterministic / self.executed


def run_concrete(state: ConcreteState, cfg: MachineConfig, budget: int, *,
                 stop_on_reti: bool = False, rng=None,
                 collect_trace: bool = False) -> RunResult:
    """Execute up to `budget` regular steps from `state`.

    Faults in unprivileged mode become interrupts to the kernel entry
    (with the configured fault number); a fault in privileged mode halts
    the run and is reported.  An instruction counts as deterministic iff
    its successor set is a singleton; when it is not, `rng` (or the first
    value) picks the successor.  With stop_on_reti the run ends right
    after the first executed return-from-interrupt, i.e. at the first
    kernel exit.
    """
    res = RunResult(state)
    for _ in range(budget):
        s = res.state
        if collect_trace:
            res.trace.append((s.regs["pc"], privileged(s, cfg)))
        try:
            instr = fetch_instruction(s, cfg)
            succs = step_regular(s, cfg, instr)
        except MachineFault as f:
            if privileged(s, cfg):
                res.stop_reason = "fault"
                res.fault = f"{f.kind}: {f.detail} at pc={s.regs['pc']:#x}"
                return res
            res.state = step_interrupt(s, cfg.fault_number, cfg)
            res.kernel_entries += 1
            continue
        res.executed += 1
        if len(succs) == 1:
            res.deterministic += 1
        else:
            res.nondet_sites.append(s.regs["pc"])
        if isinstance(instr, ir.Swi) and not privileged(s, cfg):
            res.kernel_entries += 1
        pick = 0 if rng is None else rng.randrange(len(succs))
        res.state = succs[pick]
        if isinstance(instr, ir.Reti):
            res.kernel_exits += 1
            if stop_on_reti:
                res.stop_reason = "kernel-exit"
                return res
    res.stop_reason = "budget"
    return res
