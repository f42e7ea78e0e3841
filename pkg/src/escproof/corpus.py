"""Evaluation fixtures: the toy kernel and its buggy variants, user
images, the one-byte-word typing fixture, and random programs for the
soundness fuzz harness.

The toy kernel is a round-robin scheduler over a circular task list: on
interrupt it saves the interrupted context into the current task,
dispatches syscalls through a jump table, advances `cur` to the next
task, reloads the protection registers from the task's segment fields,
restores the banked registers and returns from the interrupt.  Buggy
variants differ from the secure kernel by exactly one instruction:

  jump-table-off-by-one   dispatch bound 8 over a 6-entry table
  flags-unsanitized       saved flags not forced to keep the
                          unprivileged bit
  mpu-unchecked           protection register reloaded through the
                          wrong register (a user-influenced address)
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import annot, ir, typedom
from .machine import MachineConfig

VARIANTS = ("secure", "jump-table-off-by-one", "flags-unsanitized", "mpu-unchecked")

# Memory map (all constants fit 16-bit immediates).
CODE_BASE = 0x1000
RODATA_BASE = 0x1800
CUR_ADDR = 0x2000
COUNTER_ADDR = 0x2004
KSTACK_LO = 0x2100
KSTACK_TOP = 0x2500
TASKS_BASE = 0x3000
TASK_SIZE = 32
UCODE_BASE = 0x6000
UCODE_END = 0x6100
STACKS_BASE = 0x8000
MMIO_ADDR = 0xF000

READ, WRITE, EXEC = 1, 2, 4
UNPRIVILEGED = 1

SWI_NUMBERS = (1, 2, 3, 4, 5, 6)
FAULT_NUMBER = 7


@dataclass
class KernelBundle:
    variant: str
    source: str
    program: ir.Program
    config: MachineConfig
    typedecls: str
    manual_annotations: str
    manifest: dict


def toy_config(mmio_boot_read: bool = False) -> MachineConfig:
    return MachineConfig(
        addr_width=32,
        kernel_entry=CODE_BASE,
        fixed_ro=((CODE_BASE, 0x1FFF),),
        fixed_rw=((0x2000, 0x2FFF),),
        param=((TASKS_BASE, 0x3FFF),),
        boot=(),  # filled per kernel build from its label layout
        unprivileged_bit=0,
        mmio={MMIO_ADDR: (0x11, 0x22, 0x33, 0x44)} if mmio_boot_read else {},
        swi_numbers=SWI_NUMBERS,
        fault_number=FAULT_NUMBER,
        reset_number=0,
    )


TOY_TYPEDECLS = f"""\
# Toy kernel layout declarations (debug-information stand-in).
scalar flags int 4
scalar mpu int 8
struct Task size {TASK_SIZE}
field Task pc 0 int 4
field Task sp 4 int 4
field Task flags 8 scalar flags
field Task code_segment 12 scalar mpu
field Task data_segment 20 scalar mpu
field Task next 28 ptr Task
global cur {CUR_ADDR:#x} Task*
register mpu1 mpu
register mpu2 mpu
register flags_b flags
"""

TOY_MANUAL_ANNOTATIONS = f"""\
# Generic strengthening: protection predicates and the kernel stack top.
#define READ {READ}
#define WRITE {WRITE}
#define EXEC {EXEC}
#define UNPRIVILEGED {UNPRIVILEGED}
#define KSTACK_TOP {KSTACK_TOP:#x}
type flags = int32 with (self & UNPRIVILEGED) != 0
type mpu = int64 with (self & WRITE) == 0 or (self >>u 32) >u kernel_last_addr or ((self << 32) >>u 32) <u kernel_first_addr
type ksp = int32 with self == KSTACK_TOP
#root register sp ksp
#param nb_tasks 1 2147483647
#param kernel_first_addr {CODE_BASE:#x} {CODE_BASE:#x}
#param kernel_last_addr 0x3fff 0x3fff
"""


def _kernel_source(variant: str, mmio_boot_read: bool) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown kernel variant {variant!r}")
    dispatch_bound = 8 if variant == "jump-table-off-by-one" else 6
    sanitize_mask = 0 if variant == "flags-unsanitized" else UNPRIVILEGED
    mpu_src = "r1" if variant == "mpu-unchecked" else "r5"
    mmio_probe = f"    assign r3, load4({MMIO_ADDR:#x}:32)\n" if mmio_boot_read else ""
    return f"""\
; Round-robin toy kernel ({variant}).
.width 32
.section text {CODE_BASE:#x} code-ro
.entry reset kentry
.entry interrupt kentry

kentry:
    if r0 == 0:32 goto boot else save

; ---- boot: runs once on reset; establishes the runtime invariants.
boot:
    assign sp, {KSTACK_TOP:#x}:32
    assign r1, {KSTACK_LO:#x}:32
    assign r2, {KSTACK_TOP:#x}:32
boot_clear:
    if r1 == r2 goto boot_done else boot_body
boot_body:
    store1 [r1], 0:8
    assign r1, r1 + 1:32
    goto boot_clear
boot_done:
{mmio_probe}    assign r6, {TASKS_BASE:#x}:32
    assign r7, {CUR_ADDR:#x}:32
    store4 [r7], r6
    goto sched

; ---- save the interrupted context into the current task.
save:
    assign r7, {CUR_ADDR:#x}:32
    assign r6, load4(r7)
    store4 [r6], pc_b
    assign r5, r6 + 4:32
    store4 [r5], sp_b
    assign r4, flags_b
    assign r4, r4 | {sanitize_mask}:32
    assign r5, r6 + 8:32
flags_save:
    store4 [r5], r4

; ---- syscall dispatch through the handler table.
    assign r1, r0 - 1:32
    if r1 <u {dispatch_bound}:32 goto dispatch else sched
dispatch:
    assign r2, r1 << 2:32
    assign r3, {RODATA_BASE:#x}:32
    assign r3, r3 + r2
dispatch_jump:
    goto load4(r3)

svc_yield:
    goto sched
svc_ping:
    assign r1, 0x77:32
    goto sched
svc_add:
    assign r1, r1 + r2
    goto sched
svc_mask:
    assign r1, r1 & r2
    goto sched
svc_count:
    assign r7, {COUNTER_ADDR:#x}:32
    assign r4, load4(r7)
    assign r4, r4 + 1:32
    store4 [r7], r4
    goto sched
svc_nop:
    goto sched

; ---- schedule the next task and restore its context.
sched:
    assign r7, {CUR_ADDR:#x}:32
    assign r6, load4(r7)
    assign r5, r6 + 28:32
    assign r6, load4(r5)
    store4 [r7], r6
    assign r5, r6 + 12:32
mpu_reload:
    assign mpu1, load8({mpu_src})
    assign r5, r6 + 20:32
    assign mpu2, load8(r5)
    assign r5, r6 + 4:32
    assign sp_b, load4(r5)
    assign pc_b, load4(r6)
    assign r5, r6 + 8:32
flags_restore:
    assign flags_b, load4(r5)
kexit:
    reti

.section rodata {RODATA_BASE:#x} data-ro
jumptable:
    .word32 svc_yield svc_ping svc_add svc_mask svc_count svc_nop
; the table is immediately followed by other read-only data
    .byte 0x53 0x59 0x53 0x43 0x41 0x4c 0x4c 0x21
"""


def build_kernel(variant: str = "secure", mmio_boot_read: bool = False) -> KernelBundle:
    src = _kernel_source(variant, mmio_boot_read)
    program = ir.parse_program(src)
    cfg = toy_config(mmio_boot_read)
    boot_lo = program.labels["boot"]
    boot_hi = program.labels["save"] - 1
    cfg = MachineConfig(**{**cfg.__dict__, "boot": ((boot_lo, boot_hi),)})
    manifest = {
        "variant": variant,
        "instruction_count": len(program.instrs),
        "dispatch_addr": program.labels["dispatch_jump"],
        "flags_save_addr": program.labels["flags_save"],
        "mpu_reload_addr": program.labels["mpu_reload"],
        "flags_restore_addr": program.labels["flags_restore"],
        "kexit_addr": program.labels["kexit"],
        "jumptable_addr": program.labels["jumptable"],
        "jumptable_entries": 6,
        "expected_runtime_alarms": {
            "secure": [],
            "jump-table-off-by-one": [("ComputedJumpImprecise", "dispatch_addr")],
            "flags-unsanitized": [("PredicateViolation", "flags_save_addr")],
            "mpu-unchecked": [("PrivilegeSinkViolation", "mpu_reload_addr")],
        }[variant],
        "generated_annotation_lines": None,  # filled by the annotation step
    }
    return KernelBundle(variant, src, program, cfg, TOY_TYPEDECLS,
                        TOY_MANUAL_ANNOTATIONS, manifest)


def toy_type_table(bundle: KernelBundle | None = None) -> typedom.TypeTable:
    decls = annot.parse_typedecls(bundle.typedecls if bundle else TOY_TYPEDECLS, ptr_size=4)
    generated = annot.generate_from_decls(decls, ptr_size=4)
    manual = annot.parse_annotations(bundle.manual_annotations if bundle
                                     else TOY_MANUAL_ANNOTATIONS)
    return annot.merge(generated, manual, addr_width=32)


# ---------------------------------------------------------------------------
# User images


TASK_CODE_SOURCE = f"""\
.width 32
.section ucode {UCODE_BASE:#x} code-ro
spin:
    swi 1
    goto spin
"""


@dataclass
class ImageSpec:
    task_count: int = 2
    stack_size: int = 256
    violate_flags: bool = False
    violate_next: bool = False
    swi_number: int = 1

    def __post_init__(self):
        if self.task_count < 1:
            raise ValueError("at least one task")
        if self.stack_size % 8:
            raise ValueError("stack size must be 8-byte aligned")


def _task_code_bytes(spec: ImageSpec) -> dict[int, int]:
    src = TASK_CODE_SOURCE.replace("swi 1", f"swi {spec.swi_number}")
    return ir.parse_program(src).image()


def build_image(spec: ImageSpec, cfg: MachineConfig):
    """Pack task structs (circular next list), shared task code, and the
    per-task stack segments granted by the MPU fields."""
    from .checker import UserImage

    n = spec.task_count
    struct_bytes = bytearray()
    code_seg = (UCODE_BASE << 32) | UCODE_END | READ | EXEC
    for i in range(n):
        stack_lo = STACKS_BASE + i * spec.stack_size
        stack_end = stack_lo + spec.stack_size
        data_seg = (stack_lo << 32) | stack_end | READ | WRITE
        flags = 0 if (spec.violate_flags and i == 0) else UNPRIVILEGED
        nxt = TASKS_BASE + TASK_SIZE * ((i + 1) % n)
        if spec.violate_next and i == 0:
            nxt = KSTACK_LO + 0x100  # points into the kernel stack
        struct_bytes += (UCODE_BASE).to_bytes(4, "little")          # pc
        struct_bytes += (stack_end - 4).to_bytes(4, "little")       # sp
        struct_bytes += flags.to_bytes(4, "little")                 # flags
        struct_bytes += code_seg.to_bytes(8, "little")              # code_segment
        struct_bytes += data_seg.to_bytes(8, "little")              # data_segment
        struct_bytes += nxt.to_bytes(4, "little")                   # next
    code = _task_code_bytes(spec)
    code_lo = min(code)
    code_blob = bytes(code.get(code_lo + k, 0) for k in range(max(code) - code_lo + 1))
    segments = [(TASKS_BASE, bytes(struct_bytes)), (code_lo, code_blob)]
    manifest = {
        "task_count": n,
        "stack_size": spec.stack_size,
        "task_struct_base": TASKS_BASE,
        "task_struct_size": TASK_SIZE,
        "code_segment": [UCODE_BASE, UCODE_END],
        "stacks_base": STACKS_BASE,
    }
    param_lo, param_hi = cfg.param[0]
    if not (param_lo <= TASKS_BASE and TASKS_BASE + len(struct_bytes) - 1 <= param_hi):
        raise ValueError("task structures overflow the parameterized region")
    return UserImage(segments, manifest)


# ---------------------------------------------------------------------------
# One-byte-word typing fixture


FIG_TYPEDECLS = """\
# Two mutually referencing structures in a one-byte-word world.
struct foo size 2
field foo next 0 ptr foo
field foo data 1 ptr bar
struct bar size 4
field bar x 0 int 1
field bar y 1 int 1
field bar f 2 struct foo
"""


def typed_memory_fixture():
    """Concrete six-byte memory, its labeling, and the derived type table.

    The memory holds a `foo` at 0x00 (next=0x04, data=0x02) and a `bar`
    at 0x02 whose embedded foo points back at 0x00 and at the bar.
    """
    decls = annot.parse_typedecls(FIG_TYPEDECLS, ptr_size=1)
    generated = annot.generate_from_decls(decls, ptr_size=1)
    tt = annot.merge(generated, None, addr_width=8)
    memory = {0x00: 0x04, 0x01: 0x02, 0x02: 0x00, 0x03: 0xFF, 0x04: 0x00, 0x05: 0x02}
    labeling = typedom.close_labeling(
        {0x00: typedom.SByte("foo", 0), 0x02: typedom.SByte("bar", 0)}, tt)
    return memory, labeling, tt


# ---------------------------------------------------------------------------
# Random programs for the soundness fuzz harness (8-bit machine)


FUZZ_CODE_BASE = 0x10
FUZZ_RW = (0xB0, 0xBF)
FUZZ_SWI = (1, 2)
FUZZ_FAULT = 3


def fuzz_config(n_instrs: int) -> MachineConfig:
    code_hi = FUZZ_CODE_BASE + 8 * n_instrs - 1
    return MachineConfig(
        addr_width=8,
        kernel_entry=FUZZ_CODE_BASE,
        fixed_ro=((FUZZ_CODE_BASE, code_hi),),
        fixed_rw=(FUZZ_RW,),
        param=((0xC0, 0xCF),),
        unprivileged_bit=0,
        swi_numbers=FUZZ_SWI,
        fault_number=FUZZ_FAULT,
    )


FUZZ_ANNOTATIONS = """\
type flags8 = int8 with (self & 1) != 0
type mpu = int64 with self == 0
#root register mpu1 mpu
#root register mpu2 mpu
#root register flags_b flags8
"""


def fuzz_type_table() -> typedom.TypeTable:
    return annot.merge(annot.parse_annotations(FUZZ_ANNOTATIONS), None, addr_width=8)


def random_program(rng: random.Random, max_body: int = 12) -> ir.Program:
    """A terminating random kernel for the 8-bit fuzz machine.

    Straight-line arithmetic over r0..r3 with stores and loads confined
    to the tracked writable window, forward branches, an optional
    bounded counting loop, and a sanitizing epilogue ending in reti.
    """
    regs = ["r0", "r1", "r2", "r3"]
    lines = [".width 8", f".section code {FUZZ_CODE_BASE:#x} code-ro",
             ".entry reset entry", ".entry interrupt entry", "entry:"]

    def rnd_operand() -> str:
        if rng.random() < 0.35:
            return f"{rng.randrange(256):#x}:8"
        return rng.choice(regs)

    def rnd_expr() -> str:
        kind = rng.random()
        if kind < 0.18:
            return f"load1({FUZZ_RW[0]:#x}:8 + ({rng.choice(regs)} & 0x7:8))"
        if kind < 0.3:
            op = rng.choice(["==", "!=", "<u", "<s"])
            return f"uext8({rng.choice(regs)} {op} {rnd_operand()})"
        if kind < 0.42:
            op = rng.choice(["/u", "%u", "/s", "%s"])
            return f"{rng.choice(regs)} {op} {rng.randrange(1, 6):#x}:8"
        if kind < 0.52:
            return f"extract({rng.choice(regs)} , 0, 6) & 0x3f:7 | uext7(extract({rng.choice(regs)}, 7, 7))"
        op = rng.choice(["+", "-", "*", "&", "|", "^", "<<", ">>u", ">>s"])
        return f"{rng.choice(regs)} {op} {rnd_operand()}"

    body_len = rng.randrange(3, max_body + 1)
    loop = rng.random() < 0.4
    fwd_label = 0
    pending_label: str | None = None
    if loop:
        lines.append("    assign r3, 0:8")
        lines.append("loop_head:")
    for _ in range(body_len):
        if pending_label and rng.random() < 0.6:
            lines.append(pending_label + ":")
            pending_label = None
        roll = rng.random()
        if roll < 0.6:
            w = rng.choice(regs)
            e = rnd_expr()
            if "extract" in e and "|" in e:
                lines.append(f"    assign {w}, uext8(extract({rng.choice(regs)}, 0, 6)) * 2:8")
            else:
                lines.append(f"    assign {w}, {e}")
        elif roll < 0.8:
            lines.append(f"    store1 [{FUZZ_RW[0]:#x}:8 + ({rng.choice(regs)} & 0x7:8)], {rng.choice(regs)}")
        elif pending_label is None:
            fwd_label += 1
            pending_label = f"fwd{fwd_label}"
            op = rng.choice(["==", "!=", "<u"])
            lines.append(f"    if {rng.choice(regs)} {op} {rnd_operand()} goto {pending_label}")
    if pending_label:
        lines.append(pending_label + ":")
    if loop:
        lines.append("    assign r3, r3 + 1:8")
        lines.append(f"    if r3 <u {rng.randrange(2, 6)}:8 goto loop_head else done")
        lines.append("done:")
    lines.append(f"    assign flags_b, {rng.choice(regs)} | 1:8")
    lines.append("    reti")
    return ir.parse_program("\n".join(lines) + "\n")
