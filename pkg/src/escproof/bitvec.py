"""Width-tagged machine integers and their operator semantics.

Every value in the IR is a bitvector: an unsigned integer reduced modulo
2**width, with width between 1 and 64.  Arithmetic is modular
two's-complement; comparisons produce width-1 results.  Corner cases are
pinned here once and shared by the concrete interpreter, the abstract
domains and the test oracles:

  * division or remainder by zero raises EvalFault,
  * sdiv(INT_MIN, -1) wraps to INT_MIN and srem(INT_MIN, -1) is 0,
  * shift amounts >= width give 0 (sar sign-fills instead),
  * extract(i, j) selects bits i..j inclusive, little-endian bit order,
  * concat(hi, lo) places the first operand in the high bits.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

MAX_WIDTH = 64


class WidthError(ValueError):
    """Inconsistent or out-of-range bit widths."""


class EvalFault(Exception):
    """Concrete evaluation fault (division or remainder by zero)."""


class BinOp(enum.Enum):
    ADD = "+"
    SUB = "-"
    MUL = "*"
    UDIV = "/u"
    UREM = "%u"
    SDIV = "/s"
    SREM = "%s"
    AND = "&"
    OR = "|"
    XOR = "^"
    SHL = "<<"
    SHR = ">>u"
    SAR = ">>s"
    CONCAT = "concat"
    EQ = "=="
    NEQ = "!="
    ULT = "<u"
    UGT = ">u"
    SLT = "<s"
    SGT = ">s"


class UnOp(enum.Enum):
    NOT = "~"
    NEG = "neg"
    UEXT = "uext"
    SEXT = "sext"
    EXTRACT = "extract"


CMP_OPS = frozenset({BinOp.EQ, BinOp.NEQ, BinOp.ULT, BinOp.UGT, BinOp.SLT, BinOp.SGT})


def mask(width: int) -> int:
    return (1 << width) - 1


def to_signed(value: int, width: int) -> int:
    """Two's-complement reading of an unsigned representative."""
    if value >= 1 << (width - 1):
        return value - (1 << width)
    return value


def to_unsigned(value: int, width: int) -> int:
    return value & mask(width)


@dataclass(frozen=True)
class Bitvector:
    """A machine integer of a fixed width, stored as its unsigned value."""

    width: int
    value: int

    def __post_init__(self):
        if not 1 <= self.width <= MAX_WIDTH:
            raise WidthError(f"width {self.width} out of [1, {MAX_WIDTH}]")
        object.__setattr__(self, "value", self.value & mask(self.width))

    @property
    def signed(self) -> int:
        return to_signed(self.value, self.width)

    def __str__(self) -> str:
        return f"{self.value:#x}:{self.width}"


def bv(value: int, width: int) -> Bitvector:
    return Bitvector(width, value)


def binop_result_width(op: BinOp, wa: int, wb: int) -> int:
    """Result width of `op` applied to operands of widths wa, wb."""
    if op is BinOp.CONCAT:
        if wa + wb > MAX_WIDTH:
            raise WidthError(f"concat width {wa + wb} exceeds {MAX_WIDTH}")
        return wa + wb
    if wa != wb:
        raise WidthError(f"operand widths differ: {wa} vs {wb} for {op.value}")
    if op in CMP_OPS:
        return 1
    return wa


def apply_binop(op: BinOp, a: int, b: int, wa: int, wb: int) -> int:
    """Operator semantics on raw unsigned values; result is reduced by caller width."""
    w = wa
    if op is BinOp.ADD:
        return a + b
    if op is BinOp.SUB:
        return a - b
    if op is BinOp.MUL:
        return a * b
    if op is BinOp.UDIV:
        if b == 0:
            raise EvalFault("udiv by zero")
        return a // b
    if op is BinOp.UREM:
        if b == 0:
            raise EvalFault("urem by zero")
        return a % b
    if op is BinOp.SDIV:
        if b == 0:
            raise EvalFault("sdiv by zero")
        sa, sb = to_signed(a, w), to_signed(b, w)
        # Truncating division; INT_MIN / -1 wraps back to INT_MIN.
        q = abs(sa) // abs(sb)
        return q if (sa >= 0) == (sb >= 0) else -q
    if op is BinOp.SREM:
        if b == 0:
            raise EvalFault("srem by zero")
        sa, sb = to_signed(a, w), to_signed(b, w)
        r = abs(sa) % abs(sb)
        return r if sa >= 0 else -r
    if op is BinOp.AND:
        return a & b
    if op is BinOp.OR:
        return a | b
    if op is BinOp.XOR:
        return a ^ b
    if op is BinOp.SHL:
        return 0 if b >= w else a << b
    if op is BinOp.SHR:
        return 0 if b >= w else a >> b
    if op is BinOp.SAR:
        sa = to_signed(a, w)
        if b >= w:
            return 0 if sa >= 0 else mask(w)
        return sa >> b
    if op is BinOp.CONCAT:
        return (a << wb) | b
    if op is BinOp.EQ:
        return int(a == b)
    if op is BinOp.NEQ:
        return int(a != b)
    if op is BinOp.ULT:
        return int(a < b)
    if op is BinOp.UGT:
        return int(a > b)
    if op is BinOp.SLT:
        return int(to_signed(a, w) < to_signed(b, w))
    if op is BinOp.SGT:
        return int(to_signed(a, w) > to_signed(b, w))
    raise AssertionError(op)


def bv_binop(op: BinOp, a: Bitvector, b: Bitvector) -> Bitvector:
    w = binop_result_width(op, a.width, b.width)
    return Bitvector(w, apply_binop(op, a.value, b.value, a.width, b.width) & mask(w))


def unop_result_width(op: UnOp, w: int, arg1: int | None, arg2: int | None) -> int:
    if op in (UnOp.NOT, UnOp.NEG):
        return w
    if op in (UnOp.UEXT, UnOp.SEXT):
        if arg1 is None or arg1 < w or arg1 > MAX_WIDTH:
            raise WidthError(f"{op.value} target width {arg1} invalid for operand width {w}")
        return arg1
    if op is UnOp.EXTRACT:
        if arg1 is None or arg2 is None or not 0 <= arg1 <= arg2 < w:
            raise WidthError(f"extract bits {arg1}..{arg2} invalid for width {w}")
        return arg2 - arg1 + 1
    raise AssertionError(op)


def apply_unop(op: UnOp, a: int, w: int, arg1: int | None = None, arg2: int | None = None) -> int:
    if op is UnOp.NOT:
        return ~a & mask(w)
    if op is UnOp.NEG:
        return -a & mask(w)
    if op is UnOp.UEXT:
        return a
    if op is UnOp.SEXT:
        return to_signed(a, w) & mask(arg1)  # type: ignore[arg-type]
    if op is UnOp.EXTRACT:
        return (a >> arg1) & mask(arg2 - arg1 + 1)  # type: ignore[operator]
    raise AssertionError(op)


def bv_unop(op: UnOp, a: Bitvector, arg1: int | None = None, arg2: int | None = None) -> Bitvector:
    w = unop_result_width(op, a.width, arg1, arg2)
    return Bitvector(w, apply_unop(op, a.value, a.width, arg1, arg2))
