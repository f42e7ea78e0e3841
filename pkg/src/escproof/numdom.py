"""Numeric value abstraction and its store.

A value abstraction couples the unsigned and signed interval readings of
a bitvector with a congruence (residue, modulus), mutually reduced so
that the represented set is the intersection of all three views.  An
optional symbolic upper bound `value <= scale*param + offset` (over the
integers, not modular) supports array bound checks against lengths that
are analysis parameters rather than constants.

The store maps registers and discovered fixed-address cells to value
abstractions.  Cells materialize on strong writes; untracked bytes read
as top; overlapping accesses split cells at byte granularity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from . import ir
from .bitvec import (
    BinOp,
    UnOp,
    apply_binop,
    apply_unop,
    binop_result_width,
    mask,
    to_signed,
    unop_result_width,
)

CONG_MOD_CAP = 1 << 16
ENUM_CAP = 64


def _cap_modulus(r: int, m: int) -> tuple[int, int]:
    if m > CONG_MOD_CAP:
        m = math.gcd(m, CONG_MOD_CAP)
        if m <= 1:
            return 0, 1
    return r % m, m


@dataclass(frozen=True)
class NumAbstract:
    """Reduced product of unsigned/signed intervals and a congruence.

    The concretization is the set of width-bit values v with
    lo_u <= v <= hi_u, lo_s <= signed(v) <= hi_s, v = r (mod m) when
    m > 0, v = r when m == 0, and additionally (over the integers)
    v <= scale*param + offset when sym_ub = (param, scale, offset).
    sym_id names the parameter this value is known to equal.
    """

    width: int
    lo_u: int
    hi_u: int
    lo_s: int
    hi_s: int
    r: int
    m: int
    bot: bool = False
    sym_ub: tuple[str, int, int] | None = None
    sym_id: str | None = None

    # -- constructors ------------------------------------------------

    @classmethod
    def bottom(cls, width: int) -> "NumAbstract":
        return cls(width, 1, 0, 1, 0, 0, 1, bot=True)

    @classmethod
    def top(cls, width: int) -> "NumAbstract":
        return _norm(width, 0, mask(width), -(1 << width - 1), (1 << width - 1) - 1, 0, 1)

    @classmethod
    def const(cls, width: int, value: int) -> "NumAbstract":
        v = value & mask(width)
        return _norm(width, v, v, to_signed(v, width), to_signed(v, width), v, 0)

    @classmethod
    def range_u(cls, width: int, lo: int, hi: int) -> "NumAbstract":
        t = cls.top(width)
        return _norm(width, lo, hi, t.lo_s, t.hi_s, 0, 1)

    @classmethod
    def from_values(cls, width: int, values) -> "NumAbstract":
        out = cls.bottom(width)
        for v in values:
            out = join(out, cls.const(width, v))
        return out

    # -- queries -----------------------------------------------------

    def is_const(self) -> bool:
        return not self.bot and self.lo_u == self.hi_u

    def const_value(self) -> int | None:
        return self.lo_u if self.is_const() else None

    def is_top(self) -> bool:
        return self == NumAbstract.top(self.width)

    def contains(self, value: int) -> bool:
        if self.bot:
            return False
        v = value & mask(self.width)
        if not self.lo_u <= v <= self.hi_u:
            return False
        if not self.lo_s <= to_signed(v, self.width) <= self.hi_s:
            return False
        if self.m == 0:
            return v == self.r
        return v % self.m == self.r % self.m

    def enumerate(self, cap: int = ENUM_CAP) -> list[int] | None:
        """The concrete values, if there are at most `cap` of them."""
        if self.bot:
            return []
        step = self.m if self.m > 1 else 1
        if self.m == 0:
            return [self.r]
        if (self.hi_u - self.lo_u) // step + 1 > cap:
            return None
        vals = [v for v in range(self.lo_u, self.hi_u + 1, step) if self.contains(v)]
        return vals if len(vals) <= cap else None

    def gamma(self) -> list[int]:
        """All concrete values; only for small widths (tests)."""
        if self.width > 16:
            raise ValueError("gamma enumeration is for narrow widths only")
        return [v for v in range(1 << self.width) if self.contains(v)]


def _next_cong_ge(x: int, r: int, m: int) -> int:
    return x + (r - x) % m


def _prev_cong_le(x: int, r: int, m: int) -> int:
    return x - (x - r) % m


def _tighten_signed(lo_s: int, hi_s: int, r: int, m: int, w: int) -> tuple[int, int]:
    """Move signed endpoints to values whose unsigned reading is = r (mod m)."""
    rs_neg = (r - (1 << w)) % m
    nlo = _next_cong_ge(lo_s, rs_neg if lo_s < 0 else r, m)
    if lo_s < 0 <= nlo:
        nlo = _next_cong_ge(0, r, m)
    nhi = _prev_cong_le(hi_s, r if hi_s >= 0 else rs_neg, m)
    if hi_s >= 0 > nhi:
        nhi = _prev_cong_le(-1, rs_neg, m)
    return nlo, nhi


def _norm(width: int, lo_u: int, hi_u: int, lo_s: int, hi_s: int, r: int, m: int,
          sym_ub=None, sym_id=None) -> NumAbstract:
    """Canonical mutual reduction of the three views."""
    w = width
    half = 1 << (w - 1)
    top_u_hi = mask(w)
    r, m = _cap_modulus(r, m) if m > 0 else (r & mask(w), 0)
    for _ in range(6):
        lo_u = max(lo_u, 0)
        hi_u = min(hi_u, top_u_hi)
        lo_s = max(lo_s, -half)
        hi_s = min(hi_s, half - 1)
        if lo_u > hi_u or lo_s > hi_s:
            return NumAbstract.bottom(w)

        changed = False

        # Unsigned tightening from the signed interval.
        pieces = []
        if hi_s >= 0:
            pieces.append((max(lo_s, 0), hi_s))
        if lo_s < 0:
            pieces.append((lo_s + (1 << w), min(hi_s, -1) + (1 << w)))
        live = [(max(lo_u, a), min(hi_u, b)) for a, b in pieces]
        live = [(a, b) for a, b in live if a <= b]
        if not live:
            return NumAbstract.bottom(w)
        nlo, nhi = min(a for a, _ in live), max(b for _, b in live)
        if (nlo, nhi) != (lo_u, hi_u):
            lo_u, hi_u, changed = nlo, nhi, True

        # Signed tightening from the unsigned interval.
        pieces = []
        if lo_u < half:
            pieces.append((lo_u, min(hi_u, half - 1)))
        if hi_u >= half:
            pieces.append((max(lo_u, half) - (1 << w), hi_u - (1 << w)))
        live = [(max(lo_s, a), min(hi_s, b)) for a, b in pieces]
        live = [(a, b) for a, b in live if a <= b]
        if not live:
            return NumAbstract.bottom(w)
        nlo, nhi = min(a for a, _ in live), max(b for _, b in live)
        if (nlo, nhi) != (lo_s, hi_s):
            lo_s, hi_s, changed = nlo, nhi, True

        # Congruence tightening of both interval views.
        if m > 1:
            nlo, nhi = _next_cong_ge(lo_u, r, m), _prev_cong_le(hi_u, r, m)
            if nlo > nhi:
                return NumAbstract.bottom(w)
            if (nlo, nhi) != (lo_u, hi_u):
                lo_u, hi_u, changed = nlo, nhi, True
            # Signed endpoints follow the congruence of the unsigned view.
            nlo, nhi = _tighten_signed(lo_s, hi_s, r, m, w)
            if nlo > nhi:
                return NumAbstract.bottom(w)
            if (nlo, nhi) != (lo_s, hi_s):
                lo_s, hi_s, changed = nlo, nhi, True
        elif m == 0:
            v = r
            if not (lo_u <= v <= hi_u) or not (lo_s <= to_signed(v, w) <= hi_s):
                return NumAbstract.bottom(w)
            if (lo_u, hi_u) != (v, v):
                lo_u = hi_u = v
                lo_s = hi_s = to_signed(v, w)
                changed = True

        if lo_u == hi_u and m != 0:
            r, m, changed = lo_u, 0, True
        if not changed:
            break
    return NumAbstract(w, lo_u, hi_u, lo_s, hi_s, r, m, sym_ub=sym_ub, sym_id=sym_id)


def _cong_join(r1: int, m1: int, r2: int, m2: int) -> tuple[int, int]:
    m = math.gcd(math.gcd(m1, m2), abs(r1 - r2))
    if m == 0:
        return r1, 0
    return _cap_modulus(r1 % m, m)


def join(a: NumAbstract, b: NumAbstract) -> NumAbstract:
    if a.width != b.width:
        raise ValueError(f"width mismatch in join: {a.width} vs {b.width}")
    if a.bot:
        return b
    if b.bot:
        return a
    r, m = _cong_join(a.r, a.m, b.r, b.m)
    sym_ub = a.sym_ub if a.sym_ub == b.sym_ub else None
    sym_id = a.sym_id if a.sym_id == b.sym_id else None
    return _norm(a.width, min(a.lo_u, b.lo_u), max(a.hi_u, b.hi_u),
                 min(a.lo_s, b.lo_s), max(a.hi_s, b.hi_s), r, m,
                 sym_ub=sym_ub, sym_id=sym_id)


def meet(a: NumAbstract, b: NumAbstract) -> NumAbstract:
    if a.width != b.width:
        raise ValueError("width mismatch in meet")
    if a.bot or b.bot:
        return NumAbstract.bottom(a.width)
    # Congruence meet by CRT, falling back to the finer operand when the
    # combined modulus would blow past the cap.
    if a.m == 0 and b.m == 0:
        if a.r != b.r:
            return NumAbstract.bottom(a.width)
        r, m = a.r, 0
    elif a.m == 0:
        if b.m > 0 and a.r % b.m != b.r % b.m:
            return NumAbstract.bottom(a.width)
        r, m = a.r, 0
    elif b.m == 0:
        if a.m > 0 and b.r % a.m != a.r % a.m:
            return NumAbstract.bottom(a.width)
        r, m = b.r, 0
    else:
        g = math.gcd(a.m, b.m)
        if (a.r - b.r) % g:
            return NumAbstract.bottom(a.width)
        l = a.m * b.m // g
        if l > CONG_MOD_CAP:
            r, m = (a.r, a.m) if a.m >= b.m else (b.r, b.m)
        else:
            # CRT solution modulo lcm.
            _, p, _ = _egcd(a.m // g, b.m // g)
            diff = (b.r - a.r) // g
            r = (a.r + a.m * (diff * p % (b.m // g))) % l
            m = l
    sym_ub = a.sym_ub or b.sym_ub
    sym_id = a.sym_id or b.sym_id
    return _norm(a.width, max(a.lo_u, b.lo_u), min(a.hi_u, b.hi_u),
                 max(a.lo_s, b.lo_s), min(a.hi_s, b.hi_s), r, m,
                 sym_ub=sym_ub, sym_id=sym_id)


def _egcd(a: int, b: int) -> tuple[int, int, int]:
    if b == 0:
        return a, 1, 0
    g, x, y = _egcd(b, a % b)
    return g, y, x - (a // b) * y


def is_leq(a: NumAbstract, b: NumAbstract) -> bool:
    """gamma(a) subset of gamma(b) (conservative)."""
    if a.bot:
        return True
    if b.bot:
        return False
    if not (b.lo_u <= a.lo_u and a.hi_u <= b.hi_u and b.lo_s <= a.lo_s and a.hi_s <= b.hi_s):
        return False
    if b.m == 0:
        if not (a.m == 0 and a.r == b.r):
            return False
    elif b.m > 1:
        if a.m == 0:
            if a.r % b.m != b.r % b.m:
                return False
        elif a.m % b.m or a.r % b.m != b.r % b.m:
            return False
    if b.sym_ub is not None and a.sym_ub != b.sym_ub:
        return False
    return True


def widen(a: NumAbstract, b: NumAbstract, thresholds: tuple[int, ...] = ()) -> NumAbstract:
    """Threshold widening: a bound that grew jumps to the next threshold."""
    if a.bot:
        return b
    if b.bot:
        return a
    w = a.width
    thr_u = sorted({0, 1, mask(w)} | {t & mask(w) for t in thresholds})
    thr_s = sorted({-(1 << w - 1), 0, (1 << w - 1) - 1}
                   | {to_signed(t & mask(w), w) for t in thresholds})
    lo_u = a.lo_u if b.lo_u >= a.lo_u else max((t for t in thr_u if t <= b.lo_u), default=0)
    hi_u = a.hi_u if b.hi_u <= a.hi_u else min((t for t in thr_u if t >= b.hi_u), default=mask(w))
    lo_s = a.lo_s if b.lo_s >= a.lo_s else max((t for t in thr_s if t <= b.lo_s), default=thr_s[0])
    hi_s = a.hi_s if b.hi_s <= a.hi_s else min((t for t in thr_s if t >= b.hi_s), default=thr_s[-1])
    r, m = _cong_join(a.r, a.m, b.r, b.m)
    sym_ub = a.sym_ub if a.sym_ub == b.sym_ub else None
    return _norm(w, lo_u, hi_u, lo_s, hi_s, r, m, sym_ub=sym_ub)


# ---------------------------------------------------------------------------
# Transfer functions


def _known_low_bits(a: NumAbstract) -> tuple[int, int]:
    """(k, bits): the k trailing bits of every value equal `bits`."""
    if a.m == 0:
        return a.width, a.r
    k = 0
    m = a.m
    while m % 2 == 0 and k < a.width:
        k += 1
        m //= 2
    return k, a.r % (1 << k) if k else 0


def _from_low_bits(width: int, k: int, bits: int, lo_u: int = 0, hi_u: int | None = None,
                   lo_s: int | None = None, hi_s: int | None = None) -> NumAbstract:
    t = NumAbstract.top(width)
    if k >= width:
        return NumAbstract.const(width, bits & mask(width))
    r, m = (bits % (1 << k), 1 << k) if k > 0 else (0, 1)
    return _norm(width, lo_u, hi_u if hi_u is not None else t.hi_u,
                 lo_s if lo_s is not None else t.lo_s,
                 hi_s if hi_s is not None else t.hi_s, r, m)


def _bitwise(op: BinOp, a: NumAbstract, b: NumAbstract) -> NumAbstract:
    w = a.width
    ka, ra = _known_low_bits(a)
    kb, rb = _known_low_bits(b)
    # A result bit is determined when both inputs determine it, or when one
    # determined input forces it (0 for AND, 1 for OR).
    k = 0
    bits = 0
    for i in range(w):
        in_a, in_b = i < ka, i < kb
        ba, bb = (ra >> i) & 1, (rb >> i) & 1
        if op is BinOp.AND:
            known = (in_a and in_b) or (in_a and ba == 0) or (in_b and bb == 0)
            val = (ba if in_a else 1) & (bb if in_b else 1)
        elif op is BinOp.OR:
            known = (in_a and in_b) or (in_a and ba == 1) or (in_b and bb == 1)
            val = (ba if in_a else 0) | (bb if in_b else 0)
        else:  # XOR
            known = in_a and in_b
            val = ba ^ bb
        if not known:
            break
        k += 1
        bits |= val << i
    if op is BinOp.AND:
        lo_u, hi_u = 0, min(a.hi_u, b.hi_u)
    elif op is BinOp.OR:
        span = (1 << max(a.hi_u.bit_length(), b.hi_u.bit_length())) - 1
        lo_u, hi_u = max(a.lo_u, b.lo_u), min(span, mask(w))
    else:
        span = (1 << max(a.hi_u.bit_length(), b.hi_u.bit_length())) - 1
        lo_u, hi_u = 0, min(span, mask(w))
    # The unsigned range reasoning above assumes no sign-extension effects;
    # it is valid because hi_u bounds use unsigned views only.
    return _from_low_bits(w, k, bits, lo_u, hi_u)


def _cmp_result(truth: bool | None) -> NumAbstract:
    if truth is None:
        return NumAbstract.range_u(1, 0, 1)
    return NumAbstract.const(1, int(truth))


def transfer_binop(op: BinOp, a: NumAbstract, b: NumAbstract) -> NumAbstract:
    w_out = binop_result_width(op, a.width, b.width)
    if a.bot or b.bot:
        return NumAbstract.bottom(w_out)
    w = a.width
    av, bv = a.const_value(), b.const_value()
    if av is not None and bv is not None:
        from .bitvec import EvalFault
        try:
            return NumAbstract.const(w_out, apply_binop(op, av, bv, a.width, b.width) & mask(w_out))
        except EvalFault:
            return NumAbstract.bottom(w_out)  # division by a constant zero: no surviving execution

    if op is BinOp.ADD:
        m = math.gcd(a.m, b.m)
        if m == 0:
            m = 1
        r = (a.r + b.r) % m
        lo_u, hi_u = (a.lo_u + b.lo_u, a.hi_u + b.hi_u)
        if hi_u > mask(w):
            lo_u, hi_u = 0, mask(w)
        lo_s, hi_s = a.lo_s + b.lo_s, a.hi_s + b.hi_s
        half = 1 << (w - 1)
        if lo_s < -half or hi_s >= half:
            lo_s, hi_s = -half, half - 1
        sym_ub = None
        if a.sym_ub and bv is not None:
            p, s, o = a.sym_ub
            sym_ub = (p, s, o + bv)
        elif b.sym_ub and av is not None:
            p, s, o = b.sym_ub
            sym_ub = (p, s, o + av)
        return _norm(w, lo_u, hi_u, lo_s, hi_s, r, m, sym_ub=sym_ub)

    if op is BinOp.SUB:
        m = math.gcd(a.m, b.m)
        if m == 0:
            m = 1
        r = (a.r - b.r) % m
        lo_u, hi_u = a.lo_u - b.hi_u, a.hi_u - b.lo_u
        if lo_u < 0:
            lo_u, hi_u = 0, mask(w)
        lo_s, hi_s = a.lo_s - b.hi_s, a.hi_s - b.lo_s
        half = 1 << (w - 1)
        if lo_s < -half or hi_s >= half:
            lo_s, hi_s = -half, half - 1
        sym_ub = None
        if a.sym_ub and bv is not None and a.lo_u >= bv:
            p, s, o = a.sym_ub
            sym_ub = (p, s, o - bv)
        return _norm(w, lo_u, hi_u, lo_s, hi_s, r, m, sym_ub=sym_ub)

    if op is BinOp.MUL:
        cands_u = [a.lo_u * b.lo_u, a.lo_u * b.hi_u, a.hi_u * b.lo_u, a.hi_u * b.hi_u]
        if max(cands_u) <= mask(w):
            lo_u, hi_u = min(cands_u), max(cands_u)
        else:
            lo_u, hi_u = 0, mask(w)
        cands_s = [a.lo_s * b.lo_s, a.lo_s * b.hi_s, a.hi_s * b.lo_s, a.hi_s * b.hi_s]
        half = 1 << (w - 1)
        if -half <= min(cands_s) and max(cands_s) < half:
            lo_s, hi_s = min(cands_s), max(cands_s)
        else:
            lo_s, hi_s = -half, half - 1
        # Granger: x*y = r1*r2 (mod gcd(m1*m2, m1*r2, m2*r1)); gcd(0, x) = x
        # makes the constant cases fall out.
        m = math.gcd(math.gcd(a.m * b.m, a.m * b.r), b.m * a.r)
        if m == 0:
            m = 1
        r = (a.r * b.r) % m
        sym_ub = None
        if a.sym_ub and bv is not None and bv > 0:
            p, s, o = a.sym_ub
            sym_ub = (p, s * bv, o * bv)
        return _norm(w, lo_u, hi_u, lo_s, hi_s, r, m, sym_ub=sym_ub)

    if op is BinOp.SHL:
        if bv is not None:
            c = min(bv, w)
            return transfer_binop(BinOp.MUL, a, NumAbstract.const(w, (1 << c) & mask(w)))
        k = min(b.lo_u, CONG_MOD_CAP.bit_length() - 1, w)
        return _from_low_bits(w, k, 0)

    if op is BinOp.SHR:
        if bv is not None:
            if bv >= w:
                return NumAbstract.const(w, 0)
            r, m = (a.r >> bv, a.m >> bv) if a.m and a.m % (1 << bv) == 0 else (0, 1)
            if a.m == 0:
                r, m = a.r >> bv, 0
            return _norm(w, a.lo_u >> bv, a.hi_u >> bv, 0, mask(w), r, m)
        return _norm(w, 0, a.hi_u, 0, mask(w), 0, 1)

    if op is BinOp.SAR:
        if bv is not None:
            if bv >= w:
                lo, hi = (0, 0) if a.lo_s >= 0 else ((-1, 0) if a.hi_s >= 0 else (-1, -1))
                return _norm(w, 0, mask(w), lo, hi, 0, 1)
            t = NumAbstract.top(w)
            return _norm(w, t.lo_u, t.hi_u, a.lo_s >> bv, a.hi_s >> bv, 0, 1)
        return NumAbstract.top(w)

    if op in (BinOp.AND, BinOp.OR, BinOp.XOR):
        return _bitwise(op, a, b)

    if op is BinOp.UDIV and bv is not None and bv > 0:
        return _norm(w, a.lo_u // bv, a.hi_u // bv, 0, mask(w), 0, 1)

    if op is BinOp.UREM and bv is not None and bv > 0:
        if a.hi_u < bv:
            return a
        if a.m and a.m % bv == 0:
            return _norm(w, 0, min(mask(w), bv - 1), 0, mask(w), a.r % bv, 0 if bv == 1 else bv)
        return _norm(w, 0, min(a.hi_u, bv - 1), 0, mask(w), 0, 1)

    if op is BinOp.CONCAT:
        shift = 1 << b.width
        lo_u, hi_u = a.lo_u * shift + b.lo_u, a.hi_u * shift + b.hi_u
        ka, ra = _known_low_bits(a)
        kb, rb = _known_low_bits(b)
        if kb < b.width:
            k, bits = kb, rb
        else:
            k, bits = b.width + ka, (ra << b.width) | rb
        t = _from_low_bits(w_out, k, bits)
        return _norm(w_out, max(lo_u, t.lo_u), min(hi_u, t.hi_u), t.lo_s, t.hi_s, t.r, t.m)

    if op in (BinOp.EQ, BinOp.NEQ):
        equal_possible = not meet(a, b).bot
        both_const = av is not None and bv is not None
        if not equal_possible:
            truth = False
        elif both_const:
            truth = av == bv
        else:
            truth = None
        if op is BinOp.NEQ and truth is not None:
            truth = not truth
        return _cmp_result(truth)

    if op in (BinOp.ULT, BinOp.UGT, BinOp.SLT, BinOp.SGT):
        if op is BinOp.ULT:
            lo_a, hi_a, lo_b, hi_b = a.lo_u, a.hi_u, b.lo_u, b.hi_u
        elif op is BinOp.UGT:
            lo_a, hi_a, lo_b, hi_b = b.lo_u, b.hi_u, a.lo_u, a.hi_u
        elif op is BinOp.SLT:
            lo_a, hi_a, lo_b, hi_b = a.lo_s, a.hi_s, b.lo_s, b.hi_s
        else:
            lo_a, hi_a, lo_b, hi_b = b.lo_s, b.hi_s, a.lo_s, a.hi_s
        if hi_a < lo_b:
            return _cmp_result(True)
        if lo_a >= hi_b:
            return _cmp_result(False)
        return _cmp_result(None)

    return NumAbstract.top(w_out)


def transfer_unop(op: UnOp, a: NumAbstract, p1: int | None = None, p2: int | None = None) -> NumAbstract:
    w_out = unop_result_width(op, a.width, p1, p2)
    if a.bot:
        return NumAbstract.bottom(w_out)
    w = a.width
    av = a.const_value()
    if av is not None:
        return NumAbstract.const(w_out, apply_unop(op, av, w, p1, p2))

    if op is UnOp.NOT:
        m = a.m
        r = (~a.r) % m if m > 0 else 0
        return _norm(w, mask(w) - a.hi_u, mask(w) - a.lo_u, -a.hi_s - 1, -a.lo_s - 1, r, max(m, 1))

    if op is UnOp.NEG:
        m = a.m
        r = (-a.r) % m if m > 0 else 0
        if a.lo_u > 0:
            lo_u, hi_u = (1 << w) - a.hi_u, (1 << w) - a.lo_u
        else:
            lo_u, hi_u = 0, mask(w)
        half = 1 << (w - 1)
        if a.lo_s > -half:
            lo_s, hi_s = -a.hi_s, -a.lo_s
        else:
            lo_s, hi_s = -half, half - 1
        return _norm(w, lo_u, hi_u, lo_s, hi_s, r, max(m, 1))

    if op is UnOp.UEXT:
        return _norm(w_out, a.lo_u, a.hi_u, 0, mask(w_out), a.r, a.m,
                     sym_ub=a.sym_ub, sym_id=a.sym_id)

    if op is UnOp.SEXT:
        if a.lo_s >= 0:
            return _norm(w_out, a.lo_u, a.hi_u, a.lo_s, a.hi_s, a.r, a.m)
        if a.hi_s < 0:
            off = 1 << w_out
            return _norm(w_out, a.lo_s + off, a.hi_s + off, a.lo_s, a.hi_s, 0, 1)
        t = NumAbstract.top(w_out)
        return _norm(w_out, t.lo_u, t.hi_u, a.lo_s, a.hi_s, 0, 1)

    if op is UnOp.EXTRACT:
        i, j = p1, p2
        t = a if i == 0 else transfer_binop(BinOp.SHR, a, NumAbstract.const(w, i))
        out_w = j - i + 1
        k, bits = _known_low_bits(t)
        k = min(k, out_w)
        if t.hi_u < (1 << out_w):
            return _from_low_bits(out_w, k, bits, t.lo_u, t.hi_u)
        return _from_low_bits(out_w, k, bits)

    raise AssertionError(op)


# ---------------------------------------------------------------------------
# Numeric store


@dataclass(frozen=True)
class NumStore:
    """Registers plus discovered fixed-address cells, and parameter values."""

    addr_width: int
    regs: dict[str, NumAbstract] = field(default_factory=dict)
    cells: dict[tuple[int, int], NumAbstract] = field(default_factory=dict)
    params: dict[str, NumAbstract] = field(default_factory=dict)
    param_cells: dict[tuple[int, int], str] = field(default_factory=dict)

    def reg(self, name: str) -> NumAbstract:
        w = ir.reg_width(name, self.addr_width)
        return self.regs.get(name, NumAbstract.top(w))

    def with_reg(self, name: str, v: NumAbstract) -> "NumStore":
        regs = dict(self.regs)
        regs[name] = v
        return replace(self, regs=regs)

    def cell(self, addr: int, size: int) -> NumAbstract:
        if (addr, size) in self.param_cells:
            name = self.param_cells[(addr, size)]
            return replace(self.params[name], sym_id=name)
        return self.cells.get((addr, size), NumAbstract.top(8 * size))

    def with_cell(self, addr: int, size: int, v: NumAbstract) -> "NumStore":
        cells = dict(self.cells)
        cells[(addr, size)] = v
        return replace(self, cells=cells)


def store_join(a: NumStore, b: NumStore) -> NumStore:
    regs = {}
    for name in set(a.regs) & set(b.regs):
        regs[name] = join(a.regs[name], b.regs[name])
    cells = {}
    for key in set(a.cells) & set(b.cells):
        cells[key] = join(a.cells[key], b.cells[key])
    return replace(a, regs=regs, cells=cells)


def store_widen(a: NumStore, b: NumStore, thresholds: tuple[int, ...]) -> NumStore:
    regs = {}
    for name in set(a.regs) & set(b.regs):
        regs[name] = widen(a.regs[name], b.regs[name], thresholds)
    cells = {}
    for key in set(a.cells) & set(b.cells):
        cells[key] = widen(a.cells[key], b.cells[key], thresholds)
    return replace(a, regs=regs, cells=cells)


def store_leq(a: NumStore, b: NumStore) -> bool:
    for name, v in b.regs.items():
        if not is_leq(a.regs.get(name, NumAbstract.top(v.width)), v):
            return False
    for key, v in b.cells.items():
        if not is_leq(a.cells.get(key, NumAbstract.top(v.width)), v):
            return False
    return True


def _explode(store: NumStore, key: tuple[int, int]) -> NumStore:
    """Split a tracked cell into byte cells (stratified fallback)."""
    addr, size = key
    v = store.cells[key]
    cells = dict(store.cells)
    del cells[key]
    cv = v.const_value()
    for k in range(size):
        if cv is not None:
            cells[(addr + k, 1)] = NumAbstract.const(8, (cv >> (8 * k)) & 0xFF)
        else:
            cells[(addr + k, 1)] = NumAbstract.top(8)
    return replace(store, cells=cells)


def _overlapping(store: NumStore, lo: int, hi: int) -> list[tuple[int, int]]:
    return [(a, s) for (a, s) in store.cells if a <= hi and lo <= a + s - 1]


def store_to(store: NumStore, addr: NumAbstract, size: int, val: NumAbstract,
             writable_ranges, strong_ok: bool = True) -> tuple[NumStore, str]:
    """Write through an abstract address.

    Strong update when the address is a singleton inside the tracked
    writable ranges; weak update (join into possibly-affected cells) for
    small finite address sets; otherwise all cells that may be touched
    are dropped to top.  Returns the new store and one of
    "strong" | "weak" | "outside".
    """
    def in_writable(a: int) -> bool:
        return any(lo <= a and a + size - 1 <= hi for lo, hi in writable_ranges)

    c = addr.const_value()
    if c is not None and in_writable(c) and strong_ok:
        for key in _overlapping(store, c, c + size - 1):
            if key != (c, size):
                store = _explode(store, key)
        for key in _overlapping(store, c, c + size - 1):
            if key != (c, size):
                cells = dict(store.cells)
                del cells[key]
                store = replace(store, cells=cells)
        if (c, size) in store.param_cells:
            return store, "outside"
        return store.with_cell(c, size, val), "strong"

    addrs = addr.enumerate(ENUM_CAP)
    if addrs is not None and addrs and all(in_writable(a) for a in addrs):
        for a in addrs:
            for key in _overlapping(store, a, a + size - 1):
                if key == (a, size):
                    store = store.with_cell(a, size, join(store.cells[key], val))
                else:
                    cells = dict(store.cells)
                    del cells[key]
                    store = replace(store, cells=cells)
        return store, "weak"

    # Imprecise address: every cell it may reach loses its value.
    lo = addr.lo_u
    hi = min(addr.hi_u + size - 1, mask(store.addr_width))
    cells = {k: v for k, v in store.cells.items() if not (k[0] <= hi and lo <= k[0] + k[1] - 1)}
    new = replace(store, cells=cells)
    possibly_in = any(addr.lo_u <= rhi and rlo <= addr.hi_u for rlo, rhi in writable_ranges)
    return new, ("weak" if possibly_in else "outside")


def transfer_expr(e: ir.Expr, store: NumStore, rofetch=None) -> NumAbstract:
    """Sound abstract evaluation of an expression over the store.

    rofetch(addr, size) -> int | None reads the read-only program image.
    """
    if isinstance(e, ir.Const):
        return NumAbstract.const(e.w, e.value)
    if isinstance(e, ir.Reg):
        return store.reg(e.name)
    if isinstance(e, ir.Load):
        return load_value(transfer_expr(e.addr, store, rofetch), e.size, store, rofetch)
    if isinstance(e, ir.Un):
        return transfer_unop(e.op, transfer_expr(e.a, store, rofetch), e.p1, e.p2)
    if isinstance(e, ir.Bin):
        return transfer_binop(e.op, transfer_expr(e.a, store, rofetch),
                              transfer_expr(e.b, store, rofetch))
    raise AssertionError(e)


def load_value(addr: NumAbstract, size: int, store: NumStore, rofetch=None) -> NumAbstract:
    w = 8 * size
    c = addr.const_value()
    if c is not None:
        if (c, size) in store.cells or (c, size) in store.param_cells:
            return store.cell(c, size)
    addrs = addr.enumerate(16)
    if addrs:
        out = NumAbstract.bottom(w)
        for a in addrs:
            if (a, size) in store.cells or (a, size) in store.param_cells:
                out = join(out, store.cell(a, size))
                continue
            v = rofetch(a, size) if rofetch else None
            if v is None:
                return NumAbstract.top(w)
            out = join(out, NumAbstract.const(w, v))
        return out
    return NumAbstract.top(w)


# ---------------------------------------------------------------------------
# Branch refinement


_NEGATE = {BinOp.EQ: BinOp.NEQ, BinOp.NEQ: BinOp.EQ}
_FLIP = {BinOp.ULT: BinOp.UGT, BinOp.UGT: BinOp.ULT, BinOp.SLT: BinOp.SGT, BinOp.SGT: BinOp.SLT}


def assume(cond: ir.Expr, store: NumStore, rofetch=None, value: bool = True) -> NumStore | None:
    """Refine the store with `cond == value`; None when unreachable."""
    cv = transfer_expr(cond, store, rofetch)
    if cv.bot or (cv.is_const() and bool(cv.const_value()) != value):
        return None

    if isinstance(cond, ir.Un) and cond.op is UnOp.NOT:
        return assume(cond.a, store, rofetch, not value)

    if isinstance(cond, ir.Reg) and cond.width == 1:
        return store.with_reg(cond.name, NumAbstract.const(1, int(value)))

    if not isinstance(cond, ir.Bin) or cond.op not in (
            BinOp.EQ, BinOp.NEQ, BinOp.ULT, BinOp.UGT, BinOp.SLT, BinOp.SGT):
        return store

    op = cond.op
    if not value:
        if op in _NEGATE:
            op = _NEGATE[op]
        else:
            # not (a < b)  ==  b < a or b == a; refine with the non-strict dual.
            return _refine_cmp(cond.b, cond.a, op, store, rofetch, strict=False)
    if op is BinOp.NEQ:
        return _refine_neq(cond.a, cond.b, store, rofetch)
    if op is BinOp.EQ:
        return _refine_eq(cond.a, cond.b, store, rofetch)
    return _refine_cmp(cond.a, cond.b, op, store, rofetch, strict=True)


def _operand_target(e: ir.Expr) -> tuple[str, ir.Expr | None] | None:
    """(register, mask-expr) for refinable operand shapes."""
    if isinstance(e, ir.Reg):
        return e.name, None
    if isinstance(e, ir.Bin) and e.op is BinOp.AND and isinstance(e.a, ir.Reg) and isinstance(e.b, ir.Const):
        return e.a.name, e.b
    return None


def _refine_with(store: NumStore, name: str, refined: NumAbstract) -> NumStore | None:
    v = meet(store.reg(name), refined)
    if v.bot:
        return None
    return store.with_reg(name, v)


def _refine_eq(a: ir.Expr, b: ir.Expr, store: NumStore, rofetch) -> NumStore | None:
    va = transfer_expr(a, store, rofetch)
    vb = transfer_expr(b, store, rofetch)
    if meet(va, vb).bot:
        return None
    for (e, other) in ((a, vb), (b, va)):
        t = _operand_target(e)
        if t is None:
            continue
        name, mask_e = t
        if mask_e is None:
            store2 = _refine_with(store, name, other)
            if store2 is None:
                return None
            store = store2
        else:
            # (reg & (2^k - 1)) == c pins the low bits of reg.
            mv = mask_e.value
            if mv & (mv + 1) == 0 and mv > 0 and other.is_const():
                k = mv.bit_length()
                c = other.const_value() & mv
                w = ir.reg_width(name, store.addr_width)
                store2 = _refine_with(store, name, _from_low_bits(w, k, c))
                if store2 is None:
                    return None
                store = store2
    return store


def _refine_neq(a: ir.Expr, b: ir.Expr, store: NumStore, rofetch) -> NumStore | None:
    va = transfer_expr(a, store, rofetch)
    vb = transfer_expr(b, store, rofetch)
    if va.is_const() and vb.is_const() and va.const_value() == vb.const_value():
        return None
    for (e, own, other) in ((a, va, vb), (b, vb, va)):
        t = _operand_target(e)
        if t is None or t[1] is not None or not other.is_const():
            continue
        name = t[0]
        c = other.const_value()
        v = own
        if v.lo_u == c:
            v = _norm(v.width, v.lo_u + 1, v.hi_u, v.lo_s, v.hi_s, v.r, v.m,
                      sym_ub=v.sym_ub, sym_id=v.sym_id)
        if v.hi_u == c:
            v = _norm(v.width, v.lo_u, v.hi_u - 1, v.lo_s, v.hi_s, v.r, v.m,
                      sym_ub=v.sym_ub, sym_id=v.sym_id)
        if v.bot:
            return None
        store = store.with_reg(name, v)
    return store


def _refine_cmp(a: ir.Expr, b: ir.Expr, op: BinOp, store: NumStore, rofetch,
                strict: bool) -> NumStore | None:
    # Normalize to a "<" b (unsigned or signed); non-strict when `strict` is False.
    if op in (BinOp.UGT, BinOp.SGT):
        a, b = b, a
        op = _FLIP[op]
    unsigned = op is BinOp.ULT
    va = transfer_expr(a, store, rofetch)
    vb = transfer_expr(b, store, rofetch)
    d = 1 if strict else 0
    w = va.width
    ta = _operand_target(a)
    if ta and ta[1] is None:
        if unsigned:
            refined = _norm(w, 0, vb.hi_u - d, NumAbstract.top(w).lo_s, NumAbstract.top(w).hi_s, 0, 1)
        else:
            t = NumAbstract.top(w)
            refined = _norm(w, t.lo_u, t.hi_u, t.lo_s, vb.hi_s - d, 0, 1)
        if unsigned:
            if vb.sym_id is not None:
                refined = replace(refined, sym_ub=(vb.sym_id, 1, -d))
            elif vb.sym_ub is not None:
                p, s, o = vb.sym_ub
                refined = replace(refined, sym_ub=(p, s, o - d))
        s2 = _refine_with(store, ta[0], refined)
        if s2 is None:
            return None
        store = s2
    tb = _operand_target(b)
    if tb and tb[1] is None:
        if unsigned:
            refined = _norm(w, va.lo_u + d, mask(w), NumAbstract.top(w).lo_s, NumAbstract.top(w).hi_s, 0, 1)
        else:
            t = NumAbstract.top(w)
            refined = _norm(w, t.lo_u, t.hi_u, va.lo_s + d, t.hi_s, 0, 1)
        s2 = _refine_with(store, tb[0], refined)
        if s2 is None:
            return None
        store = s2
    return store
