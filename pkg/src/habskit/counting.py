"""Exact arithmetic for time budgets: rationals extended with both infinities.

Every duration, deadline and budget in the toolchain is a ``CountExpr``:
an exact rational (``fractions.Fraction``) or one of the two infinities.
``+inf`` models computations that never finish; ``-inf`` only ever arises
as the result of subtracting an unbounded delay from a finite deadline and
makes downstream positivity checks fail conservatively.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction


class IndeterminateForm(ArithmeticError):
    """Raised on inf - inf (same sign); signals internal misuse."""


_FINITE = 0
_POS_INF = 1
_NEG_INF = -1


@dataclass(frozen=True)
class CountExpr:
    kind: int
    value: Fraction = Fraction(0)

    # -- construction -------------------------------------------------

    @staticmethod
    def of(x: "CountExpr | Fraction | int | str") -> "CountExpr":
        if isinstance(x, CountExpr):
            return x
        if isinstance(x, str):
            return CountExpr.from_text(x)
        return CountExpr(_FINITE, Fraction(x))

    @staticmethod
    def from_text(text: str) -> "CountExpr":
        t = text.strip()
        if t == "inf":
            return POS_INF
        if t == "-inf":
            return NEG_INF
        return CountExpr(_FINITE, Fraction(t))

    # -- predicates ----------------------------------------------------

    @property
    def is_finite(self) -> bool:
        return self.kind == _FINITE

    @property
    def finite(self) -> Fraction:
        if not self.is_finite:
            raise ValueError(f"not a finite count: {self}")
        return self.value

    def __repr__(self) -> str:
        return self.to_text()

    def to_text(self) -> str:
        if self.kind == _POS_INF:
            return "inf"
        if self.kind == _NEG_INF:
            return "-inf"
        return str(self.value)


POS_INF = CountExpr(_POS_INF)
NEG_INF = CountExpr(_NEG_INF)
ZERO = CountExpr(_FINITE, Fraction(0))


def is_infty(a: CountExpr) -> bool:
    return a.kind == _POS_INF


def is_positive(a: CountExpr) -> bool:
    """True iff a >= 0 (zero counts as positive)."""
    if a.kind == _POS_INF:
        return True
    if a.kind == _NEG_INF:
        return False
    return a.value >= 0


def sub(a: CountExpr, b: CountExpr) -> CountExpr:
    a, b = CountExpr.of(a), CountExpr.of(b)
    if a.kind == _POS_INF:
        if b.kind == _POS_INF:
            raise IndeterminateForm("inf - inf")
        return POS_INF
    if a.kind == _NEG_INF:
        if b.kind == _NEG_INF:
            raise IndeterminateForm("-inf - -inf")
        return NEG_INF
    if b.kind == _POS_INF:
        return NEG_INF
    if b.kind == _NEG_INF:
        return POS_INF
    return CountExpr(_FINITE, a.value - b.value)


def add(a: CountExpr, b: CountExpr) -> CountExpr:
    a, b = CountExpr.of(a), CountExpr.of(b)
    if a.kind == _POS_INF or b.kind == _POS_INF:
        if a.kind == _NEG_INF or b.kind == _NEG_INF:
            raise IndeterminateForm("inf + -inf")
        return POS_INF
    if a.kind == _NEG_INF or b.kind == _NEG_INF:
        return NEG_INF
    return CountExpr(_FINITE, a.value + b.value)


def leq(a: CountExpr, b: CountExpr) -> bool:
    """Total order with -inf < every rational < inf."""
    a, b = CountExpr.of(a), CountExpr.of(b)
    if a.kind == _NEG_INF or b.kind == _POS_INF:
        return True
    if a.kind == _POS_INF:
        return b.kind == _POS_INF
    if b.kind == _NEG_INF:
        return False
    return a.value <= b.value


def minimum(a: CountExpr, b: CountExpr) -> CountExpr:
    return a if leq(a, b) else b


def maximum(a: CountExpr, b: CountExpr) -> CountExpr:
    return b if leq(a, b) else a


def clamp_nonneg(a: CountExpr) -> CountExpr:
    return maximum(CountExpr.of(a), ZERO)
