"""Unsigned 64-bit fixed-point prices.

Valuations and limit prices are stored as integers ``raw`` with ``RADIX``
fractional bits, so ``raw / 2**RADIX`` is the real value.  All rounding is
toward zero, and results that do not fit in 64 bits raise instead of wrapping.
Hot loops in the solver work on the raw integers directly; :class:`Price` is
the value type used at module boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import AmountOverflow, FixedPointOverflow

RADIX = 32
ONE = 1 << RADIX
MAX_RAW = (1 << 64) - 1

# offer keys carry 24 integer and 24 fractional bits of the limit price
KEY_RADIX = 24
KEY_SHIFT = RADIX - KEY_RADIX
KEY_PRICE_BITS = 48
MAX_KEY_PRICE = (1 << KEY_PRICE_BITS) - 1

# valuations are clamped to the exchange-rate range that offer keys can express
MIN_PRICE_RAW = 1 << KEY_SHIFT  # 2**-24
MAX_PRICE_RAW = 1 << (RADIX + KEY_RADIX)  # 2**24

MAX_AMOUNT = (1 << 64) - 1


def _check(raw: int) -> int:
    if raw < 0 or raw > MAX_RAW:
        raise FixedPointOverflow(f"fixed-point value {raw} outside unsigned 64-bit range")
    return raw


def div_trunc(num: int, den: int) -> int:
    """Integer division rounding toward zero (Python's ``//`` floors)."""
    q = abs(num) // abs(den)
    return q if (num >= 0) == (den >= 0) else -q


def ceil_div(num: int, den: int) -> int:
    return -((-num) // den)


def check_amount(units: int) -> int:
    if units < 0 or units > MAX_AMOUNT:
        raise AmountOverflow(f"amount {units} outside unsigned 64-bit range")
    return units


@dataclass(frozen=True, order=True)
class Price:
    raw: int

    def __post_init__(self) -> None:
        _check(self.raw)

    @classmethod
    def from_fraction(cls, value: Fraction | int) -> Price:
        value = Fraction(value)
        return cls(_check(value.numerator * ONE // value.denominator))

    @classmethod
    def from_float(cls, value: float) -> Price:
        return cls.from_fraction(Fraction(value))

    @classmethod
    def from_ratio(cls, num: int, den: int) -> Price:
        return cls(_check((num << RADIX) // den))

    def to_fraction(self) -> Fraction:
        return Fraction(self.raw, ONE)

    def __float__(self) -> float:
        return self.raw / ONE

    def __mul__(self, other: Price) -> Price:
        return fp_mul(self, other)

    def __truediv__(self, other: Price) -> Price:
        return fp_div(self, other)

    def at_key_precision(self) -> Price:
        """Truncate to the 24 fractional bits an offer key can carry."""
        return Price((self.raw >> KEY_SHIFT) << KEY_SHIFT)

    @property
    def key_representable(self) -> bool:
        return self.raw & ((1 << KEY_SHIFT) - 1) == 0 and 0 < self.raw >> KEY_SHIFT <= MAX_KEY_PRICE

    def __repr__(self) -> str:
        return f"Price({self.raw / ONE:.9g})"


def fp_mul(a: Price, b: Price) -> Price:
    return Price(_check((a.raw * b.raw) >> RADIX))


def fp_div(a: Price, b: Price) -> Price:
    if b.raw == 0:
        raise ZeroDivisionError("fixed-point division by zero")
    return Price(_check((a.raw << RADIX) // b.raw))


def fp_add(a: Price, b: Price) -> Price:
    return Price(_check(a.raw + b.raw))


def fp_sub(a: Price, b: Price) -> Price:
    return Price(_check(a.raw - b.raw))


def dyadic(log2_inverse: int | None) -> Fraction:
    """``2**-k`` as an exact fraction; ``None`` stands for zero."""
    if log2_inverse is None:
        return Fraction(0)
    return Fraction(1, 1 << log2_inverse)
