"""Domain vocabulary: assets, offers, offer keys and approximation parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

from .errors import InvalidOffer, PriceOutOfKeyRange
from .fixedpoint import (
    KEY_SHIFT,
    MAX_KEY_PRICE,
    Price,
    check_amount,
    dyadic,
)

KEY_LEN = 22
PRICE_PREFIX_LEN = 6
MAX_ASSETS = 1 << 16

AssetId = int


class OfferId(NamedTuple):
    account: int
    seq: int


@dataclass(frozen=True)
class Offer:
    """A limit sell order: sell ``endowment`` units of ``sell`` for ``buy``.

    ``limit_price`` is in units of the buy asset per unit of the sell asset and
    must be exactly representable at key precision, so that key order and
    price order agree.
    """

    sell: AssetId
    buy: AssetId
    endowment: int
    limit_price: Price
    owner: OfferId

    def __post_init__(self) -> None:
        if self.sell == self.buy:
            raise InvalidOffer("offer sells and buys the same asset")
        if not (0 <= self.sell < MAX_ASSETS and 0 <= self.buy < MAX_ASSETS):
            raise InvalidOffer("asset id out of range")
        if self.endowment <= 0:
            raise InvalidOffer("endowment must be positive")
        check_amount(self.endowment)
        if self.limit_price.raw <= 0:
            raise InvalidOffer("limit price must be positive")
        if not self.limit_price.key_representable:
            raise PriceOutOfKeyRange(
                f"limit price {self.limit_price!r} not representable in a 24.24 key prefix"
            )

    @property
    def pair(self) -> tuple[int, int]:
        return (self.sell, self.buy)

    @property
    def key(self) -> bytes:
        return offer_key(self)


def key_from_parts(limit_price_raw: int, account: int, seq: int) -> bytes:
    prefix = limit_price_raw >> KEY_SHIFT
    if prefix > MAX_KEY_PRICE or limit_price_raw & ((1 << KEY_SHIFT) - 1):
        raise PriceOutOfKeyRange(f"limit price raw {limit_price_raw} does not fit the key prefix")
    return prefix.to_bytes(6, "big") + account.to_bytes(8, "big") + seq.to_bytes(8, "big")


def offer_key(o: Offer) -> bytes:
    """22-byte trie key: big-endian 24.24 price, then account, then sequence."""
    return key_from_parts(o.limit_price.raw, o.owner.account, o.owner.seq)


def split_key(key: bytes) -> tuple[int, int, int]:
    """Inverse of :func:`key_from_parts`: ``(limit_price_raw, account, seq)``."""
    return (
        int.from_bytes(key[:6], "big") << KEY_SHIFT,
        int.from_bytes(key[6:14], "big"),
        int.from_bytes(key[14:22], "big"),
    )


@dataclass(frozen=True)
class ApproxParams:
    """Commission ``epsilon = 2**-eps_log2`` (``None`` means zero) and smoothing ``mu = 2**-mu_log2``."""

    eps_log2: int | None = 15
    mu_log2: int = 10

    def __post_init__(self) -> None:
        if self.eps_log2 is not None and self.eps_log2 < 1:
            raise ValueError("epsilon must be below 1")
        if self.mu_log2 < 1:
            raise ValueError("mu must be below 1")

    @property
    def epsilon(self) -> Fraction:
        return dyadic(self.eps_log2)

    @property
    def mu(self) -> Fraction:
        return dyadic(self.mu_log2)

    def payout(self, sold: int, sell_price_raw: int, buy_price_raw: int) -> int:
        """``floor(sold * rate * (1 - epsilon))`` with the rate taken as an exact ratio."""
        if self.eps_log2 is None:
            return sold * sell_price_raw // buy_price_raw
        k = self.eps_log2
        return sold * sell_price_raw * ((1 << k) - 1) // (buy_price_raw << k)


@dataclass
class AssetRegistry:
    """Static asset list fixed at genesis, optionally with stock anchors.

    Text format, one asset per line in index order::

        USD
        EUR
        ACME anchor=USD

    Blank lines and ``#`` comments are ignored.
    """

    symbols: list[str]
    anchors: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        return self.symbols.index(symbol)

    @classmethod
    def parse(cls, text: str) -> AssetRegistry:
        symbols: list[str] = []
        pending: list[tuple[int, str]] = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] in symbols:
                raise ValueError(f"duplicate asset symbol {parts[0]!r}")
            symbols.append(parts[0])
            for opt in parts[1:]:
                name, _, value = opt.partition("=")
                if name != "anchor" or not value:
                    raise ValueError(f"bad asset option {opt!r}")
                pending.append((len(symbols) - 1, value))
        if len(symbols) > MAX_ASSETS:
            raise ValueError("too many assets")
        anchors = {}
        for idx, anchor in pending:
            if anchor not in symbols:
                raise ValueError(f"unknown anchor asset {anchor!r}")
            anchors[idx] = symbols.index(anchor)
        return cls(symbols, anchors)

    @classmethod
    def load(cls, path: str | Path) -> AssetRegistry:
        return cls.parse(Path(path).read_text())

    def dump(self) -> str:
        lines = []
        for i, s in enumerate(self.symbols):
            if i in self.anchors:
                lines.append(f"{s} anchor={self.symbols[self.anchors[i]]}")
            else:
                lines.append(s)
        return "\n".join(lines) + "\n"

    @classmethod
    def numbered(cls, n: int) -> AssetRegistry:
        return cls([f"A{i}" for i in range(n)])
