"""Supply curves and smoothed demand queries.

For a pair ``(A, B)`` at rate ``alpha = p_A / p_B`` an offer with limit ``mp``
sells its whole endowment when ``mp < (1 - mu) alpha``, nothing when
``mp > alpha``, and the fraction ``(alpha - mp) / (mu alpha)`` in between.
The fraction is continuous, so whether band endpoints count as inside or
outside does not change the result.

With ``mu = 2**-k`` and prices held as raw integers, the value sold to the
auctioneer, ``p_A`` times the units sold, is an exact integer at scale
``2**-64``::

    V = p_A * E_full * 2**32 + 2**k * (p_A * E_band * 2**32 - p_B * PE_band)

where ``E_full`` is the endowment fully executed, ``E_band`` the endowment in
the band and ``PE_band`` the sum of ``mp_raw * E`` over the band.  Prefix sums
over distinct limit prices make each term two binary searches away.
All demand values returned here are in that ``2**-64`` value scale.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

from .fixedpoint import RADIX, ceil_div
from .orderbook import OrderbookSet, Pair, dec_amount
from .model import split_key


@dataclass(frozen=True)
class SupplyCurve:
    """Prefix sums per distinct limit price, ascending.

    ``cum_endow[i]`` and ``cum_price_endow[i]`` cover every offer priced at or
    below ``prices[i]``; ``cum_price_endow`` sums ``mp_raw * E``.
    """

    prices: tuple[int, ...]
    cum_endow: tuple[int, ...]
    cum_price_endow: tuple[int, ...]

    @classmethod
    def from_offers(cls, offers: Iterable[tuple[int, int]]) -> SupplyCurve:
        """Build from ``(limit_raw, endowment)`` pairs in any order."""
        return cls._from_sorted(sorted(offers))

    @classmethod
    def _from_sorted(cls, offers: Iterable[tuple[int, int]]) -> SupplyCurve:
        prices: list[int] = []
        ce: list[int] = []
        cpe: list[int] = []
        e = pe = 0
        for mp, endow in offers:
            e += endow
            pe += mp * endow
            if prices and prices[-1] == mp:
                ce[-1] = e
                cpe[-1] = pe
            else:
                prices.append(mp)
                ce.append(e)
                cpe.append(pe)
        return cls(tuple(prices), tuple(ce), tuple(cpe))

    def __len__(self) -> int:
        return len(self.prices)

    @property
    def total(self) -> int:
        return self.cum_endow[-1] if self.cum_endow else 0

    def _cum(self, idx: int) -> tuple[int, int]:
        if idx == 0:
            return 0, 0
        return self.cum_endow[idx - 1], self.cum_price_endow[idx - 1]

    def full_index(self, sell_raw: int, buy_raw: int, mu_log2: int) -> int:
        """Number of distinct prices strictly below ``(1 - mu) * rate``."""
        k = mu_log2
        threshold = ceil_div((sell_raw << RADIX) * ((1 << k) - 1), buy_raw << k)
        return bisect_left(self.prices, threshold)

    def end_index(self, sell_raw: int, buy_raw: int) -> int:
        """Number of distinct prices at or below ``rate``."""
        return bisect_right(self.prices, (sell_raw << RADIX) // buy_raw)

    def mandatory(self, sell_raw: int, buy_raw: int, mu_log2: int) -> int:
        """Units that must trade: endowment strictly below ``(1 - mu) * rate``."""
        return self._cum(self.full_index(sell_raw, buy_raw, mu_log2))[0]

    def eligible(self, sell_raw: int, buy_raw: int) -> int:
        """Units that may trade: endowment at or below ``rate``."""
        return self._cum(self.end_index(sell_raw, buy_raw))[0]


def pair_supply(curve: SupplyCurve, sell_raw: int, buy_raw: int, mu_log2: int) -> int:
    """Smoothed value sold on one pair, ``p_A * units`` at scale ``2**-64``."""
    prices = curve.prices
    if not prices:
        return 0
    k = mu_log2
    sell_shift = sell_raw << RADIX
    i_full = bisect_left(prices, ceil_div(sell_shift * ((1 << k) - 1), buy_raw << k))
    i_end = bisect_right(prices, sell_shift // buy_raw)
    ce = curve.cum_endow
    cpe = curve.cum_price_endow
    e_full = ce[i_full - 1] if i_full else 0
    value = sell_shift * e_full
    if i_end > i_full:
        pe_full = cpe[i_full - 1] if i_full else 0
        e_band = ce[i_end - 1] - e_full
        pe_band = cpe[i_end - 1] - pe_full
        value += (sell_shift * e_band - buy_raw * pe_band) << k
    return value


@dataclass(frozen=True)
class DemandVector:
    """Per-asset smoothed flows at scale ``2**-64``.

    ``sold[i]`` is the value of asset ``i`` offered to the auctioneer and
    ``bought[i]`` the value of asset ``i`` requested (before commission), so
    ``p_i * Z_i = bought[i] - sold[i]`` and the entries of :attr:`pz` sum to 0.
    """

    sold: tuple[int, ...]
    bought: tuple[int, ...]

    @property
    def pz(self) -> tuple[int, ...]:
        return tuple(b - s for s, b in zip(self.sold, self.bought))

    def __len__(self) -> int:
        return len(self.sold)


class SupplyCurves:
    """Immutable per-pair supply curves for one block's books."""

    def __init__(self, n_assets: int, curves: Mapping[Pair, SupplyCurve]) -> None:
        self.n_assets = n_assets
        self.curves = {p: c for p, c in curves.items() if len(c)}
        self._flat = [(a, b, c.prices, c.cum_endow, c.cum_price_endow) for (a, b), c in sorted(self.curves.items())]
        totals = [0] * n_assets
        for (a, _), c in self.curves.items():
            totals[a] += c.total
        self.totals = tuple(totals)

    @classmethod
    def from_books(cls, books: OrderbookSet) -> SupplyCurves:
        curves = {}
        for pair in books.pairs():
            curves[pair] = SupplyCurve._from_sorted(
                (split_key(k)[0], dec_amount(v)) for k, v in books.books[pair].items()
            )
        return cls(books.n_assets, curves)

    @classmethod
    def from_offers(cls, n_assets: int, offers: Iterable) -> SupplyCurves:
        groups: dict[Pair, list[tuple[int, int]]] = {}
        for o in offers:
            groups.setdefault(o.pair, []).append((o.limit_price.raw, o.endowment))
        return cls(n_assets, {p: SupplyCurve.from_offers(g) for p, g in groups.items()})

    def __getitem__(self, pair: Pair) -> SupplyCurve:
        return self.curves.get(pair, _EMPTY)

    def pairs(self) -> list[Pair]:
        return sorted(self.curves)

    def __bool__(self) -> bool:
        return bool(self.curves)

    def offered_value(self, prices: Sequence[int]) -> int:
        """Total value offered for sale, ``sum p_i * T_i`` at scale ``2**-64``."""
        return sum(p * t for p, t in zip(prices, self.totals)) << RADIX

    def demand_query(self, prices: Sequence[int], mu_log2: int) -> DemandVector:
        """Smoothed aggregate demand; exact integer arithmetic throughout."""
        n = self.n_assets
        sold = [0] * n
        bought = [0] * n
        k = mu_log2
        num = (1 << k) - 1
        for a, b, mps, ce, cpe in self._flat:
            pa = prices[a]
            pb = prices[b]
            sell_shift = pa << RADIX
            i_full = bisect_left(mps, -((-sell_shift * num) // (pb << k)))
            i_end = bisect_right(mps, sell_shift // pb, i_full)
            if i_end == 0:
                continue
            e_full = ce[i_full - 1] if i_full else 0
            value = sell_shift * e_full
            if i_end > i_full:
                pe_full = cpe[i_full - 1] if i_full else 0
                value += (sell_shift * (ce[i_end - 1] - e_full) - pb * (cpe[i_end - 1] - pe_full)) << k
            sold[a] += value
            bought[b] += value
        return DemandVector(tuple(sold), tuple(bought))


_EMPTY = SupplyCurve((), (), ())


def build_supply_curves(books: OrderbookSet) -> SupplyCurves:
    return SupplyCurves.from_books(books)


def demand_query(curves: SupplyCurves, prices: Sequence[int], mu_log2: int) -> DemandVector:
    return curves.demand_query(prices, mu_log2)
