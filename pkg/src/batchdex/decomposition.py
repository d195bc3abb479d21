"""Solving large markets by splitting off stocks.

Assets are split into a core of pricing assets and stocks, each stock trading
only against its anchor pricing asset.  The core is solved as a normal market
and each stock as a two-asset market against its anchor.  A stock's price is
then placed on the core's scale by ``p_s = (r_s / r_a) * p_a`` where ``r_s``,
``r_a`` are the stock market's own prices and ``p_a`` the anchor's core price.
Only the ratio ``r_s / r_a`` matters, so the stock solve may use any scale.
Because the sub-markets share at most one asset each, a valid clearing of
every piece composes into a valid clearing of the whole market.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from .clearing import ClearingPlan, feasibility_probe, solve_clearing
from .demand import SupplyCurves
from .errors import PartitionViolation
from .fixedpoint import MAX_PRICE_RAW, MIN_PRICE_RAW, ONE
from .model import ApproxParams, AssetRegistry
from .orderbook import Pair
from .tatonnement import SolverConfig, SolverResult, run, run_multi


@dataclass(frozen=True)
class MarketPartition:
    n_assets: int
    anchors: dict[int, int]  # stock -> pricing asset

    def __post_init__(self) -> None:
        for s, a in self.anchors.items():
            if a in self.anchors:
                raise PartitionViolation(f"anchor {a} of stock {s} is itself a stock")
            if not (0 <= s < self.n_assets and 0 <= a < self.n_assets) or s == a:
                raise PartitionViolation(f"bad anchor {s} -> {a}")

    @classmethod
    def from_registry(cls, registry: AssetRegistry) -> MarketPartition:
        return cls(len(registry), dict(registry.anchors))

    @property
    def core(self) -> list[int]:
        return [a for a in range(self.n_assets) if a not in self.anchors]

    @property
    def stocks(self) -> list[int]:
        return sorted(self.anchors)

    def check_pair(self, pair: Pair) -> None:
        a, b = pair
        sa, sb = a in self.anchors, b in self.anchors
        if (sa or sb) and not (self.anchors.get(a) == b or self.anchors.get(b) == a):
            raise PartitionViolation(f"pair {pair} crosses the partition")


def _sub_curves(curves: SupplyCurves, assets: Sequence[int]) -> SupplyCurves:
    pos = {a: i for i, a in enumerate(assets)}
    sub = {(pos[a], pos[b]): curves[(a, b)] for (a, b) in curves.pairs() if a in pos and b in pos}
    return SupplyCurves(len(assets), sub)


def bisect_pair(curves: SupplyCurves, params: ApproxParams) -> tuple[int, int] | None:
    """Two-asset fast path: price of asset 0 where smoothed net demand changes sign.

    Asset 1 is held at 1.0.  Net demand for asset 0 falls as its price rises
    (gross substitutes), so a binary search over raw prices finds the
    crossing.  Returns ``None`` if the LP does not certify the result.
    """
    lo, hi = MIN_PRICE_RAW, MAX_PRICE_RAW
    if not curves:
        return ONE, ONE

    def pz0(p: int) -> int:
        return curves.demand_query((p, ONE), params.mu_log2).pz[0]

    while lo < hi:
        mid = (lo + hi) // 2
        if pz0(mid) <= 0:
            hi = mid
        else:
            lo = mid + 1
    for cand in (lo, lo - 1, lo + 1):
        if MIN_PRICE_RAW <= cand <= MAX_PRICE_RAW and feasibility_probe((cand, ONE), curves, params):
            return cand, ONE
    return None


def compose_prices(n: int, core: Sequence[int], core_prices: Sequence[int], stock_prices: Mapping[int, tuple[int, int]], anchors: Mapping[int, int]) -> tuple[int, ...]:
    """Place every stock on the core's price scale; ``stock_prices[s] = (r_s, r_anchor)``."""
    prices = [0] * n
    for i, a in enumerate(core):
        prices[a] = core_prices[i]
    for s, (rs, ra) in stock_prices.items():
        p = rs * prices[anchors[s]] // ra
        prices[s] = min(MAX_PRICE_RAW, max(MIN_PRICE_RAW, p))
    return tuple(prices)


@dataclass
class DecomposedResult:
    plan: ClearingPlan
    core_result: SolverResult
    stock_prices: dict[int, tuple[int, int]]
    converged: bool


def solve_decomposed(
    partition: MarketPartition,
    curves: SupplyCurves,
    configs: Sequence[SolverConfig],
    params: ApproxParams,
    initial: Sequence[int] | None = None,
    deterministic: bool = True,
) -> DecomposedResult:
    for pair in curves.pairs():
        partition.check_pair(pair)
    core = partition.core
    core_curves = _sub_curves(curves, core)
    init_core = [initial[a] for a in core] if initial is not None else None
    core_res = run_multi(configs, core_curves, init_core, deterministic=deterministic)
    converged = core_res.converged
    stock_prices: dict[int, tuple[int, int]] = {}
    for s in partition.stocks:
        a = partition.anchors[s]
        sub = _sub_curves(curves, [s, a])
        fast = bisect_pair(sub, params)
        if fast is None:
            res = run(configs[0], sub, None if initial is None else (initial[s], initial[a]))
            fast = res.prices
            converged &= res.converged
        stock_prices[s] = (fast[0], fast[1])
    prices = compose_prices(partition.n_assets, core, core_res.prices, stock_prices, partition.anchors)
    # amounts are solved piecewise at the composed prices
    amounts: dict[Pair, int] = {}
    lower_met = feasible = True
    lower_units: dict[Pair, int] = {}
    pieces = [core] + [[s, partition.anchors[s]] for s in partition.stocks]
    for assets in pieces:
        sub = _sub_curves(curves, assets)
        sub_plan = solve_clearing([prices[a] for a in assets], sub, params)
        for (i, j), x in sub_plan.amounts.items():
            amounts[(assets[i], assets[j])] = x
        for (i, j), low in sub_plan.lower_units.items():
            lower_units[(assets[i], assets[j])] = low
        lower_met &= sub_plan.lower_met
        feasible &= sub_plan.lp_feasible
    plan = ClearingPlan(prices, amounts, params.eps_log2, params.mu_log2, lower_met, feasible, "decomposed", lower_units)
    return DecomposedResult(plan, core_res, stock_prices, converged and feasible)
