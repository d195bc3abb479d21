from __future__ import annotations

import random

import pytest

from batchdex.clearing import feasibility_probe, payout_deficits, solve_clearing
from batchdex.decomposition import MarketPartition, bisect_pair, compose_prices, solve_decomposed
from batchdex.demand import SupplyCurves
from batchdex.errors import PartitionViolation
from batchdex.fixedpoint import ONE, Price
from batchdex.model import ApproxParams, AssetRegistry, Offer, OfferId
from batchdex.oracle import brute_equilibrium, decomposition_check
from batchdex.tatonnement import SolverConfig, run_multi

from conftest import key_price

PARAMS = ApproxParams(15, 10)
CONFIGS = [SolverConfig(params=PARAMS, timeout=None, max_iters=5000)]


def star_offers(rng: random.Random, n_core: int, n_stocks: int, per_pair: int) -> tuple[list[Offer], dict[int, int]]:
    n = n_core + n_stocks
    vals = [rng.uniform(0.3, 3.0) for _ in range(n)]
    anchors = {n_core + k: k % n_core for k in range(n_stocks)}
    pairs = [(a, b) for a in range(n_core) for b in range(n_core) if a != b]
    for s, a in anchors.items():
        pairs += [(s, a), (a, s)]
    offers = []
    i = 0
    for a, b in pairs:
        for _ in range(per_pair):
            rate = vals[a] / vals[b] * rng.uniform(0.8, 1.25)
            offers.append(Offer(a, b, rng.randint(1, 10**6), Price(key_price(rate)), OfferId(i, 1)))
            i += 1
    return offers, anchors


def test_partition_validation():
    with pytest.raises(PartitionViolation):
        MarketPartition(4, {2: 3, 3: 0})  # anchor is itself a stock
    with pytest.raises(PartitionViolation):
        MarketPartition(4, {2: 2})
    p = MarketPartition(4, {2: 0, 3: 1})
    assert p.core == [0, 1] and p.stocks == [2, 3]
    p.check_pair((2, 0))
    p.check_pair((0, 1))
    with pytest.raises(PartitionViolation):
        p.check_pair((2, 1))
    with pytest.raises(PartitionViolation):
        p.check_pair((2, 3))


def test_partition_from_registry():
    reg = AssetRegistry.parse("USD\nEUR\nACME anchor=USD\n")
    assert MarketPartition.from_registry(reg) == MarketPartition(3, {2: 0})


def test_cross_partition_offer_rejected():
    offers = [Offer(2, 1, 10, Price(ONE), OfferId(1, 1))]
    with pytest.raises(PartitionViolation):
        solve_decomposed(MarketPartition(3, {2: 0}), SupplyCurves.from_offers(3, offers), CONFIGS, PARAMS)


def test_degenerate_partition_equals_plain_solve():
    rng = random.Random(3)
    offers, _ = star_offers(rng, 4, 0, 30)
    curves = SupplyCurves.from_offers(4, offers)
    dec = solve_decomposed(MarketPartition(4, {}), curves, CONFIGS, PARAMS)
    plain = run_multi(CONFIGS, curves, deterministic=True)
    assert dec.plan.prices == plain.prices
    nonzero = lambda amounts: {p: x for p, x in amounts.items() if x}
    assert nonzero(dec.plan.amounts) == nonzero(solve_clearing(plain.prices, curves, PARAMS).amounts)


def test_large_star_market_passes_probe():
    rng = random.Random(7)
    offers, anchors = star_offers(rng, 4, 60, 40)
    curves = SupplyCurves.from_offers(64, offers)
    dec = solve_decomposed(MarketPartition(64, anchors), curves, CONFIGS, PARAMS)
    assert dec.converged and dec.plan.method == "decomposed"
    assert feasibility_probe(dec.plan.prices, curves, PARAMS)
    assert all(d <= 0 for d in payout_deficits(dec.plan.amounts, dec.plan.prices, PARAMS))
    # no trade crosses the partition
    part = MarketPartition(64, anchors)
    for pair, x in dec.plan.amounts.items():
        if x:
            part.check_pair(pair)


def test_bisect_pair_matches_oracle_interval():
    rng = random.Random(11)
    for _ in range(10):
        offers, _ = star_offers(rng, 2, 0, 20)
        found = bisect_pair(SupplyCurves.from_offers(2, offers), PARAMS)
        eq = brute_equilibrium(offers, 2, PARAMS)
        assert found is not None
        assert eq.distance(found) <= 2.0**-10


def test_rescaled_stock_prices_give_same_rates():
    core = [0, 1]
    base = compose_prices(4, core, [3 * ONE, ONE], {2: (5 * ONE, ONE), 3: (ONE, 4 * ONE)}, {2: 0, 3: 1})
    scaled = compose_prices(4, core, [3 * ONE, ONE], {2: (10 * ONE, 2 * ONE), 3: (ONE // 2, 2 * ONE)}, {2: 0, 3: 1})
    assert base == scaled == (3 * ONE, ONE, 15 * ONE, ONE // 4)


def test_decomposition_check_oracle():
    rng = random.Random(5)
    offers, anchors = star_offers(rng, 2, 2, 15)
    curves = SupplyCurves.from_offers(4, offers)
    dec = solve_decomposed(MarketPartition(4, anchors), curves, CONFIGS, PARAMS)
    core_prices = list(dec.plan.prices)
    assert decomposition_check(offers, 4, anchors, PARAMS, core_prices)
    assert decomposition_check(offers, 4, anchors, PARAMS, core_prices, stock_scale={2: 7, 3: 1 << 10})
    # zero stocks: the check reduces to probing the core solution itself
    core_offers = [o for o in offers if o.sell < 2 and o.buy < 2]
    assert decomposition_check(core_offers, 2, {}, PARAMS, core_prices[:2]) == feasibility_probe(
        core_prices[:2], SupplyCurves.from_offers(2, core_offers), PARAMS
    )
