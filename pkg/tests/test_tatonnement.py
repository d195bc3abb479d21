from __future__ import annotations

import random
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from batchdex.clearing import feasibility_probe, solve_clearing
from batchdex.decomposition import bisect_pair
from batchdex.demand import DemandVector, SupplyCurves
from batchdex.fixedpoint import MAX_PRICE_RAW, MIN_PRICE_RAW, ONE, Price
from batchdex.model import ApproxParams, Offer, OfferId
from batchdex.tatonnement import (
    EWMA,
    PRIOR_BLOCK,
    SolverConfig,
    SolverState,
    heuristic,
    price_step,
    run,
    run_multi,
    solver_iteration,
    unrealized_utility_ratio,
)

from conftest import random_offers

PARAMS = ApproxParams(15, 10)
MU = 2.0**-10


def cfg(**kw) -> SolverConfig:
    kw.setdefault("timeout", None)
    kw.setdefault("max_iters", 10_000)
    kw.setdefault("params", PARAMS)
    return SolverConfig(**kw)


def symmetric_market(mass: int = 10_000) -> SupplyCurves:
    offers = []
    n = 0
    for limit_log2 in (-3, -1, 0, 1, 3):
        # reciprocal limits with equal mass on both sides
        for a, b, k in ((0, 1, limit_log2), (1, 0, -limit_log2)):
            raw = ONE << k if k >= 0 else ONE >> -k
            n += 1
            offers.append(Offer(a, b, mass, Price(raw), OfferId(n, 1)))
    return SupplyCurves.from_offers(2, offers)


def connected_instance(seed: int, n_assets: int = 3, count: int = 60) -> SupplyCurves:
    r = random.Random(seed)
    pairs = [(a, b) for a in range(n_assets) for b in range(n_assets) if a != b]
    return SupplyCurves.from_offers(n_assets, random_offers(r, n_assets, count, pairs=pairs))


def ratio_gap(p: tuple[int, ...], q: tuple[int, ...]) -> float:
    """Largest relative difference between pairwise ratios of two price vectors."""
    worst = 0.0
    for i in range(len(p)):
        for j in range(len(p)):
            if i != j:
                a, b = p[i] / p[j], q[i] / q[j]
                worst = max(worst, abs(a - b) / b)
    return worst


# --- price_step ----------------------------------------------------------------------


def test_zero_demand_leaves_prices():
    prices = [3 * ONE, ONE, ONE >> 2]
    assert price_step(prices, [0, 0, 0], 1 << 20, 13, [ONE] * 3, 1 << 70) == prices


def test_positive_excess_raises_only_that_price():
    prices = [ONE, ONE, ONE]
    out = price_step(prices, [1 << 70, 0, 0], 1 << 7, 13, [ONE] * 3, 1 << 80)
    assert out[0] > ONE and out[1:] == [ONE, ONE]


def test_hand_computed_step():
    # adj = delta * nu * z / (V * 2**13) = 2**7 * 2**32 * 2**70 / 2**93 = 2**16, a factor of 1 + 2**-16
    prices = [2 * ONE, ONE]
    out = price_step(prices, [1 << 70, -(1 << 70)], 1 << 7, 13, [ONE, ONE], 1 << 80)
    assert out == [(2 << 32) + (1 << 17), (1 << 32) - (1 << 16)]


def test_step_factor_is_clamped():
    out = price_step([ONE, ONE], [1 << 120, -(1 << 120)], 1 << 40, 0, [ONE, ONE], 1)
    assert out == [2 * ONE, ONE // 2]
    assert price_step([MIN_PRICE_RAW], [-(1 << 120)], 1 << 40, 0, [ONE], 1) == [MIN_PRICE_RAW]
    assert price_step([MAX_PRICE_RAW], [1 << 120], 1 << 40, 0, [ONE], 1) == [MAX_PRICE_RAW]


@given(
    st.lists(st.tuples(st.integers(MIN_PRICE_RAW, MAX_PRICE_RAW), st.integers(-(1 << 90), 1 << 90)), min_size=1, max_size=6),
    st.integers(1, 1 << 30),
    st.integers(0, 30),
    st.integers(1, 1 << 100),
)
def test_step_sign_matches_demand(entries, delta, step_log2, mean):
    prices = [p for p, _ in entries]
    pz = [z for _, z in entries]
    out = price_step(prices, pz, delta, step_log2, [ONE] * len(prices), mean)
    for p, z, q in zip(prices, pz, out):
        assert MIN_PRICE_RAW <= q <= MAX_PRICE_RAW
        if z == 0:
            assert q == p
        else:
            assert (q - p) * z >= 0


# --- heuristic -----------------------------------------------------------------------


def test_heuristic_empty_market_is_zero():
    curves = SupplyCurves(3, {})
    assert heuristic(curves.demand_query([ONE] * 3, 10)) == 0


def test_heuristic_local_minimum_at_clearing_price(rng):
    for _ in range(5):
        offers = random_offers(rng, 2, 80)
        curves = SupplyCurves.from_offers(2, offers)
        found = bisect_pair(curves, PARAMS)
        assert found is not None
        p0 = found[0]
        h = heuristic(curves.demand_query((p0, ONE), 10))
        for factor in (1 - 2**-8, 1 - 2**-6, 1 + 2**-8, 1 + 2**-6):
            assert h <= heuristic(curves.demand_query((int(p0 * factor), ONE), 10))


def test_heuristic_argmin_preserved_under_doubling(rng):
    offers = random_offers(rng, 2, 80)
    curves = SupplyCurves.from_offers(2, offers)
    grid = [int(ONE * 1.01**k) for k in range(-150, 151)]
    h1 = [heuristic(curves.demand_query((p, ONE), 10)) for p in grid]
    h2 = [heuristic(curves.demand_query((2 * p, 2 * ONE), 10)) for p in grid]
    assert h1.index(min(h1)) == h2.index(min(h2))
    assert h2 == [4 * h for h in h1]


# --- solver_iteration ----------------------------------------------------------------


def test_iteration_accepts_improving_step():
    curves = symmetric_market()
    c = cfg()
    state = SolverState([4 * ONE, ONE], 1 << 7, [ONE, ONE])
    before = heuristic(curves.demand_query(state.prices, 10))
    solver_iteration(state, curves, c)
    assert state.heuristic < before
    assert state.prices[0] < 4 * ONE
    assert state.delta > 1 << 7


def test_iteration_rejects_worsening_step():
    curves = symmetric_market()
    c = cfg(step_log2=0)
    # a huge step overshoots far past the balanced ratio
    state = SolverState([ONE + (ONE >> 6), ONE], 1 << 40, [ONE, ONE])
    state.demand = curves.demand_query(state.prices, 10)
    state.heuristic = heuristic(state.demand)
    h = state.heuristic
    prices = list(state.prices)
    solver_iteration(state, curves, c)
    assert state.prices == prices and state.heuristic == h
    assert state.delta == (1 << 40) >> 1


def test_symmetric_market_converges_to_unit_ratio():
    res = run(cfg(), symmetric_market(), [4 * ONE, ONE])
    assert res.converged and res.iterations <= 10_000
    assert abs(res.prices[0] / res.prices[1] - 1) <= MU


def test_three_asset_cycle_equal_prices():
    offers = []
    for i, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
        for j, lim in enumerate((0.5, 0.75, 0.9)):
            offers.append(Offer(a, b, 5000, Price(int(lim * 256) << 24), OfferId(10 * i + j + 1, 1)))
    curves = SupplyCurves.from_offers(3, offers)
    res = run(cfg(), curves, [ONE, 2 * ONE, 3 * ONE])
    assert res.converged
    assert ratio_gap(res.prices, (ONE, ONE, ONE)) <= MU


# --- run / run_multi -----------------------------------------------------------------


def test_empty_market_converges_immediately():
    res = run(cfg(), SupplyCurves(4, {}), [ONE, 2 * ONE, 3 * ONE, ONE])
    assert res.converged and res.iterations == 0
    assert res.prices == (ONE, 2 * ONE, 3 * ONE, ONE)


def test_converged_prices_are_certified():
    for seed in range(5):
        curves = connected_instance(seed)
        res = run(cfg(), curves)
        assert res.converged
        assert feasibility_probe(res.prices, curves, PARAMS)


def test_ewma_volume_strategy_converges():
    curves = connected_instance(11, 4, 120)
    res = run(cfg(volume_strategy=EWMA), curves)
    assert res.converged and feasibility_probe(res.prices, curves, PARAMS)


def test_prior_block_volume_strategy_converges():
    curves = connected_instance(11, 4, 120)
    res = run(cfg(volume_strategy=PRIOR_BLOCK, prior_volumes=(ONE, ONE >> 3, ONE >> 30, 2 * ONE)), curves)
    assert res.converged and feasibility_probe(res.prices, curves, PARAMS)


def test_iteration_cap_returns_best_visited():
    curves = connected_instance(3, 4, 120)
    res = run(cfg(max_iters=3, feasibility_period=1), curves, [ONE, 8 * ONE, ONE, ONE])
    assert not res.converged and res.iterations == 3
    assert all(p > 0 for p in res.prices)


def test_run_multi_single_config_equals_run():
    curves = connected_instance(5)
    c = cfg()
    assert run_multi([c], curves, deterministic=True).prices == run(c, curves).prices


def test_run_multi_absurd_config_loses():
    curves = connected_instance(6)
    sane = cfg()
    absurd = cfg(step_log2=62, max_iters=200)
    res = run_multi([absurd, sane], curves, deterministic=True)
    assert res.config_index == 1 and res.converged
    assert res.prices == run(sane, curves).prices
    raced = run_multi([absurd, replace(sane, timeout=5.0)], curves)
    assert raced.converged and raced.config_index == 1


def test_deterministic_mode_is_reproducible():
    curves = connected_instance(7, 4, 200)
    configs = [cfg(step_log2=s, max_iters=3000) for s in (10, 13, 16, 19)]
    a = run_multi(configs, curves, deterministic=True)
    b = run_multi(configs, curves, deterministic=True)
    assert a.prices == b.prices and a.config_index == b.config_index


def test_run_multi_needs_a_config():
    with pytest.raises(ValueError):
        run_multi([], SupplyCurves(2, {}))


def test_config_invariants():
    with pytest.raises(ValueError):
        SolverConfig(step_up=256)
    with pytest.raises(ValueError):
        SolverConfig(step_down=0)
    with pytest.raises(ValueError):
        SolverConfig(feasibility_period=0)


@given(st.integers(0, 10_000))
def test_rescaling_initial_prices(seed):
    curves = connected_instance(seed, 3, 40)
    base = run(cfg(), curves)
    doubled = run(cfg(), curves, [2 * ONE] * 3)
    if base.converged and doubled.converged:
        assert ratio_gap(base.prices, doubled.prices) < 2 * MU


# --- unrealized utility ----------------------------------------------------------------


def test_utility_ratio_zero_when_all_executed():
    offers = [Offer(0, 1, 100, Price(ONE >> 1), OfferId(1, 1)), Offer(1, 0, 100, Price(ONE >> 1), OfferId(2, 1))]
    curves = SupplyCurves.from_offers(2, offers)
    rep = unrealized_utility_ratio((ONE, ONE), curves, {(0, 1): 100, (1, 0): 100})
    assert rep.ratio == 0 and rep.realized > 0


def test_utility_ratio_infinite_when_nothing_executed():
    offers = [Offer(0, 1, 100, Price(ONE >> 1), OfferId(1, 1))]
    curves = SupplyCurves.from_offers(2, offers)
    rep = unrealized_utility_ratio((ONE, ONE), curves, {})
    assert rep.infinite and rep.ratio is None


def test_utility_ratio_of_solved_plans_is_small():
    for seed in range(5):
        curves = connected_instance(seed, 4, 300)
        res = run(cfg(), curves)
        plan = solve_clearing(res.prices, curves, PARAMS)
        rep = unrealized_utility_ratio(res.prices, curves, plan.amounts)
        assert rep.ratio is not None and rep.ratio < 0.05


def test_demand_vector_pz_sums_to_zero():
    curves = connected_instance(1, 4, 100)
    d = curves.demand_query([ONE, 2 * ONE, ONE >> 1, 3 * ONE], 10)
    assert isinstance(d, DemandVector) and sum(d.pz) == 0
