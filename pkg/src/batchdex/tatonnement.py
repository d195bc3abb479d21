"""Iterative price search.

Each iteration proposes ``p_i <- p_i * (1 + delta * nu_i * p_i Z_i / V)`` where
``p_i Z_i`` is the smoothed net demand value of asset ``i``, ``V`` the mean
value offered per asset (which makes the rule invariant to rescaling all
prices) and ``nu_i`` a per-asset volume normalisation.  A candidate is kept
only if it lowers ``sum_i (p_i Z_i)**2``; accepted steps grow ``delta``,
rejected ones shrink it.  The clearing LP decides convergence: it is probed
when the smoothed flows already balance and every ``feasibility_period``
iterations.

All arithmetic is on raw integers.  With a fixed iteration cap and no wall
clock limit a run is bit-for-bit reproducible.
"""

from __future__ import annotations

import threading
import time
from bisect import bisect_left
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .clearing import feasibility_probe, solve_clearing
from .demand import DemandVector, SupplyCurves
from .fixedpoint import MAX_PRICE_RAW, MIN_PRICE_RAW, ONE, RADIX, div_trunc
from .model import ApproxParams
from .orderbook import Pair

UNIFORM = "uniform"
PRIOR_BLOCK = "prior-block"
EWMA = "ewma"

NU_FLOOR_LOG2 = 20
EWMA_SHIFT = 3  # weight 1/8
DELTA_INIT = 1 << 7
DELTA_MAX = 1 << 48


@dataclass(frozen=True)
class SolverConfig:
    """Control parameters for one solver instance.

    ``delta * 2**-step_log2`` is the real step size.  ``step_up`` and
    ``step_down`` are multipliers in 1/256 units.  ``timeout`` is in seconds;
    ``None`` disables the wall clock so only ``max_iters`` bounds the run.
    """

    step_log2: int = 13
    step_up: int = 358
    step_down: int = 128
    volume_strategy: str = UNIFORM
    max_iters: int = 5000
    timeout: float | None = 2.0
    feasibility_period: int = 100
    params: ApproxParams = field(default_factory=ApproxParams)
    prior_volumes: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not self.step_up > 256 > self.step_down > 0:
            raise ValueError("need step_up > 1 > step_down > 0")
        if self.feasibility_period < 1:
            raise ValueError("feasibility_period must be >= 1")
        if self.volume_strategy not in (UNIFORM, PRIOR_BLOCK, EWMA):
            raise ValueError(f"unknown volume strategy {self.volume_strategy!r}")


def default_configs(params: ApproxParams | None = None, **kw) -> list[SolverConfig]:
    """Four instances spread over step scales 2**-10 .. 2**-19."""
    params = params or ApproxParams()
    return [SolverConfig(step_log2=s, params=params, **kw) for s in (10, 13, 16, 19)]


@dataclass
class SolverState:
    prices: list[int]
    delta: int
    nu: list[int]
    iter: int = 0
    heuristic: int = 0
    demand: DemandVector | None = None
    weights: list[int] | None = None


@dataclass
class SolverResult:
    prices: tuple[int, ...]
    converged: bool
    iterations: int
    heuristic: int
    elapsed: float
    config_index: int = 0
    probes: int = 0


def heuristic(demand: DemandVector) -> int:
    """``sum_i (p_i Z_i)**2`` on the exact demand values."""
    return sum(v * v for v in demand.pz)


def price_step(
    prices: Sequence[int],
    pz: Sequence[int],
    delta: int,
    step_log2: int,
    nu: Sequence[int],
    mean_value: int,
) -> list[int]:
    """Multiplicative candidate update; each factor is clamped to ``[1/2, 2]``."""
    if mean_value <= 0:
        return list(prices)
    den = mean_value << step_log2
    out = []
    for p, z, v in zip(prices, pz, nu):
        adj = div_trunc(delta * v * z, den)
        if adj > ONE:
            adj = ONE
        elif adj < -(ONE >> 1):
            adj = -(ONE >> 1)
        q = p + div_trunc(p * adj, ONE)
        out.append(min(MAX_PRICE_RAW, max(MIN_PRICE_RAW, q)))
    return out


def smoothed_balanced(demand: DemandVector, eps_log2: int | None) -> bool:
    """Cheap pre-check: every asset collects at least what the smoothed plan pays out."""
    if eps_log2 is None:
        return all(s >= b for s, b in zip(demand.sold, demand.bought))
    k = eps_log2
    keep = (1 << k) - 1
    return all(s << k >= b * keep for s, b in zip(demand.sold, demand.bought))


def _volume_weights(demand: DemandVector, mean_value: int) -> list[int]:
    """``min(sold_i, bought_i) / V`` at radix 32, floored at 2**-20."""
    floor = ONE >> NU_FLOOR_LOG2
    if mean_value <= 0:
        return [ONE] * len(demand)
    return [max(floor, (min(s, b) << RADIX) // mean_value) for s, b in zip(demand.sold, demand.bought)]


def _nu_from_weights(weights: Sequence[int]) -> list[int]:
    # nu_i = w_min / w_i: a common factor is absorbed by delta, and capping the
    # largest nu at 1 keeps an idle asset from forcing every step to the clamp
    low = min(weights)
    return [max(1, (low << RADIX) // w) for w in weights]


def initial_nu(config: SolverConfig, n: int) -> tuple[list[int], list[int] | None]:
    if config.volume_strategy == PRIOR_BLOCK and config.prior_volumes is not None:
        w = [max(ONE >> NU_FLOOR_LOG2, v) for v in config.prior_volumes]
        return _nu_from_weights(w), None
    if config.volume_strategy == EWMA:
        return [ONE] * n, None
    return [ONE] * n, None


def solver_iteration(state: SolverState, curves: SupplyCurves, config: SolverConfig) -> SolverState:
    """One accept/reject step; mutates and returns ``state``."""
    mu = config.params.mu_log2
    if state.demand is None:
        state.demand = curves.demand_query(state.prices, mu)
        state.heuristic = heuristic(state.demand)
    mean = curves.offered_value(state.prices) // max(1, curves.n_assets)
    cand = price_step(state.prices, state.demand.pz, state.delta, config.step_log2, state.nu, mean)
    state.iter += 1
    if cand == state.prices:
        state.delta = max(1, (state.delta * config.step_down) >> 8)
        return state
    dem = curves.demand_query(cand, mu)
    h = heuristic(dem)
    if h < state.heuristic:
        state.prices = cand
        state.demand = dem
        state.heuristic = h
        state.delta = min(DELTA_MAX, max(state.delta + 1, (state.delta * config.step_up) >> 8))
        if config.volume_strategy == EWMA:
            obs = _volume_weights(dem, curves.offered_value(cand) // max(1, curves.n_assets))
            if state.weights is None:
                state.weights = obs
            else:
                state.weights = [w + ((o - w) >> EWMA_SHIFT) for w, o in zip(state.weights, obs)]
            state.nu = _nu_from_weights(state.weights)
    else:
        if state.delta == 1 and any(v != ONE for v in state.nu):
            # stalled: the volume-scaled direction no longer descends, so fall
            # back to uniform normalisation and restart the step search
            state.nu = [ONE] * curves.n_assets
            state.weights = None
            state.delta = DELTA_INIT
            return state
        state.delta = max(1, (state.delta * config.step_down) >> 8)
    return state


def run(
    config: SolverConfig,
    curves: SupplyCurves,
    initial: Sequence[int] | None = None,
    stop: threading.Event | None = None,
) -> SolverResult:
    """Iterate until the LP certifies the prices, the cap is hit or ``stop`` is set.

    A non-converged result carries the probed price vector with the lowest
    unrealized-utility ratio among the best few by heuristic.
    """
    start = time.perf_counter()
    n = curves.n_assets
    prices = list(initial) if initial is not None else [ONE] * n
    prices = [min(MAX_PRICE_RAW, max(MIN_PRICE_RAW, p)) for p in prices]
    if not curves:
        return SolverResult(tuple(prices), True, 0, 0, time.perf_counter() - start)
    params = config.params
    nu, weights = initial_nu(config, n)
    state = SolverState(prices, DELTA_INIT, nu, weights=weights)
    state.demand = curves.demand_query(state.prices, params.mu_log2)
    state.heuristic = heuristic(state.demand)
    probes = 0
    visited: list[tuple[int, int, tuple[int, ...]]] = []
    last_probe: tuple[int, ...] | None = None

    def probe() -> bool:
        nonlocal probes, last_probe
        key = tuple(state.prices)
        if key == last_probe:
            return False
        last_probe = key
        probes += 1
        if feasibility_probe(state.prices, curves, params):
            return True
        visited.append((state.heuristic, state.iter, key))
        return False

    while True:
        due = state.iter % config.feasibility_period == 0
        if (due or smoothed_balanced(state.demand, params.eps_log2)) and probe():
            return SolverResult(tuple(state.prices), True, state.iter, state.heuristic, time.perf_counter() - start, probes=probes)
        if state.iter >= config.max_iters:
            break
        if config.timeout is not None and time.perf_counter() - start > config.timeout:
            break
        if stop is not None and stop.is_set():
            break
        solver_iteration(state, curves, config)
    best = _best_visited(visited, state, curves, params)
    return SolverResult(best, False, state.iter, state.heuristic, time.perf_counter() - start, probes=probes)


def _best_visited(visited, state, curves, params, keep: int = 4) -> tuple[int, ...]:
    cands = sorted(visited)[:keep]
    cands.append((state.heuristic, state.iter, tuple(state.prices)))
    best = None
    for _h, _it, prices in cands:
        plan = solve_clearing(prices, curves, params)
        ratio = unrealized_utility_ratio(prices, curves, plan.amounts).sort_key
        if best is None or ratio < best[0]:
            best = (ratio, prices)
    return best[1]


def run_multi(
    configs: Sequence[SolverConfig],
    curves: SupplyCurves,
    initial: Sequence[int] | None = None,
    deterministic: bool = False,
) -> SolverResult:
    """Run several instances and pick one result.

    Racing mode starts one thread per config and takes the first converged
    result; a later finisher never overrides an earlier claim.  Deterministic
    mode runs every config with its wall clock disabled and picks the
    converged result with the lowest unrealized utility, ties by index.
    """
    if not configs:
        raise ValueError("need at least one solver config")
    if len(configs) == 1:
        cfg = replace(configs[0], timeout=None) if deterministic else configs[0]
        return run(cfg, curves, initial)
    if deterministic:
        return _run_deterministic(configs, curves, initial)
    return _race(configs, curves, initial)


def _run_deterministic(configs, curves, initial) -> SolverResult:
    results = [replace(run(replace(c, timeout=None), curves, initial), config_index=i) for i, c in enumerate(configs)]
    pool = [r for r in results if r.converged] or results
    best = None
    for r in pool:
        params = configs[r.config_index].params
        plan = solve_clearing(r.prices, curves, params)
        key = (unrealized_utility_ratio(r.prices, curves, plan.amounts).sort_key, r.config_index)
        if best is None or key < best[0]:
            best = (key, r)
    return best[1]


def _race(configs, curves, initial) -> SolverResult:
    stop = threading.Event()
    claim = threading.Lock()
    winner: list[SolverResult] = []
    results: list[SolverResult | None] = [None] * len(configs)

    def worker(i: int) -> None:
        r = replace(run(configs[i], curves, initial, stop), config_index=i)
        results[i] = r
        if r.converged:
            with claim:
                if not winner:
                    winner.append(r)
                    stop.set()

    threads = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(len(configs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if winner:
        return winner[0]
    return min((r for r in results if r is not None), key=lambda r: (r.heuristic, r.config_index))


# --- solution quality ------------------------------------------------------------


@dataclass(frozen=True)
class UtilityReport:
    """Realized and unrealized surplus at scale ``2**-64``; ``ratio`` is None when infinite."""

    realized: int
    unrealized: int

    @property
    def infinite(self) -> bool:
        return self.realized == 0 and self.unrealized > 0

    @property
    def ratio(self) -> Fraction | None:
        if self.infinite:
            return None
        if self.realized == 0:
            return Fraction(0)
        return Fraction(self.unrealized, self.realized)

    @property
    def sort_key(self) -> Fraction:
        r = self.ratio
        return Fraction(1 << 64) if r is None else r


def _prefix_price_endow(curve, units: int) -> int:
    """``sum mp_raw * e`` over the cheapest ``units`` of a curve."""
    if units <= 0:
        return 0
    ce = curve.cum_endow
    j = bisect_left(ce, units)
    prev_e = ce[j - 1] if j else 0
    prev_pe = curve.cum_price_endow[j - 1] if j else 0
    return prev_pe + (units - prev_e) * curve.prices[j]


def unrealized_utility_ratio(prices: Sequence[int], curves: SupplyCurves, amounts: Mapping[Pair, int]) -> UtilityReport:
    """Surplus left on the table relative to surplus captured.

    One unit sold by an offer with limit ``r`` on pair ``(A, B)`` is worth
    ``p_A - r * p_B`` to its owner.  Realized surplus sums this over executed
    units (the cheapest ``x_AB`` of each book), unrealized over the in-the-money
    units left unexecuted.
    """
    realized = unrealized = 0
    for pair in curves.pairs():
        a, b = pair
        pa, pb = prices[a], prices[b]
        c = curves[pair]
        u = c.eligible(pa, pb)
        if not u:
            continue
        x = min(amounts.get(pair, 0), u)
        full = (pa << RADIX) * u - pb * _prefix_price_endow(c, u)
        got = (pa << RADIX) * x - pb * _prefix_price_endow(c, x)
        realized += got
        unrealized += full - got
    return UtilityReport(realized, unrealized)
