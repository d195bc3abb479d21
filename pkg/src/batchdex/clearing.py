"""Trade amounts for a fixed price vector.

Variables are price-scaled flows ``y_AB = p_A * x_AB`` (raw price times
units).  Each pair has bounds ``p_A * L_AB <= y_AB <= p_A * U_AB`` where
``L_AB`` counts offers priced strictly below ``(1 - mu) * p_A / p_B`` (they
must trade) and ``U_AB`` offers priced at or below ``p_A / p_B`` (they may
trade).  Every asset must satisfy::

    sum_B y_AB >= (1 - eps) * sum_B y_BA + reserve_A

With ``eps = 0`` this is a max circulation, solved exactly with integer
min-cost flow.  With ``eps > 0`` the LP goes to HiGHS and the returned vertex
is recomputed in exact rational arithmetic before use; a solution that fails
exact certification is never returned.
"""

from __future__ import annotations

import heapq
from collections import deque
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix

from .demand import SupplyCurves
from .errors import SolverStall, TooManyAssets
from .model import ApproxParams
from .orderbook import Pair

MAX_LP_ASSETS = 64


@dataclass(frozen=True)
class PairBounds:
    """Unit bounds per pair plus the price-scaled versions used by the LP."""

    prices: tuple[int, ...]
    lower_units: dict[Pair, int]
    upper_units: dict[Pair, int]

    @property
    def n_assets(self) -> int:
        return len(self.prices)

    def pairs(self) -> list[Pair]:
        return sorted(p for p, u in self.upper_units.items() if u > 0)

    def lo(self, pair: Pair) -> int:
        return self.prices[pair[0]] * self.lower_units.get(pair, 0)

    def hi(self, pair: Pair) -> int:
        return self.prices[pair[0]] * self.upper_units.get(pair, 0)

    def without_lower(self) -> PairBounds:
        return PairBounds(self.prices, {}, self.upper_units)


@dataclass
class FlowSolution:
    """``y`` per pair (integers or exact fractions); ``objective = sum y``."""

    y: dict[Pair, int | Fraction]
    feasible: bool
    objective: int | Fraction = 0
    used_lower: bool = True
    method: str = ""


def build_bounds(prices: Sequence[int], curves: SupplyCurves, mu_log2: int) -> PairBounds:
    lower = {}
    upper = {}
    for pair in curves.pairs():
        a, b = pair
        c = curves[pair]
        u = c.eligible(prices[a], prices[b])
        if u:
            upper[pair] = u
            low = c.mandatory(prices[a], prices[b], mu_log2)
            if low:
                lower[pair] = low
    return PairBounds(tuple(prices), lower, upper)


def _check_size(n: int) -> None:
    if n > MAX_LP_ASSETS:
        raise TooManyAssets(f"{n} assets exceed the clearing LP limit of {MAX_LP_ASSETS}; use decomposition")


# --- eps = 0: exact max circulation -----------------------------------------


class _MinCostFlow:
    """Primal-dual min-cost flow (Dijkstra potentials + blocking flows) on integer data."""

    def __init__(self, n: int) -> None:
        self.n = n
        self.graph: list[list[list]] = [[] for _ in range(n)]

    def add(self, u: int, v: int, cap: int, cost: int) -> list:
        fwd = [v, cap, cost, None]
        bwd = [u, 0, -cost, fwd]
        fwd[3] = bwd
        self.graph[u].append(fwd)
        self.graph[v].append(bwd)
        return fwd

    def run(self, s: int, t: int) -> tuple[int, int]:
        n = self.n
        graph = self.graph
        h = [0] * n
        flow = cost = 0
        inf = float("inf")
        while True:
            dist = [inf] * n
            dist[s] = 0
            pq = [(0, s)]
            while pq:
                d, u = heapq.heappop(pq)
                if d > dist[u]:
                    continue
                for e in graph[u]:
                    if e[1] > 0:
                        nd = d + e[2] + h[u] - h[e[0]]
                        if nd < dist[e[0]]:
                            dist[e[0]] = nd
                            heapq.heappush(pq, (nd, e[0]))
            if dist[t] == inf:
                return flow, cost
            for v in range(n):
                if dist[v] < inf:
                    h[v] += dist[v]
            # blocking flows on the zero-reduced-cost subgraph
            while True:
                level = [-1] * n
                level[s] = 0
                q = deque([s])
                while q:
                    u = q.popleft()
                    for e in graph[u]:
                        v = e[0]
                        if e[1] > 0 and level[v] < 0 and e[2] + h[u] - h[v] == 0:
                            level[v] = level[u] + 1
                            q.append(v)
                if level[t] < 0:
                    break
                it = [0] * n

                def dfs(u: int, pushed: int) -> int:
                    if u == t:
                        return pushed
                    edges = graph[u]
                    while it[u] < len(edges):
                        e = edges[it[u]]
                        v = e[0]
                        if e[1] > 0 and level[v] == level[u] + 1 and e[2] + h[u] - h[v] == 0:
                            got = dfs(v, min(pushed, e[1]))
                            if got:
                                e[1] -= got
                                e[3][1] += got
                                return got
                        it[u] += 1
                    return 0

                while True:
                    got = dfs(s, 1 << 256)
                    if not got:
                        break
                    flow += got
                    cost += got * (h[t] - h[s])


def solve_max_circulation(bounds: PairBounds, use_lower: bool = True) -> FlowSolution:
    """Maximise ``sum y`` over integer circulations within the bounds.

    Every edge starts saturated at its upper bound; the resulting imbalances
    are routed back along edge reductions at unit cost, so the cheapest
    rebalancing is the largest circulation.  Returns ``feasible=False`` when
    the lower bounds cannot be met.
    """
    n = bounds.n_assets
    _check_size(n)
    pairs = bounds.pairs()
    if not pairs:
        return FlowSolution({}, True, 0, use_lower, "circulation")
    lo = {p: bounds.lo(p) if use_lower else 0 for p in pairs}
    hi = {p: bounds.hi(p) for p in pairs}
    imbalance = [0] * n
    for (a, b) in pairs:
        imbalance[a] += hi[(a, b)]
        imbalance[b] -= hi[(a, b)]
    s, t = n, n + 1
    g = _MinCostFlow(n + 2)
    arcs = {}
    for p in pairs:
        if hi[p] > lo[p]:
            arcs[p] = g.add(p[0], p[1], hi[p] - lo[p], 1)
    need = 0
    for v in range(n):
        if imbalance[v] > 0:
            g.add(s, v, imbalance[v], 0)
            need += imbalance[v]
        elif imbalance[v] < 0:
            g.add(v, t, -imbalance[v], 0)
    flow, _ = g.run(s, t)
    if flow != need:
        return FlowSolution({}, False, 0, use_lower, "circulation")
    y = {}
    for p in pairs:
        arc = arcs.get(p)
        reduced = arc[3][1] if arc is not None else 0
        y[p] = hi[p] - reduced
    return FlowSolution(y, True, sum(y.values()), use_lower, "circulation")


# --- eps > 0: HiGHS with exact certification -----------------------------------


def _conservation_ok(y: Mapping[Pair, int | Fraction], n: int, eps: Fraction, reserve: Sequence[int] | None) -> bool:
    out = [0] * n
    inn = [0] * n
    for (a, b), v in y.items():
        out[a] += v
        inn[b] += v
    keep = 1 - eps
    for v in range(n):
        r = reserve[v] if reserve is not None else 0
        if out[v] < keep * inn[v] + r:
            return False
    return True


def _bounds_ok(y, lo, hi) -> bool:
    return all(lo[p] <= v <= hi[p] for p, v in y.items())


def _highs(pairs, lo, hi, n, keep: float, reserve, scale: float):
    m = len(pairs)
    rows, cols, vals = [], [], []
    for j, (a, b) in enumerate(pairs):
        rows += [a, b]
        cols += [j, j]
        vals += [-1.0, keep]
    a_ub = csr_matrix((vals, (rows, cols)), shape=(n, m))
    b_ub = np.array([-(reserve[v] / scale if reserve is not None else 0.0) for v in range(n)])
    lb = np.array([lo[p] / scale for p in pairs])
    ub = np.array([hi[p] / scale for p in pairs])
    res = linprog(
        -np.ones(m),
        A_ub=a_ub,
        b_ub=b_ub,
        bounds=np.column_stack([lb, ub]),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    return res, lb, ub


def _polish(pairs, lo, hi, n, eps: Fraction, reserve, scale: float, xs, lb, ub, slack) -> dict | None:
    """Recompute the HiGHS vertex exactly from its active set."""
    tol = 1e-9
    keep = 1 - eps
    fixed: dict[int, Fraction | int] = {}
    free: list[int] = []
    for j, p in enumerate(pairs):
        if xs[j] - lb[j] <= tol:
            fixed[j] = lo[p]
        elif ub[j] - xs[j] <= tol:
            fixed[j] = hi[p]
        else:
            free.append(j)
    tight = [v for v in range(n) if slack[v] <= tol]
    col = {j: i for i, j in enumerate(free)}
    # rows: sum_out - keep * sum_in = reserve over tight assets
    matrix: list[list[Fraction]] = []
    for v in tight:
        row = [Fraction(0)] * (len(free) + 1)
        rhs = Fraction(reserve[v] if reserve is not None else 0)
        for j, (a, b) in enumerate(pairs):
            coef = (1 if a == v else 0) - (keep if b == v else 0)
            if not coef:
                continue
            if j in col:
                row[col[j]] += coef
            else:
                rhs -= coef * fixed[j]
        row[-1] = rhs
        matrix.append(row)
    values = _solve_exact(matrix, len(free), [Fraction(round(xs[j] * scale)) for j in free])
    if values is None:
        return None
    y = {}
    for j, p in enumerate(pairs):
        v = values[col[j]] if j in col else fixed[j]
        if isinstance(v, Fraction) and v.denominator == 1:
            v = v.numerator
        y[p] = v
    return y


def _solve_exact(matrix: list[list[Fraction]], n_vars: int, guess: list[Fraction]) -> list[Fraction] | None:
    """Gaussian elimination; variables left free take their ``guess`` values."""
    rows = [r[:] for r in matrix]
    pivots: list[int] = []
    r = 0
    for c in range(n_vars):
        pr = next((i for i in range(r, len(rows)) if rows[i][c] != 0), None)
        if pr is None:
            continue
        rows[r], rows[pr] = rows[pr], rows[r]
        inv = 1 / rows[r][c]
        rows[r] = [x * inv for x in rows[r]]
        for i in range(len(rows)):
            if i != r and rows[i][c] != 0:
                f = rows[i][c]
                rows[i] = [x - f * y for x, y in zip(rows[i], rows[r])]
        pivots.append(c)
        r += 1
    for i in range(r, len(rows)):
        if rows[i][-1] != 0:
            return None
    values = list(guess)
    pivot_set = set(pivots)
    for i, c in enumerate(pivots):
        v = rows[i][-1]
        for c2 in range(n_vars):
            if c2 not in pivot_set and rows[i][c2] != 0:
                v -= rows[i][c2] * values[c2]
        values[c] = v
    return values


def solve_general(
    bounds: PairBounds,
    eps_log2: int | None,
    use_lower: bool = True,
    reserve: Sequence[int] | None = None,
) -> FlowSolution:
    """Maximise ``sum y`` under relaxed conservation with commission ``2**-eps_log2``.

    Raises :class:`SolverStall` when HiGHS fails or its answer cannot be
    certified exactly.  Returns ``feasible=False`` when HiGHS reports the
    program infeasible.
    """
    n = bounds.n_assets
    _check_size(n)
    if eps_log2 is None and reserve is None:
        return solve_max_circulation(bounds, use_lower)
    eps = Fraction(0) if eps_log2 is None else Fraction(1, 1 << eps_log2)
    pairs = bounds.pairs()
    lo = {p: bounds.lo(p) if use_lower else 0 for p in pairs}
    hi = {p: bounds.hi(p) for p in pairs}
    if not pairs:
        ok = reserve is None or all(r <= 0 for r in reserve)
        return FlowSolution({}, ok, 0, use_lower, "lp")
    scale = float(max(hi.values()))
    res, lb, ub = _highs(pairs, lo, hi, n, float(1 - eps), reserve, scale)
    if res.status == 2:
        return FlowSolution({}, False, 0, use_lower, "lp")
    if res.status != 0:
        raise SolverStall(f"HiGHS status {res.status}: {res.message}")
    y = _polish(pairs, lo, hi, n, eps, reserve, scale, res.x, lb, ub, res.ineqlin.residual)
    if y is not None and _bounds_ok(y, lo, hi) and _conservation_ok(y, n, eps, reserve):
        return FlowSolution(y, True, sum(y.values()), use_lower, "lp-exact")
    # fall back to a slightly stricter commission and round down into the interior
    tight = eps * (1 - Fraction(1, 16))
    res, lb, ub = _highs(pairs, lo, hi, n, float(1 - tight), reserve, scale)
    if res.status == 0:
        y = {p: min(hi[p], max(lo[p], int(res.x[j] * scale))) for j, p in enumerate(pairs)}
        if _conservation_ok(y, n, eps, reserve):
            return FlowSolution(y, True, sum(y.values()), use_lower, "lp-rounded")
    raise SolverStall("LP solution failed exact certification")


# --- feasibility probe ----------------------------------------------------------


def lp_feasible(bounds: PairBounds, eps_log2: int | None) -> bool:
    """Whether the program with mandatory lower bounds has any solution."""
    if not bounds.lower_units:
        return True
    circ = solve_max_circulation(bounds, use_lower=True)
    if circ.feasible or eps_log2 is None:
        return circ.feasible
    try:
        return solve_general(bounds, eps_log2, use_lower=True).feasible
    except SolverStall:
        return False


def feasibility_probe(prices: Sequence[int], curves: SupplyCurves, params: ApproxParams) -> bool:
    return lp_feasible(build_bounds(prices, curves, params.mu_log2), params.eps_log2)


# --- integer trade amounts --------------------------------------------------------


@dataclass
class ClearingPlan:
    """Integer trade amounts for one block at fixed prices."""

    prices: tuple[int, ...]
    amounts: dict[Pair, int]
    eps_log2: int | None
    mu_log2: int
    lower_met: bool
    lp_feasible: bool
    method: str = ""
    lower_units: dict[Pair, int] = field(default_factory=dict)

    @property
    def y(self) -> dict[Pair, int]:
        return {p: self.prices[p[0]] * x for p, x in self.amounts.items()}

    @property
    def params(self) -> ApproxParams:
        return ApproxParams(self.eps_log2, self.mu_log2)


def extract_trade_amounts(solution: FlowSolution, prices: Sequence[int]) -> dict[Pair, int]:
    """``x_AB = floor(y_AB / p_A)``; zero entries are dropped."""
    out = {}
    for (a, b), y in solution.y.items():
        x = int(y // prices[a])
        if x:
            out[(a, b)] = x
    return out


def payout_deficits(amounts: Mapping[Pair, int], prices: Sequence[int], params: ApproxParams) -> list[int]:
    """Per asset, the worst-case units owed minus units collected (positive means short).

    Owed units are bounded by paying each pair's whole volume as one
    execution; per-offer floors can only pay less.
    """
    n = len(prices)
    collected = [0] * n
    owed = [0] * n
    for (a, b), x in amounts.items():
        collected[a] += x
        owed[b] += params.payout(x, prices[a], prices[b])
    return [o - c for o, c in zip(owed, collected)]


def repair_conservation(
    amounts: dict[Pair, int],
    prices: Sequence[int],
    params: ApproxParams,
    lower: Mapping[Pair, int],
) -> bool:
    """Trim incoming volume until every asset can pay what it owes.

    Cuts come first from volume above the mandatory bound; returns False if
    some pair had to go below its bound.
    """
    lower_kept = True
    n = len(prices)
    incoming: dict[int, list[Pair]] = {v: [] for v in range(n)}
    for p in sorted(amounts):
        incoming[p[1]].append(p)
    while True:
        deficits = payout_deficits(amounts, prices, params)
        short = [v for v in range(n) if deficits[v] > 0]
        if not short:
            return lower_kept
        v = short[0]
        need = deficits[v]
        for floor_ok in (True, False):
            for p in incoming[v]:
                if need <= 0:
                    break
                x = amounts.get(p, 0)
                floor = lower.get(p, 0) if floor_ok else 0
                room = x - floor
                if room <= 0:
                    continue
                # one unit of p pays at most p_B / p_A units of v, plus rounding
                cut = min(room, -(-need * prices[v] // prices[p[0]]) + 1)
                amounts[p] = x - cut
                if not floor_ok and amounts[p] < lower.get(p, 0):
                    lower_kept = False
                need -= cut * prices[p[0]] // prices[v]
            if need <= 0:
                break
        for p in [p for p, x in amounts.items() if x == 0]:
            del amounts[p]


def solve_clearing(prices: Sequence[int], curves: SupplyCurves, params: ApproxParams) -> ClearingPlan:
    """Final trade amounts: maximise volume, honour mandatory bounds when possible.

    The exact program is tried with a per-asset reserve of one unit per
    outgoing pair, which absorbs the flooring of ``y / p_A``; without the
    reserve the plan may need trimming by :func:`repair_conservation`.
    """
    prices = tuple(prices)
    _check_size(len(prices))
    bounds = build_bounds(prices, curves, params.mu_log2)
    n = len(prices)
    outdeg = [0] * n
    for (a, _b) in bounds.pairs():
        outdeg[a] += 1
    reserve = [prices[v] * outdeg[v] for v in range(n)]
    feasible = lp_feasible(bounds, params.eps_log2)
    attempts = []
    if feasible:
        if params.eps_log2 is not None:
            attempts.append((True, reserve))
        attempts.append((True, None))
    if params.eps_log2 is not None:
        attempts.append((False, reserve))
    attempts.append((False, None))
    sol = None
    for use_lower, res in attempts:
        try:
            cand = solve_general(bounds, params.eps_log2, use_lower, res)
        except SolverStall:
            continue
        if cand.feasible:
            sol = cand
            break
    if sol is None:
        sol = solve_max_circulation(bounds, use_lower=False)
    amounts = extract_trade_amounts(sol, prices)
    lower = bounds.lower_units if sol.used_lower else {}
    kept = repair_conservation(amounts, prices, params, lower)
    met = all(amounts.get(p, 0) >= low for p, low in bounds.lower_units.items())
    return ClearingPlan(prices, amounts, params.eps_log2, params.mu_log2, met and kept, feasible, sol.method, dict(bounds.lower_units))
