"""Brute-force references for testing the engine.

Everything here is deliberately slow and literal: per-offer loops instead of
prefix sums, exact rationals instead of fixed point, a textbook simplex
instead of HiGHS or flow algorithms, and one transaction at a time instead of
the vectorised filter and additive effects.  Agreement with the engine is
evidence because the arithmetic paths share nothing but the input.
"""

from __future__ import annotations

import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction

from .clearing import PairBounds, feasibility_probe, payout_deficits, solve_clearing
from .demand import DemandVector, SupplyCurves
from .errors import NotFound
from .fixedpoint import KEY_SHIFT, MAX_KEY_PRICE, MAX_PRICE_RAW, MIN_PRICE_RAW, ONE, RADIX, Price
from .model import ApproxParams, Offer, OfferId, key_from_parts
from .orderbook import Pair
from .transactions import CancelOffer, CreateAccount, CreateOffer, Payment, Transaction
from .txengine import (
    ACCOUNT_EXISTS,
    BAD_OP,
    BAD_SIGNATURE,
    DOUBLE_CANCEL,
    DUP_CREATE,
    DUP_SEQ,
    MAX_SIGNATURE,
    NATIVE_ASSET,
    OVERDRAFT,
    SEQ_WINDOW,
    SEQ_WINDOW_REASON,
    UNKNOWN_ACCOUNT,
    UNKNOWN_DESTINATION,
    UNKNOWN_OFFER,
    Account,
    BlockState,
    execute_plan,
)

RawOffer = tuple[int, int, int, int]  # sell, buy, limit_raw, endowment


def _raw(offers: Iterable[Offer | RawOffer]) -> list[RawOffer]:
    out = []
    for o in offers:
        if isinstance(o, Offer):
            out.append((o.sell, o.buy, o.limit_price.raw, o.endowment))
        else:
            out.append(tuple(o))
    return out


# --- demand --------------------------------------------------------------------------


def offer_fill(limit_raw: int, sell_raw: int, buy_raw: int, mu_log2: int) -> Fraction:
    """Fraction of one offer's endowment sold at the given prices."""
    rate = Fraction(sell_raw, buy_raw)
    mp = Fraction(limit_raw, 1 << RADIX)
    mu = Fraction(1, 1 << mu_log2)
    if mp < (1 - mu) * rate:
        return Fraction(1)
    if mp > rate:
        return Fraction(0)
    return (rate - mp) / (mu * rate)


def naive_demand(offers: Iterable[Offer | RawOffer], prices: Sequence[int], mu_log2: int, n_assets: int | None = None) -> DemandVector:
    """Per-offer smoothed demand in value at scale ``2**-64``, exactly."""
    raw = _raw(offers)
    n = n_assets if n_assets is not None else len(prices)
    sold = [Fraction(0)] * n
    bought = [Fraction(0)] * n
    for sell, buy, limit, endow in raw:
        units = endow * offer_fill(limit, prices[sell], prices[buy], mu_log2)
        value = units * prices[sell] * (1 << RADIX)
        sold[sell] += value
        bought[buy] += value
    for v in sold + bought:
        if v.denominator != 1:
            raise AssertionError(f"demand value {v} is not integral at scale 2**-64")
    return DemandVector(tuple(int(v) for v in sold), tuple(int(v) for v in bought))


def naive_bounds(offers: Iterable[Offer | RawOffer], prices: Sequence[int], mu_log2: int) -> PairBounds:
    """Mandatory and eligible units per pair from a scan of every offer."""
    mu = Fraction(1, 1 << mu_log2)
    lower: dict[Pair, int] = defaultdict(int)
    upper: dict[Pair, int] = defaultdict(int)
    for sell, buy, limit, endow in _raw(offers):
        rate = Fraction(prices[sell], prices[buy])
        mp = Fraction(limit, 1 << RADIX)
        if mp <= rate:
            upper[(sell, buy)] += endow
        if mp < (1 - mu) * rate:
            lower[(sell, buy)] += endow
    return PairBounds(tuple(prices), dict(lower), dict(upper))


# --- exact simplex -------------------------------------------------------------------


@dataclass
class RationalLP:
    feasible: bool
    objective: Fraction
    y: dict[Pair, Fraction]


def _pivot(rows: list[list[Fraction]], obj: list[Fraction], r: int, c: int) -> None:
    piv = rows[r][c]
    row = [v / piv for v in rows[r]]
    rows[r] = row
    for i, other in enumerate(rows):
        if i != r and other[c]:
            f = other[c]
            rows[i] = [a - f * b for a, b in zip(other, row)]
    if obj[c]:
        f = obj[c]
        obj[:] = [a - f * b for a, b in zip(obj, row)]


def _bland(rows: list[list[Fraction]], obj: list[Fraction], basis: list[int], allowed: int) -> None:
    """Maximise with Bland's rule; ``obj[j] < 0`` means column ``j`` improves."""
    while True:
        enter = next((j for j in range(allowed) if obj[j] < 0), None)
        if enter is None:
            return
        best = None
        for i, row in enumerate(rows):
            if row[enter] > 0:
                ratio = row[-1] / row[enter]
                if best is None or ratio < best[0] or (ratio == best[0] and basis[i] < basis[best[1]]):
                    best = (ratio, i)
        if best is None:
            raise AssertionError("unbounded program")
        _pivot(rows, obj, best[1], enter)
        basis[best[1]] = enter


def simplex_max(c: Sequence[Fraction], a: Sequence[Sequence[Fraction]], b: Sequence[Fraction]) -> tuple[Fraction, list[Fraction]] | None:
    """``max c.x  s.t.  A x <= b, x >= 0`` by two-phase simplex; ``None`` if infeasible."""
    m, nv = len(a), len(c)
    n_art = sum(1 for v in b if v < 0)
    width = nv + m + n_art
    rows: list[list[Fraction]] = []
    basis: list[int] = []
    art = nv + m
    for i in range(m):
        row = [Fraction(v) for v in a[i]] + [Fraction(0)] * (m + n_art) + [Fraction(b[i])]
        row[nv + i] = Fraction(1)
        if b[i] < 0:
            row = [-v for v in row]
            row[art] = Fraction(1)
            basis.append(art)
            art += 1
        else:
            basis.append(nv + i)
        rows.append(row)
    if n_art:
        obj = [Fraction(0)] * (width + 1)
        for j in range(nv + m, width):
            obj[j] = Fraction(1)
        for i, bv in enumerate(basis):
            if bv >= nv + m:
                obj = [o - v for o, v in zip(obj, rows[i])]
        _bland(rows, obj, basis, width)
        if obj[-1] != 0:
            return None
        # drive artificials out of the basis
        for i in range(len(rows) - 1, -1, -1):
            if basis[i] >= nv + m:
                col = next((j for j in range(nv + m) if rows[i][j] != 0), None)
                if col is None:
                    del rows[i]
                    del basis[i]
                else:
                    _pivot(rows, obj, i, col)
                    basis[i] = col
        rows = [row[: nv + m] + [row[-1]] for row in rows]
    obj = [Fraction(-v) for v in c] + [Fraction(0)] * m + [Fraction(0)]
    for i, bv in enumerate(basis):
        if obj[bv]:
            f = obj[bv]
            obj = [o - f * v for o, v in zip(obj, rows[i])]
    _bland(rows, obj, basis, nv + m)
    x = [Fraction(0)] * nv
    for i, bv in enumerate(basis):
        if bv < nv:
            x[bv] = rows[i][-1]
    return obj[-1], x


def rational_lp(bounds: PairBounds, eps_log2: int | None, use_lower: bool = True, reserve: Sequence[int] | None = None) -> RationalLP:
    """The clearing program solved exactly over the rationals.

    Variables are shifted to ``z = y - lower`` so that every variable is
    non-negative; node constraints read ``keep * in(v) - out(v) <= -reserve``.
    """
    n = bounds.n_assets
    if n > 6:
        raise ValueError("rational LP oracle is limited to 6 assets")
    keep = Fraction(1) if eps_log2 is None else 1 - Fraction(1, 1 << eps_log2)
    pairs = bounds.pairs()
    lo = [bounds.lo(p) if use_lower else 0 for p in pairs]
    hi = [bounds.hi(p) for p in pairs]
    if any(l > h for l, h in zip(lo, hi)):
        return RationalLP(False, Fraction(0), {})
    nv = len(pairs)
    a: list[list[Fraction]] = []
    b: list[Fraction] = []
    for v in range(n):
        row = [Fraction(0)] * nv
        rhs = Fraction(-(reserve[v] if reserve is not None else 0))
        for j, (s, t) in enumerate(pairs):
            if t == v:
                row[j] += keep
                rhs -= keep * lo[j]
            if s == v:
                row[j] -= 1
                rhs += lo[j]
        a.append(row)
        b.append(rhs)
    for j in range(nv):
        row = [Fraction(0)] * nv
        row[j] = Fraction(1)
        a.append(row)
        b.append(Fraction(hi[j] - lo[j]))
    res = simplex_max([Fraction(1)] * nv, a, b)
    if res is None:
        return RationalLP(False, Fraction(0), {})
    obj, z = res
    y = {p: z[j] + lo[j] for j, p in enumerate(pairs)}
    return RationalLP(True, obj + sum(lo), y)


def oracle_feasible(offers: Sequence[Offer | RawOffer], prices: Sequence[int], params: ApproxParams) -> bool:
    bounds = naive_bounds(offers, prices, params.mu_log2)
    if not bounds.lower_units:
        return True
    # necessary condition, cheap: each asset can pay out its mandatory inflow
    keep = Fraction(1) if params.eps_log2 is None else 1 - Fraction(1, 1 << params.eps_log2)
    out_hi: dict[int, int] = defaultdict(int)
    in_lo: dict[int, int] = defaultdict(int)
    for pair in bounds.pairs():
        out_hi[pair[0]] += bounds.hi(pair)
        in_lo[pair[1]] += bounds.lo(pair)
    if any(out_hi[a] < keep * v for a, v in in_lo.items()):
        return False
    return rational_lp(bounds, params.eps_log2, use_lower=True).feasible


# --- small-market equilibrium ---------------------------------------------------------


@dataclass
class Equilibrium:
    """A certified price vector plus the certified set it was found in.

    For two assets ``interval`` is the exact feasible range of ``p_0`` with
    ``p_1 = 1``.  For three assets ``region`` holds every certified point of
    the search grid connected to ``prices``.
    """

    prices: tuple[int, ...]
    interval: tuple[int, int] | None = None
    region: list[tuple[int, ...]] | None = None
    offers: tuple[RawOffer, ...] = ()
    params: ApproxParams | None = None

    def ratio_interval(self) -> tuple[Fraction, Fraction] | None:
        if self.interval is None:
            return None
        return Fraction(self.interval[0], ONE), Fraction(self.interval[1], ONE)

    def certifies(self, prices: Sequence[int]) -> bool:
        """Exact membership: the rational LP with mandatory bounds is feasible at ``prices``."""
        return self.params is not None and oracle_feasible(self.offers, prices, self.params)

    def distance(self, prices: Sequence[int]) -> Fraction:
        """Largest relative gap between ``prices`` and the nearest certified point, per ratio to the last asset."""
        last = prices[-1]
        if self.interval is not None:
            r = Fraction(prices[0], last)
            lo, hi = self.ratio_interval()
            if r < lo:
                return (lo - r) / lo
            return (r - hi) / hi if r > hi else Fraction(0)
        if self.certifies(prices):
            return Fraction(0)
        best = None
        for q in self.region or [self.prices]:
            d = max(abs(Fraction(p * q[-1], last * qi) - 1) for p, qi in zip(prices[:-1], q[:-1]))
            if best is None or d < best:
                best = d
        return best


def _two_asset_conditions(raw: Sequence[RawOffer], p0: int, params: ApproxParams) -> tuple[bool, bool]:
    b = naive_bounds(raw, (p0, ONE), params.mu_log2)
    keep = Fraction(1) if params.eps_log2 is None else 1 - Fraction(1, 1 << params.eps_log2)
    lo01, hi01 = b.lo((0, 1)), b.hi((0, 1))
    lo10, hi10 = b.lo((1, 0)), b.hi((1, 0))
    # feasible iff [lo01, hi01] meets [keep * lo10, hi10 / keep]
    return keep * lo10 <= hi01, lo01 * keep <= hi10


def _first_true(pred, lo: int, hi: int) -> int:
    """Smallest value in ``[lo, hi]`` with ``pred`` true, ``hi + 1`` if none (pred monotone)."""
    while lo <= hi:
        mid = (lo + hi) // 2
        if pred(mid):
            hi = mid - 1
        else:
            lo = mid + 1
    return lo


def brute_equilibrium(
    offers: Sequence[Offer | RawOffer],
    n_assets: int,
    params: ApproxParams,
    max_radius: int = 8,
    region_cap: int = 0,
) -> Equilibrium:
    """Prices with the last asset at 1.0 that pass the exact feasibility check.

    Three-asset searches explore up to ``region_cap`` connected certified
    grid points around the first one found.
    """
    raw = _raw(offers)
    if n_assets == 2:
        return _equilibrium2(raw, params)
    if n_assets == 3:
        return _equilibrium3(raw, params, max_radius, region_cap)
    raise ValueError("brute_equilibrium supports 2 or 3 assets")


def _equilibrium2(raw: Sequence[RawOffer], params: ApproxParams) -> Equilibrium:
    lo_p = _first_true(lambda p: _two_asset_conditions(raw, p, params)[0], MIN_PRICE_RAW, MAX_PRICE_RAW)
    hi_p = _first_true(lambda p: not _two_asset_conditions(raw, p, params)[1], MIN_PRICE_RAW, MAX_PRICE_RAW) - 1
    if lo_p > hi_p:
        raise NotFound("no feasible price ratio")
    mid = math.isqrt(lo_p * hi_p)
    mid = min(hi_p, max(lo_p, mid))
    if not oracle_feasible(raw, (mid, ONE), params):
        raise NotFound("closed-form interval disagrees with the exact LP")
    return Equilibrium((mid, ONE), (lo_p, hi_p), offers=tuple(raw), params=params)


def _pz_int(raw: Sequence[RawOffer], prices: Sequence[int], mu_log2: int, asset: int) -> Fraction:
    total = Fraction(0)
    for sell, buy, limit, endow in raw:
        if sell != asset and buy != asset:
            continue
        v = endow * offer_fill(limit, prices[sell], prices[buy], mu_log2) * prices[sell]
        total += v if buy == asset else -v
    return total


def _equilibrium3(raw: Sequence[RawOffer], params: ApproxParams, max_radius: int, region_cap: int) -> Equilibrium:
    # certified sets can be thinner than a mu-scale grid cell or stretch along
    # the curve where assets 0 and 1 balance, so search coarse to fine and walk
    # that curve before giving up
    for extra in (2, 5, 8):
        found = _search3(raw, params, 1 + 2.0 ** -(params.mu_log2 + extra), max_radius, region_cap)
        if found is not None:
            return found
    raise NotFound("no certified price vector near the demand balance curve")


def _search3(raw, params: ApproxParams, step: float, max_radius: int, region_cap: int) -> Equilibrium | None:
    span = int(math.log(2.0**23) / math.log(step))

    def price(i: int) -> int:
        return min(MAX_PRICE_RAW, max(MIN_PRICE_RAW, round(ONE * step**i)))

    def inner(j: int, guess: int | None = None) -> int:
        # net demand for asset 0 falls as its own price rises
        def pred(i: int) -> bool:
            return _pz_int(raw, (price(i), price(j), ONE), params.mu_log2, 0) <= 0

        if guess is None:
            return _first_true(pred, -span, span)
        # gallop out from the neighbouring solution, then bisect the bracket
        width = 1
        if pred(guess):
            while guess - width > -span and pred(guess - width):
                width *= 2
            return _first_true(pred, max(-span, guess - width), guess)
        while guess + width < span and not pred(guess + width):
            width *= 2
        return _first_true(pred, guess + 1, min(span, guess + width))

    def outer(j: int) -> bool:
        i = inner(j)
        return _pz_int(raw, (price(i), price(j), ONE), params.mu_log2, 1) <= 0

    def hit(i: int, j: int) -> Equilibrium | None:
        prices = (price(i), price(j), ONE)
        if not oracle_feasible(raw, prices, params):
            return None
        return Equilibrium(prices, region=_flood(raw, params, price, (i, j), region_cap), offers=tuple(raw), params=params)

    j0 = _first_true(outer, -span, span)
    i0 = inner(j0)
    for r in range(max_radius + 1):
        ring = sorted(
            ((di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1) if max(abs(di), abs(dj)) == r),
            key=lambda d: (d[0] ** 2 + d[1] ** 2, d),
        )
        for di, dj in ring:
            if (eq := hit(i0 + di, j0 + dj)) is not None:
                return eq
    last = {-1: i0, 1: i0}
    for k in range(max_radius + 1, 128 * max_radius):
        for side in (-1, 1):
            j = j0 + side * k
            i = last[side] = inner(j, last[side])
            for di in (0, -1, 1):
                if (eq := hit(i + di, j)) is not None:
                    return eq
    return None


def _flood(raw, params, price, start: tuple[int, int], cap: int) -> list[tuple[int, ...]]:
    seen = {start}
    found = [start]
    frontier = [start]
    while frontier and len(found) < cap:
        nxt = []
        for i, j in frontier:
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                q = (i + di, j + dj)
                if q in seen:
                    continue
                seen.add(q)
                if oracle_feasible(raw, (price(q[0]), price(q[1]), ONE), params):
                    found.append(q)
                    nxt.append(q)
        frontier = nxt
    return [(price(i), price(j), ONE) for i, j in found]


# --- sequential block execution --------------------------------------------------------


def _structurally_ok(t: Transaction, state: BlockState) -> bool:
    op = t.op
    n = state.n_assets

    def asset_ok(a: int) -> bool:
        return 0 <= a < n

    def price_ok(p: int) -> bool:
        return p > 0 and p % (1 << KEY_SHIFT) == 0 and (p >> KEY_SHIFT) <= MAX_KEY_PRICE

    if isinstance(op, Payment):
        return asset_ok(op.asset) and op.amount > 0
    if isinstance(op, CreateAccount):
        return True
    if not (asset_ok(op.sell) and asset_ok(op.buy) and op.sell != op.buy and price_ok(op.limit_price_raw)):
        return False
    if isinstance(op, CancelOffer):
        return True
    if op.endowment <= 0:
        return False
    anchors = state.registry.anchors
    if op.sell in anchors or op.buy in anchors:
        return anchors.get(op.sell) == op.buy or anchors.get(op.buy) == op.sell
    return True


def _individual_reason(t: Transaction, state: BlockState) -> str | None:
    acct = state.accounts.get(t.account)
    if acct is None:
        return UNKNOWN_ACCOUNT
    if len(t.signature) > MAX_SIGNATURE:
        return BAD_SIGNATURE
    if not (acct.seq_base < t.seq <= acct.seq_base + SEQ_WINDOW):
        return SEQ_WINDOW_REASON
    if not _structurally_ok(t, state):
        return BAD_OP
    op = t.op
    if isinstance(op, Payment) and op.dest not in state.accounts:
        return UNKNOWN_DESTINATION
    if isinstance(op, CreateAccount) and op.new_id in state.accounts:
        return ACCOUNT_EXISTS
    if isinstance(op, CancelOffer):
        book = state.books.books.get((op.sell, op.buy))
        if book is None or key_from_parts(op.limit_price_raw, t.account, op.offer_seq) not in book:
            return UNKNOWN_OFFER
    return None


def _spend(t: Transaction) -> dict[int, int]:
    op = t.op
    need: dict[int, int] = defaultdict(int)
    if isinstance(op, Payment):
        need[op.asset] += op.amount + t.fee
    elif isinstance(op, CreateOffer):
        need[op.sell] += op.endowment + t.fee
    elif isinstance(op, CancelOffer):
        need[op.sell] += t.fee
    else:
        need[NATIVE_ASSET] += t.fee
    return need


def sequential_filter(txs: Sequence[Transaction], state: BlockState) -> list[str | None]:
    """Per transaction, ``None`` if kept or the reason it is removed."""
    reasons: list[str | None] = [_individual_reason(t, state) for t in txs]
    creators: dict[int, list[int]] = defaultdict(list)
    for i, t in enumerate(txs):
        if reasons[i] is None and isinstance(t.op, CreateAccount):
            creators[t.op.new_id].append(i)
    for idxs in creators.values():
        if len(idxs) > 1:
            for i in idxs:
                reasons[i] = DUP_CREATE
    by_account: dict[int, list[int]] = defaultdict(list)
    for i, t in enumerate(txs):
        if reasons[i] is None:
            by_account[t.account].append(i)
    for acct_id, idxs in by_account.items():
        seqs = [txs[i].seq for i in idxs]
        cancels = [txs[i].op.offer_seq for i in idxs if isinstance(txs[i].op, CancelOffer)]
        why = None
        if len(set(seqs)) < len(seqs):
            why = DUP_SEQ
        elif len(set(cancels)) < len(cancels):
            why = DOUBLE_CANCEL
        else:
            spent: dict[int, int] = defaultdict(int)
            for i in idxs:
                for a, v in _spend(txs[i]).items():
                    spent[a] += v
            avail = state.accounts[acct_id].available
            if any(v > avail.get(a, 0) for a, v in spent.items()):
                why = OVERDRAFT
        if why is not None:
            for i in idxs:
                reasons[i] = why
    return reasons


def sequential_reference_apply(txs: Sequence[Transaction], state: BlockState, plan=None) -> BlockState:
    """Apply one block one transaction at a time on a copy of ``state``.

    ``plan``, if given, is executed between the transaction pass and the end
    of block commit, exactly where the engine clears the books.
    """
    st = state.copy()
    reasons = sequential_filter(txs, state)
    refunds = []
    creations = []
    seq_high: dict[int, int] = {}
    for t, why in zip(txs, reasons):
        if why is not None:
            continue
        op = t.op
        acct = st.accounts[t.account]
        seq_high[t.account] = max(seq_high.get(t.account, 0), t.seq)
        for a, v in _spend(t).items():
            acct.available[a] = acct.available.get(a, 0) - v
        if isinstance(op, Payment):
            dest = st.accounts[op.dest]
            dest.available[op.asset] = dest.available.get(op.asset, 0) + op.amount
            st.burned[op.asset] += t.fee
        elif isinstance(op, CreateOffer):
            acct.locked[op.sell] = acct.locked.get(op.sell, 0) + op.endowment
            st.burned[op.sell] += t.fee
            st.books.add_offer(t.offer())
        elif isinstance(op, CancelOffer):
            st.burned[op.sell] += t.fee
            refunds.append((t.account, op.sell, st.books.cancel((op.sell, op.buy), op.limit_price_raw, t.cancelled_id())))
        else:
            st.burned[NATIVE_ASSET] += t.fee
            creations.append((op.new_id, op.key))
    if plan is not None:
        execute_plan(st, plan)
    for acct_id, asset, amount in refunds:
        acct = st.accounts[acct_id]
        acct.locked[asset] -= amount
        acct.available[asset] = acct.available.get(asset, 0) + amount
    for acct_id, high in seq_high.items():
        st.accounts[acct_id].seq_base = max(st.accounts[acct_id].seq_base, high)
    for new_id, key in sorted(creations):
        st.accounts[new_id] = Account(key)
    for acct in st.accounts.values():
        for d in (acct.available, acct.locked):
            for a in [a for a, v in d.items() if v == 0]:
                del d[a]
    st.books.compact()
    st.height += 1
    for acct_id in st.accounts:
        st.touch(acct_id)
    st.refresh_roots()
    return st


# --- decomposition ---------------------------------------------------------------------


def decomposition_check(
    offers: Sequence[Offer | RawOffer],
    n_assets: int,
    anchors: Mapping[int, int],
    params: ApproxParams,
    core_prices: Sequence[int],
    stock_scale: Mapping[int, int] | None = None,
) -> bool:
    """Compose independent sub-market solutions and check them on the full market.

    ``core_prices`` are clearing prices for the pricing assets (indexed by
    asset id, stock entries ignored).  Each stock is solved against its
    anchor with :func:`brute_equilibrium`; ``stock_scale`` multiplies a
    stock market's prices before composition, which must not matter.
    """
    raw = _raw(offers)
    prices = list(core_prices)
    for s, a in anchors.items():
        sub = [(0 if o[0] == s else 1, 0 if o[1] == s else 1, o[2], o[3]) for o in raw if {o[0], o[1]} == {s, a}]
        eq = _equilibrium2(sub, params)
        k = (stock_scale or {}).get(s, 1)
        rs, ra = eq.prices[0] * k, eq.prices[1] * k
        prices[s] = min(MAX_PRICE_RAW, max(MIN_PRICE_RAW, int(Fraction(rs, ra) * prices[a])))
    curves = SupplyCurves.from_offers(n_assets, [Offer(o[0], o[1], o[3], Price(o[2]), OfferId(i, i + 1)) for i, o in enumerate(raw)])
    if not feasibility_probe(prices, curves, params):
        return False
    plan = solve_clearing(prices, curves, params)
    return all(d <= 0 for d in payout_deficits(plan.amounts, prices, params))

