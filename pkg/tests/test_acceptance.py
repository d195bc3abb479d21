"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary by ``conftest.py``.  Blocks
executed by the chain-building criteria are also fed to a shared auditor that
backs the conservation, limit-price and partial-fill criteria.
"""

from __future__ import annotations

import math
import os
import random
import signal
import statistics
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import pytest

from batchdex.bench import measure_convergence, measure_throughput, median_iterations, payment_workload
from batchdex.clearing import PairBounds, solve_clearing, solve_max_circulation
from batchdex.demand import SupplyCurves
from batchdex.fixedpoint import MAX_PRICE_RAW, MIN_PRICE_RAW, ONE, RADIX
from batchdex.model import ApproxParams, AssetRegistry
from batchdex.oracle import brute_equilibrium, naive_demand, rational_lp, sequential_filter
from batchdex.pipeline import MODE_ASSISTED, ZERO_HASH, Node, NodeConfig, recover, replay
from batchdex.tatonnement import SolverConfig, run
from batchdex.txengine import BlockState, filter_block
from batchdex.workload import MarketModel, Mix, VolatilityModel, Workload, gen_robustness_series, make_workload

from conftest import key_price, random_offers, record

PARAMS = ApproxParams(15, 10)
MU = Fraction(1, 1 << 10)
FAULT_TAGS = [f"{f}:{p}" for f in ("accounts", "books", "manifest") for p in ("partial", "before-rename", "after-rename")]


# --- block auditor -------------------------------------------------------------------

AUDIT: dict[str, list | int] = {"blocks": 0, "executions": 0, "mu_checked": 0, "c3": [], "c4": [], "c6": []}


def audit_block(node: Node) -> None:
    """Check the last block of ``node`` against the conservation, limit and partial-fill rules."""
    stats = node.history[-1]
    plan, rep = stats.plan, stats.report
    p = plan.prices
    where = f"height {stats.height}"
    AUDIT["blocks"] += 1
    AUDIT["executions"] += len(rep.executions)
    volume = sum(e.sold * p[e.sell] for e in rep.executions)
    eps_volume = Fraction(0) if plan.eps_log2 is None else Fraction(volume, 1 << plan.eps_log2)
    count = len(rep.executions)
    for a in range(len(p)):
        surplus = rep.collected[a] - rep.paid[a]
        if surplus < 0 or surplus * p[a] > eps_volume + count * p[a]:
            AUDIT["c3"].append(f"{where} asset {a}: surplus {surplus}")
    for e in rep.executions:
        if e.limit_raw * p[e.buy] > p[e.sell] << RADIX:
            AUDIT["c4"].append(f"{where} {e.owner} executed above its limit")
    for pair, k in rep.partials_per_pair().items():
        if k > 1:
            AUDIT["c6"].append(f"{where} pair {pair}: {k} partial executions")
    if plan.lp_feasible:
        m = plan.mu_log2
        AUDIT["mu_checked"] += 1
        for o in node.state.books.iter_offers():
            # limit < (1 - mu) * p_sell / p_buy must have traded in full
            if (o.limit_price.raw * p[o.buy]) << m < ((1 << m) - 1) * (p[o.sell] << RADIX):
                AUDIT["c4"].append(f"{where} {o.owner} left unexecuted below (1-mu) of the rate")


def audited_chain(model: MarketModel, blocks: int, size: int, config: NodeConfig | None = None,
                  volatility: VolatilityModel | None = None) -> Node:
    state = BlockState.genesis(model.n_assets, model.genesis_funding(), model.asset_registry())
    node = Node(state, config or NodeConfig())
    w = Workload(model, volatility)
    for _ in range(blocks):
        node.propose(w.next_block(size))
        audit_block(node)
    return node


# --- 1 ---------------------------------------------------------------------------------


def test_c01_demand_matches_naive_oracle():
    rng = random.Random(101)
    t0 = time.perf_counter()
    mismatches = 0
    largest = 0
    for _ in range(1000):
        n = rng.randint(2, 5)
        count = int(10 ** rng.uniform(0, 4))
        largest = max(largest, count)
        offers = random_offers(rng, n, count, max_endowment=rng.choice([10**3, 10**6, 10**12]))
        prices = [rng.randint(ONE // 8, 8 * ONE) for _ in range(n)]
        mu = rng.choice([5, 10, 15, 20])
        if SupplyCurves.from_offers(n, offers).demand_query(prices, mu) != naive_demand(offers, prices, mu, n):
            mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 60
    record(1, ok, f"{mismatches} mismatches over 1000 instances (up to {largest} offers) in {dt:.1f}s")
    assert ok


# --- 2 ---------------------------------------------------------------------------------


def test_c02_equilibrium_matches_brute_force():
    rng = random.Random(202)
    t0 = time.perf_counter()
    failures = []
    worst = Fraction(0)
    for n, count in ((2, 200), (3, 50)):
        for i in range(count):
            offers = random_offers(rng, n, rng.randint(5, 60))
            curves = SupplyCurves.from_offers(n, offers)
            res = run(SolverConfig(params=PARAMS, timeout=None, max_iters=20_000), curves)
            plan = solve_clearing(res.prices, curves, PARAMS)
            eq = brute_equilibrium(offers, n, PARAMS)
            d = eq.distance(res.prices)
            worst = max(worst, d)
            if not (res.converged and plan.lp_feasible and d <= MU):
                failures.append((n, i, res.converged, float(d / MU)))
    dt = time.perf_counter() - t0
    ok = not failures and dt < 300
    record(2, ok, f"{len(failures)} of 250 instances off; worst gap {float(worst / MU):.3f} mu; {dt:.0f}s")
    assert ok, failures[:5]


# --- 5 (also feeds the auditor) --------------------------------------------------------


def test_c05_permutations_and_threads_agree():
    model = MarketModel(n_assets=5, account_count=300, seed=505)
    w = Workload(model)
    rng = random.Random(505)
    thread_counts = (1, 4, max(os.cpu_count() or 1, 8))
    base = Node(BlockState.genesis(5, model.genesis_funding(), model.asset_registry()))
    t0 = time.perf_counter()
    split = []
    for height in range(100):
        txs = w.next_block(1000)
        roots = set()
        for _ in range(5):
            perm = txs[:]
            rng.shuffle(perm)
            for threads in thread_counts:
                node = Node(base.state.copy(), NodeConfig(threads=threads))
                node.prev_hash, node.last_prices = base.prev_hash, base.last_prices
                node.propose(perm)
                roots.add((node.state.state_root(), node.state.books.root_hash()))
        base.propose(txs)
        audit_block(base)
        roots.add((base.state.state_root(), base.state.books.root_hash()))
        if len(roots) != 1:
            split.append(height)
    dt = time.perf_counter() - t0
    ok = not split and dt < 600
    record(5, ok, f"100 blocks x 5 orders x threads {thread_counts}: {len(split)} blocks with >1 root; {dt:.0f}s")
    assert ok, split[:5]


# --- 7 ---------------------------------------------------------------------------------


def _connected(n: int, offers) -> bool:
    seen, todo = {0}, [0]
    adj = {a: set() for a in range(n)}
    for o in offers:
        adj[o.sell].add(o.buy)
        adj[o.buy].add(o.sell)
    while todo:
        for b in adj[todo.pop()] - seen:
            seen.add(b)
            todo.append(b)
    return len(seen) == n


def test_c07_rescaling_initial_prices():
    rng = random.Random(707)
    worst = Fraction(0)
    bad = []
    instances = 0
    while instances < 40:
        n = rng.randint(2, 6)
        offers = random_offers(rng, n, rng.randint(100, 400))
        if not _connected(n, offers):
            continue
        instances += 1
        curves = SupplyCurves.from_offers(n, offers)
        p0 = [key_price(rng.uniform(0.25, 4.0)) for _ in range(n)]
        cfg = SolverConfig(params=PARAMS, timeout=None, max_iters=20_000)
        a = run(cfg, curves, p0)
        b = run(cfg, curves, [2 * p for p in p0])
        gap = max(
            abs(Fraction(a.prices[i] * b.prices[j], a.prices[j] * b.prices[i]) - 1)
            for i in range(n)
            for j in range(n)
            if i != j
        )
        worst = max(worst, gap)
        if not (a.converged and b.converged and gap < 2 * MU):
            bad.append((instances, a.converged, b.converged, float(gap / MU)))
    ok = not bad
    record(7, ok, f"{len(bad)} of 40 connected instances off; worst ratio gap {float(worst / MU):.3f} mu (bound 2 mu)")
    assert ok, bad[:5]


# --- 8 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_c08_iterations_fall_with_offer_count():
    medians = []
    for offers in (1_000, 10_000, 100_000):
        rows = measure_convergence(offers, 50, 5, PARAMS, max_iters=5000, seed=8)
        medians.append(median_iterations(rows))
    ok = all(x >= y for x, y in zip(medians, medians[1:]))
    record(8, ok, f"median iterations at 1e3/1e4/1e5 offers: {medians}")
    assert ok


# --- 9 (also feeds the auditor) --------------------------------------------------------


@pytest.mark.slow
def test_c09_robustness_series_utility():
    model = MarketModel(n_assets=20, account_count=1000, seed=909)
    node = Node(BlockState.genesis(20, model.genesis_funding(), model.asset_registry()))
    ratios = []
    for txs in gen_robustness_series(model, 50, 5000):
        node.propose(txs)
        audit_block(node)
        u = node.history[-1].utility
        ratios.append(math.inf if u.infinite else float(u.sort_key))
    mean = statistics.mean(ratios)
    ok = mean <= 0.05
    record(9, ok, f"mean unrealized/realized utility {mean:.4%} (max {max(ratios):.4%}) over 50 blocks")
    assert ok


# --- 10 --------------------------------------------------------------------------------


@pytest.mark.slow
def test_c10_parallel_speedup():
    state, txs = payment_workload(1_000_000)
    rows = {k: measure_throughput(state, txs, k) for k in (1, 2, 4)}
    tps = [rows[k].tps for k in (1, 2, 4)]
    speedup = tps[2] / tps[0]
    ok = speedup >= 2.5 and tps[0] <= tps[1] <= tps[2]
    record(10, ok, f"tps 1/2/4 threads = {tps[0]:.0f}/{tps[1]:.0f}/{tps[2]:.0f}; speedup {speedup:.2f}x "
                   f"on {os.cpu_count()} cpu(s)")
    assert ok


# --- 11 --------------------------------------------------------------------------------


@pytest.mark.slow
def test_c11_filter_matches_reference_and_is_fast():
    model = MarketModel(n_assets=10, account_count=10_000, seed=1111)
    state = BlockState.genesis(10, model.genesis_funding(), model.asset_registry())
    txs = Workload(model).next_block(400_000)
    rng = random.Random(1111)
    # duplicates come from a quarter of the accounts so most accounts stay clean
    pool = [t for t in txs if t.account < model.account_count // 4]
    txs += [rng.choice(pool) for _ in range(100_000)]
    rng.shuffle(txs)
    t0 = time.perf_counter()
    res = filter_block(txs, state, 4)
    dt = time.perf_counter() - t0
    expected = sequential_filter(txs, state)
    got = {id(t): why for t, why in res.removed}
    same = [got.get(id(t)) for t in txs] == expected
    ok = same and dt < 2.0
    record(11, ok, f"{len(txs)} txs, {len(res.kept)} kept, reference match {same}, {dt:.2f}s on 4 threads")
    assert ok


# --- 12 (reference chain feeds the auditor) --------------------------------------------

CHILD = r"""
import os, sys
from pathlib import Path
from batchdex.pipeline import Chain, NodeConfig
from batchdex.txengine import BlockState
from batchdex.workload import WorkloadFile

wl = WorkloadFile.load(sys.argv[1])
tag, target, background = sys.argv[3], int(sys.argv[4]), sys.argv[5] == "1"
hits = {"n": 0}

def fault(where, path):
    if where == tag:
        hits["n"] += 1
        if hits["n"] == target:
            os._exit(137)

state = BlockState.genesis(len(wl.registry), wl.funding, wl.registry)
chain = Chain(state, sys.argv[2], NodeConfig(), commit_every=2, fault=fault, background=background)
print("ready", flush=True)
for txs in wl.blocks:
    chain.extend(txs)
chain.close()
"""


@pytest.mark.slow
def test_c12_crash_recovery(tmp_path):
    model = MarketModel(n_assets=5, account_count=150, seed=1212)
    wl = make_workload(model, 12, 400)
    wl_path = tmp_path / "w.bdxw"
    wl.save(wl_path)
    genesis = BlockState.genesis(5, wl.funding, wl.registry)
    ref = Node(genesis.copy())
    roots, hashes, blocks = [genesis.state_root()], [ZERO_HASH], []
    for txs in wl.blocks:
        blocks.append(ref.propose(txs))
        audit_block(ref)
        roots.append(ref.state.state_root())
        hashes.append(ref.prev_hash)
    rng = random.Random(1212)
    bad, heights = [], []
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    for trial in range(50):
        d = tmp_path / f"t{trial}"
        background = rng.random() < 0.5
        if trial % 2 == 0:
            tag = rng.choice(FAULT_TAGS)
            args = [tag, str(rng.randint(1, 5))]
        else:
            args = ["none", "0"]
        proc = subprocess.Popen([sys.executable, "-c", CHILD, str(wl_path), str(d), *args, "1" if background else "0"],
                                stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, env=env)
        proc.stdout.readline()
        if trial % 2:
            time.sleep(rng.uniform(0.0, 1.5))
            if proc.poll() is None:
                proc.send_signal(signal.SIGKILL)
        proc.wait()
        state, prev = recover(d, genesis)
        h = state.height
        heights.append(h)
        if state.state_root() != roots[h] or prev != hashes[h]:
            bad.append((trial, "recovered state differs", h))
            continue
        final = replay(state, blocks[h:], prev)
        if state.state_root() != roots[-1] or final != hashes[-1]:
            bad.append((trial, "replay diverged", h))
    mid = sum(1 for h in heights if h < len(blocks))
    ok = not bad
    record(12, ok, f"{len(bad)} of 50 crash trials failed to recover; {mid} died before the last block; "
                   f"recovered heights {min(heights)}..{max(heights)}")
    assert ok, bad[:5]


# --- 13 --------------------------------------------------------------------------------


def _random_bounds(rng: random.Random, n: int) -> PairBounds:
    up, lo = {}, {}
    for a in range(n):
        for b in range(n):
            if a != b and rng.random() < 0.6:
                u = rng.randint(1, 10**6)
                up[(a, b)] = u
                if rng.random() < 0.3:
                    lo[(a, b)] = rng.randint(0, u)
    prices = tuple(rng.randint(MIN_PRICE_RAW >> 8, min(MAX_PRICE_RAW, 1 << 40) >> 8) << 8 for _ in range(n))
    return PairBounds(prices, lo, up)


def test_c13_zero_fee_integrality():
    rng = random.Random(1313)
    bad = []
    feasible = 0
    for i in range(500):
        b = _random_bounds(rng, rng.randint(2, 6))
        use_lower = rng.random() < 0.7
        sol = solve_max_circulation(b, use_lower)
        ref = rational_lp(b, None, use_lower)
        if sol.feasible != ref.feasible:
            bad.append((i, "feasibility"))
            continue
        if not sol.feasible:
            continue
        feasible += 1
        if not all(isinstance(v, int) for v in sol.y.values()) or sol.objective != ref.objective:
            bad.append((i, "objective"))
    ok = not bad
    record(13, ok, f"{len(bad)} of 500 instances differ ({feasible} feasible, all integral and exact)")
    assert ok, bad[:5]


# --- 3, 4, 6: the auditor over every executed block ------------------------------------


@pytest.fixture(scope="module")
def audit_series():
    """Extra chains that stress the auditor: plain, fee-free, decomposed, volatile, thinly funded, assisted."""
    audited_chain(MarketModel(n_assets=8, account_count=400, seed=31), 30, 2000)
    audited_chain(MarketModel(n_assets=6, account_count=300, seed=32), 20, 1500, NodeConfig(params=ApproxParams(None, 10)))
    reg = AssetRegistry.parse("USD\nEUR\nGBP\nACME anchor=USD\nINIT anchor=EUR\nCORP anchor=USD\n")
    audited_chain(MarketModel(n_assets=6, account_count=300, registry=reg, seed=33), 20, 1500)
    audited_chain(MarketModel(n_assets=6, account_count=300, mix=Mix(0.9, 0.05, 0.05, 0.0), seed=34), 30, 1500,
                  volatility=VolatilityModel(0.5, 0.2))
    audited_chain(MarketModel(n_assets=5, account_count=300, funding=200_000, seed=35), 20, 1500)
    audited_chain(MarketModel(n_assets=5, account_count=300, seed=36), 20, 1500, NodeConfig(mode=MODE_ASSISTED))
    return AUDIT


def test_c03_conservation_audit(audit_series):
    v = audit_series["c3"]
    ok = not v and audit_series["blocks"] > 0
    record(3, ok, f"{len(v)} violations over {audit_series['blocks']} blocks / {audit_series['executions']} executions")
    assert ok, v[:5]


def test_c04_limit_respect_and_mu_guarantee(audit_series):
    v = audit_series["c4"]
    ok = not v and audit_series["mu_checked"] > 0
    record(4, ok, f"{len(v)} violations; mu-guarantee checked on {audit_series['mu_checked']} of "
                  f"{audit_series['blocks']} blocks (LP with mandatory bounds feasible)")
    assert ok, v[:5]


def test_c06_partial_fill_bound(audit_series):
    v = audit_series["c6"]
    ok = not v
    record(6, ok, f"{len(v)} pairs with more than one partial execution over {audit_series['blocks']} blocks")
    assert ok, v[:5]
