"""Throughput and convergence measurements shared by the CLI and the test suite."""

from __future__ import annotations

import csv
import io
import statistics
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass

from .demand import SupplyCurves
from .model import ApproxParams
from .tatonnement import SolverConfig, run
from .transactions import CreateOffer, Transaction
from .txengine import BlockState, TxBatch, apply_phase1, filter_block, finish_block
from .workload import PAYMENTS_ONLY, MarketModel, Mix, Workload


@dataclass
class ThroughputRow:
    threads: int
    backend: str
    txs: int
    kept: int
    seconds: float
    tps: float


def payment_workload(txs: int, accounts: int = 10_000, n_assets: int = 4, seed: int = 0) -> tuple[BlockState, list[Transaction]]:
    # the generator caps each account at 60 transactions per block
    accounts = max(accounts, txs // 50 + 1)
    model = MarketModel(n_assets=n_assets, account_count=accounts, mix=PAYMENTS_ONLY, seed=seed)
    state = BlockState.genesis(n_assets, model.genesis_funding())
    return state, Workload(model).next_block(txs)


def measure_throughput(state: BlockState, txs: Sequence[Transaction], threads: int, backend: str = "thread") -> ThroughputRow:
    """Filter, apply and commit one block on a copy of ``state``."""
    st = state.copy()
    batch = TxBatch(txs)
    _ = batch.columns
    t0 = time.perf_counter()
    filt = filter_block(batch, st, threads)
    pending = apply_phase1(filt.kept, st, threads, backend)
    finish_block(st, pending)
    dt = time.perf_counter() - t0
    return ThroughputRow(threads, backend, len(txs), len(filt.kept), dt, len(txs) / dt if dt else float("inf"))


@dataclass
class ConvergenceRow:
    offers: int
    assets: int
    trial: int
    iterations: int
    converged: bool
    seconds: float


def offer_curves(n_assets: int, offers: int, seed: int) -> SupplyCurves:
    model = MarketModel(n_assets=n_assets, account_count=max(100, offers // 40 + 1), mix=Mix(1.0, 0.0, 0.0, 0.0), seed=seed)
    txs = Workload(model).next_block(offers)
    return SupplyCurves.from_offers(n_assets, [t.offer() for t in txs if isinstance(t.op, CreateOffer)])


def measure_convergence(offers: int, n_assets: int, trials: int, params: ApproxParams, max_iters: int = 5000, seed: int = 0) -> list[ConvergenceRow]:
    rows = []
    for trial in range(trials):
        curves = offer_curves(n_assets, offers, seed * 1000 + trial)
        res = run(SolverConfig(params=params, timeout=None, max_iters=max_iters), curves)
        rows.append(ConvergenceRow(offers, n_assets, trial, res.iterations, res.converged, res.elapsed))
    return rows


def median_iterations(rows: Sequence[ConvergenceRow]) -> float:
    return statistics.median(r.iterations for r in rows)


def to_csv(rows: Sequence) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(asdict(rows[0])), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return buf.getvalue()
