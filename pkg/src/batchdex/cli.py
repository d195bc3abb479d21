"""Command-line entry point: ``batchdex {gen,solve,run,bench,verify}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .clearing import solve_clearing
from .demand import SupplyCurves
from .errors import BatchDexError, ValidationError
from .fixedpoint import ONE
from .model import ApproxParams
from .pipeline import MODE_ASSISTED, MODE_FILTER, ZERO_HASH, BlockLog, Chain, Node, NodeConfig, validate
from .tatonnement import SolverConfig, run_multi, unrealized_utility_ratio
from .transactions import CreateOffer, read_batch
from .txengine import BlockState
from .workload import PAYMENTS_ONLY, MarketModel, Mix, VolatilityModel, WorkloadFile, make_workload

GENESIS_FILE = "genesis.bdxw"


def _env_threads() -> int:
    try:
        return max(1, int(os.environ.get("BATCHDEX_THREADS", "1")))
    except ValueError:
        return 1


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eps-log2", type=int, default=15, help="commission is 2**-N (default 15)")
    p.add_argument("--zero-eps", action="store_true", help="no commission; clear by exact max circulation")
    p.add_argument("--mu-log2", type=int, default=10, help="smoothing band is 2**-N (default 10)")
    p.add_argument("--step-log2", type=_int_list, default=[13], help="comma-separated initial step sizes, one solver per entry")
    p.add_argument("--max-iters", type=int, default=3000)
    p.add_argument("--race", action="store_true", help="race solvers on threads with a wall-clock timeout instead of the deterministic pick")
    p.add_argument("--timeout", type=float, default=2.0, help="per-solver timeout in seconds when racing")


def _params(args) -> ApproxParams:
    return ApproxParams(None if args.zero_eps else args.eps_log2, args.mu_log2)


def _configs(args, params: ApproxParams) -> list[SolverConfig]:
    timeout = args.timeout if args.race else None
    return [SolverConfig(step_log2=s, params=params, max_iters=args.max_iters, timeout=timeout) for s in args.step_log2]


def _add_market(p: argparse.ArgumentParser) -> None:
    p.add_argument("--assets", type=int, default=20)
    p.add_argument("--accounts", type=int, default=1000)
    p.add_argument("--blocks", type=int, default=10)
    p.add_argument("--block-size", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", choices=["default", "payments"], default="default")
    p.add_argument("--volatile", action="store_true", help="redraw volume weights and shock prices every block")


def _model(args) -> MarketModel:
    mix = PAYMENTS_ONLY if args.mix == "payments" else Mix()
    return MarketModel(n_assets=args.assets, account_count=args.accounts, mix=mix, seed=args.seed)


def _workload(args) -> WorkloadFile:
    if getattr(args, "workload", None):
        return WorkloadFile.load(args.workload)
    vol = VolatilityModel(0.3, 0.05) if args.volatile else None
    return make_workload(_model(args), args.blocks, args.block_size, vol)


def _genesis(wl: WorkloadFile) -> BlockState:
    return BlockState.genesis(len(wl.registry), wl.funding, wl.registry)


# --- commands ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    wl = _workload(args)
    wl.save(args.out)
    print(f"wrote {args.out}: {len(wl.registry)} assets, {len(wl.funding)} accounts, {len(wl.blocks)} blocks")
    return 0


def cmd_solve(args) -> int:
    txs = read_batch(args.batch)
    offers = [t.offer() for t in txs if isinstance(t.op, CreateOffer)]
    n = args.assets or (max((max(o.sell, o.buy) for o in offers), default=1) + 1)
    params = _params(args)
    curves = SupplyCurves.from_offers(n, offers)
    res = run_multi(_configs(args, params), curves, deterministic=not args.race)
    plan = solve_clearing(res.prices, curves, params)
    util = unrealized_utility_ratio(res.prices, curves, plan.amounts)
    out = {
        "converged": res.converged,
        "iterations": res.iterations,
        "prices": [p / ONE for p in res.prices],
        "prices_raw": list(res.prices),
        "trades": [{"sell": a, "buy": b, "amount": x} for (a, b), x in sorted(plan.amounts.items())],
        "mu_guaranteed": plan.lower_met,
        "utility_ratio": None if util.ratio is None else float(util.ratio),
    }
    if args.json:
        print(json.dumps(out, indent=2))
    else:
        print(f"converged {res.converged} after {res.iterations} iterations; mu guaranteed {plan.lower_met}")
        for i, p in enumerate(res.prices):
            print(f"price {i} {p / ONE:.9g}")
        for (a, b), x in sorted(plan.amounts.items()):
            print(f"trade {a}->{b} {x}")
        print(f"unrealized/realized utility {out['utility_ratio']}")
    return 0


def cmd_run(args) -> int:
    wl = _workload(args)
    params = _params(args)
    cfg = NodeConfig(
        params=params,
        solver_configs=_configs(args, params),
        deterministic=not args.race,
        threads=args.threads,
        backend=args.backend,
        mode=MODE_ASSISTED if args.mode == "assisted" else MODE_FILTER,
    )
    state = _genesis(wl)
    chain = None
    if args.chain_dir:
        d = Path(args.chain_dir)
        d.mkdir(parents=True, exist_ok=True)
        WorkloadFile(wl.registry, wl.funding, []).save(d / GENESIS_FILE)
        chain = Chain(state, d, cfg, commit_every=args.commit_every)
        node = chain.node
    else:
        node = Node(state, cfg)
    print("height,txs,kept,iterations,converged,mu_guaranteed,seconds")
    for txs in wl.blocks:
        if chain is not None:
            chain.extend(txs)
        else:
            node.propose(txs)
        s = node.history[-1]
        print(f"{s.height},{s.txs},{s.kept},{s.solver.iterations},{int(s.solver.converged)},{int(s.plan.lower_met)},{s.seconds:.4f}")
    if chain is not None:
        chain.close()
    return 0


def cmd_bench(args) -> int:
    from .bench import measure_convergence, measure_throughput, payment_workload, to_csv

    if args.kind == "throughput":
        state, txs = payment_workload(args.txs, seed=args.seed)
        rows = [measure_throughput(state, txs, t, args.backend) for t in args.threads]
    else:
        params = ApproxParams(args.eps_log2, args.mu_log2)
        rows = []
        for n in args.offers:
            rows += measure_convergence(n, args.assets, args.trials, params, seed=args.seed)
    sys.stdout.write(to_csv(rows))
    return 0


def cmd_verify(args) -> int:
    d = Path(args.chain_dir)
    genesis = Path(args.genesis) if args.genesis else d / GENESIS_FILE
    try:
        state = _genesis(WorkloadFile.load(genesis))
        blocks = BlockLog(d / "blocks.log").read()
    except (OSError, BatchDexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    prev = ZERO_HASH
    for b in blocks:
        try:
            validate(b, state, prev, threads=args.threads)
        except ValidationError as exc:
            print(f"block {b.header.height}: {exc.reason}: {exc.detail}")
            return 1
        prev = b.header.hash()
    print(f"ok: {len(blocks)} blocks, head {prev.hex()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="batchdex", description="Batch-clearing exchange engine")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a workload file")
    _add_market(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="solve prices for one batch of offers")
    s.add_argument("batch", help="transaction batch file; CreateOffer entries are used")
    s.add_argument("--assets", type=int, default=0, help="asset count (default: inferred)")
    s.add_argument("--json", action="store_true")
    _add_params(s)
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("run", help="drive the single-node pipeline")
    _add_market(r)
    _add_params(r)
    r.add_argument("--workload", help="workload file (default: generate from the market flags)")
    r.add_argument("--threads", type=int, default=_env_threads())
    r.add_argument("--backend", choices=["thread", "process"], default="thread")
    r.add_argument("--mode", choices=["filter", "assisted"], default="filter")
    r.add_argument("--chain-dir", help="persist the block log and snapshots here")
    r.add_argument("--commit-every", type=int, default=5)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="CSV throughput or convergence measurements")
    b.add_argument("--kind", choices=["throughput", "convergence"], default="throughput")
    b.add_argument("--threads", type=_int_list, default=[_env_threads()])
    b.add_argument("--backend", choices=["thread", "process"], default="thread")
    b.add_argument("--txs", type=int, default=100_000)
    b.add_argument("--offers", type=_int_list, default=[1000, 10000])
    b.add_argument("--assets", type=int, default=50)
    b.add_argument("--trials", type=int, default=3)
    b.add_argument("--eps-log2", type=int, default=15)
    b.add_argument("--mu-log2", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="replay a chain directory against its headers")
    v.add_argument("chain_dir")
    v.add_argument("--genesis", help=f"workload file with the genesis state (default: CHAIN_DIR/{GENESIS_FILE})")
    v.add_argument("--threads", type=int, default=_env_threads())
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BatchDexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
