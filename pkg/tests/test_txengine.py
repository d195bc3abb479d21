from __future__ import annotations

import random
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from batchdex.clearing import solve_clearing
from batchdex.demand import SupplyCurves
from batchdex.errors import ConservationViolation
from batchdex.fixedpoint import ONE
from batchdex.model import ApproxParams, AssetRegistry
from batchdex.oracle import sequential_filter, sequential_reference_apply
from batchdex.pipeline import Node, NodeConfig
from batchdex.transactions import CancelOffer, CreateAccount, CreateOffer, Payment, Transaction
from batchdex.txengine import (
    ACCOUNT_EXISTS,
    BAD_OP,
    BAD_SIGNATURE,
    DOUBLE_CANCEL,
    DUP_CREATE,
    DUP_SEQ,
    OVERDRAFT,
    SEQ_CONFLICT,
    SEQ_WINDOW_REASON,
    UNKNOWN_ACCOUNT,
    UNKNOWN_DESTINATION,
    UNKNOWN_OFFER,
    BlockState,
    SequenceBitmap,
    TxBatch,
    apply_phase1,
    compute_effects,
    execute_plan,
    filter_block,
    finish_block,
    select_assisted,
)
from batchdex.workload import MarketModel, Mix, Workload

from conftest import funded_state


def pay(src, seq, dest, amount, asset=0, fee=1, sig=b""):
    return Transaction(src, seq, fee, Payment(dest, asset, amount), sig)


def offer(acct, seq, sell, buy, endow, raw=ONE, fee=1):
    return Transaction(acct, seq, fee, CreateOffer(sell, buy, endow, raw))


def reasons(result):
    return {(t.account, t.seq, t.kind): r for t, r in result.removed}


def mixed_block(seed: int, size: int, accounts: int = 60, funding: int = 400_000, n_assets: int = 4):
    """A genesis state and one random block with overdrafts, cancels and account creations."""
    model = MarketModel(n_assets=n_assets, account_count=accounts, funding=funding, seed=seed, mix=Mix(0.7, 0.1, 0.15, 0.05))
    state = BlockState.genesis(n_assets, model.genesis_funding())
    w = Workload(model)
    node = Node(state, NodeConfig(max_iters=1500))
    node.propose(w.next_block(size // 2))
    return node.state, w.next_block(size)


def run_block(state: BlockState, txs, threads: int = 1, backend: str = "thread") -> BlockState:
    st_ = state.copy()
    Node(st_, NodeConfig(threads=threads, backend=backend, max_iters=1500)).propose(txs)
    return st_


# --- filter ----------------------------------------------------------------------------


def test_two_overspending_payments_both_removed():
    state = BlockState.genesis(2, {1: {0: 100}, 2: {0: 0}})
    res = filter_block([pay(1, 1, 2, 60, fee=0), pay(1, 2, 2, 60, fee=0)], state)
    assert res.kept == [] and {r for _, r in res.removed} == {OVERDRAFT}


def test_duplicate_account_creation_removes_both():
    state = funded_state()
    txs = [Transaction(1, 1, 1, CreateAccount(42, b"a")), Transaction(2, 1, 1, CreateAccount(42, b"b"))]
    res = filter_block(txs, state)
    assert res.kept == [] and {r for _, r in res.removed} == {DUP_CREATE}


def test_filter_reason_codes():
    state = funded_state(accounts=10, balance=1000)
    txs = [
        pay(99, 1, 2, 1),  # unknown account
        pay(1, 1, 2, 1, sig=b"x" * 65),  # signature too long
        pay(2, 65, 3, 1),  # outside the window
        pay(3, 1, 4, 0),  # zero amount
        pay(4, 1, 77, 1),  # unknown destination
        Transaction(5, 1, 1, CreateAccount(6, b"k")),  # already exists
        Transaction(6, 1, 1, CancelOffer(0, 1, ONE, 9)),  # no such offer
        pay(7, 1, 1, 1), pay(7, 1, 2, 1),  # same sequence number
        pay(8, 1, 1, 2000),  # overdraft
        offer(9, 1, 0, 0, 10),  # sells and buys the same asset
    ]
    got = reasons(filter_block(txs, state))
    assert got == {
        (99, 1, 4): UNKNOWN_ACCOUNT,
        (1, 1, 4): BAD_SIGNATURE,
        (2, 65, 4): SEQ_WINDOW_REASON,
        (3, 1, 4): BAD_OP,
        (4, 1, 4): UNKNOWN_DESTINATION,
        (5, 1, 1): ACCOUNT_EXISTS,
        (6, 1, 3): UNKNOWN_OFFER,
        (7, 1, 4): DUP_SEQ,
        (8, 1, 4): OVERDRAFT,
        (9, 1, 2): BAD_OP,
    }


def test_double_cancel_removes_account():
    state = funded_state()
    txs = [offer(1, 1, 0, 1, 100, raw=4 * ONE)]
    pending = apply_phase1(filter_block(txs, state).kept, state)
    finish_block(state, pending)
    cancels = [Transaction(1, 2, 1, CancelOffer(0, 1, 4 * ONE, 1)), Transaction(1, 3, 1, CancelOffer(0, 1, 4 * ONE, 1)), pay(1, 4, 2, 5)]
    res = filter_block(cancels, state)
    assert res.kept == [] and {r for _, r in res.removed} == {DOUBLE_CANCEL}


def test_signature_hook_is_consulted():
    state = funded_state()
    txs = [pay(1, 1, 2, 5), pay(2, 1, 1, 5, sig=b"bad")]
    res = filter_block(txs, state, signature_hook=lambda t, key: t.signature != b"bad")
    assert res.kept == [txs[0]] and res.removed[0][1] == BAD_SIGNATURE


def test_stock_offer_against_non_anchor_rejected():
    reg = AssetRegistry.parse("USD\nEUR\nACME anchor=USD\n")
    state = BlockState.genesis(3, {1: {0: 10**6, 1: 10**6, 2: 10**6}}, reg)
    txs = [offer(1, 1, 2, 1, 10), offer(1, 2, 2, 0, 10)]
    got = reasons(filter_block(txs, state))
    assert got == {(1, 1, 2): BAD_OP}
    # the account survives because a structurally bad transaction is dropped on its own
    assert len(filter_block(txs, state).kept) == 1


@pytest.mark.parametrize("seed", range(4))
def test_filter_matches_sequential_reference(seed):
    state, txs = mixed_block(seed, 2000)
    r = random.Random(seed)
    txs = txs + [txs[r.randrange(len(txs))] for _ in range(len(txs) // 5)]
    expected = sequential_filter(txs, state)
    for threads in (1, 4):
        res = filter_block(txs, state, threads)
        got = {id(t): why for t, why in res.removed}
        assert [got.get(id(t)) for t in txs] == expected


@given(st.integers(0, 10_000))
def test_filter_is_order_independent(seed):
    state, txs = mixed_block(seed % 5, 300)
    r = random.Random(seed)
    shuffled = txs[:]
    r.shuffle(shuffled)
    key = lambda res: sorted(t.encode() for t in res.kept)
    assert key(filter_block(txs, state)) == key(filter_block(shuffled, state))


# --- phase 1 ----------------------------------------------------------------------------


def test_payment_effects():
    state = funded_state(n_assets=2, balance=1000)
    pending = apply_phase1([pay(1, 1, 2, 10, fee=3)], state)
    assert state.accounts[1].available[0] == 1000 - 13
    assert state.accounts[2].available[0] == 1010
    assert state.burned[0] == 3
    finish_block(state, pending)
    assert state.accounts[1].seq_base == 1
    state.audit()


def test_offer_locks_endowment():
    state = funded_state(n_assets=2, balance=1000)
    pending = apply_phase1([offer(1, 1, 1, 0, 400, raw=8 * ONE, fee=1)], state)
    acct = state.accounts[1]
    assert acct.available[1] == 599 and acct.locked[1] == 400
    finish_block(state, pending)
    state.audit()


def test_cancel_refunds_at_end_of_block():
    state = funded_state(n_assets=2, balance=1000)
    finish_block(state, apply_phase1([offer(1, 1, 1, 0, 400, raw=8 * ONE, fee=0)], state))
    pending = apply_phase1([Transaction(1, 2, 2, CancelOffer(1, 0, 8 * ONE, 1))], state)
    assert state.accounts[1].locked[1] == 400
    finish_block(state, pending)
    assert state.accounts[1].available[1] == 998 and 1 not in state.accounts[1].locked
    state.audit()


def test_created_account_appears_at_end_of_block():
    state = funded_state()
    pending = apply_phase1([Transaction(1, 1, 1, CreateAccount(500, b"key"))], state)
    assert 500 not in state.accounts
    finish_block(state, pending)
    assert state.accounts[500].key == b"key"


def test_effects_independent_of_chunking():
    _, txs = mixed_block(3, 1000)
    base = compute_effects(txs, 1)
    for threads in (2, 4, 16):
        eff = compute_effects(txs, threads)
        assert {k: v for k, v in eff.avail.items() if v} == {k: v for k, v in base.avail.items() if v}
        assert dict(eff.locked) == dict(base.locked)
        assert sorted(eff.seqs) == sorted(base.seqs)


# --- whole blocks -----------------------------------------------------------------------


def test_payments_only_block_leaves_books_alone():
    state = funded_state()
    before = state.books.root_hash()
    st_ = run_block(state, [pay(1, 1, 2, 5), pay(3, 1, 4, 7)])
    assert st_.books.root_hash() == before and st_.height == 1


def test_crossing_offers_execute_in_their_block():
    state = funded_state(n_assets=2)
    txs = [offer(1, 1, 0, 1, 1000, raw=ONE >> 1), offer(2, 1, 1, 0, 1000, raw=ONE >> 1)]
    node = Node(state, NodeConfig())
    node.propose(txs)
    # both limits are far below the clearing rate of 1, so neither offer rests
    assert list(state.books.iter_offers()) == []
    assert node.history[-1].report.executions


@pytest.mark.parametrize("threads", [1, 4, 16])
def test_thread_count_does_not_change_root(threads):
    state, txs = mixed_block(7, 4000, accounts=100)
    assert run_block(state, txs, threads).state_root() == run_block(state, txs, 1).state_root()


def test_process_backend_matches_threads():
    state, txs = mixed_block(8, 1500)
    assert run_block(state, txs, 2, "process").state_root() == run_block(state, txs, 2).state_root()


@given(st.integers(0, 10_000))
def test_block_result_is_order_independent(seed):
    state, txs = mixed_block(seed % 3, 400)
    r = random.Random(seed)
    perm = txs[:]
    r.shuffle(perm)
    a = run_block(state, txs)
    b = run_block(state, perm, 4)
    assert a.state_root() == b.state_root() and a.books.root_hash() == b.books.root_hash()


@pytest.mark.parametrize("seed", range(3))
def test_engine_matches_sequential_reference(seed):
    state, txs = mixed_block(seed, 1500)
    engine = state.copy()
    filt = filter_block(txs, engine, 4)
    pending = apply_phase1(filt.kept, engine, 4)
    curves = SupplyCurves.from_books(engine.books)
    params = ApproxParams()
    plan = solve_clearing([ONE] * engine.n_assets, curves, params)
    execute_plan(engine, plan)
    finish_block(engine, pending)
    ref = sequential_reference_apply(txs, state, plan)
    assert engine.state_root() == ref.state_root()
    assert engine.books.root_hash() == ref.books.root_hash()
    engine.audit()


def test_audit_detects_tampering():
    state, txs = mixed_block(1, 500)
    st_ = run_block(state, txs)
    st_.audit()
    st_.accounts[0].available[0] = st_.accounts[0].available.get(0, 0) + 1
    with pytest.raises(ConservationViolation):
        st_.audit()


def test_no_overdraft_after_blocks():
    state, txs = mixed_block(2, 3000, funding=50_000)
    st_ = run_block(state, txs)
    assert all(v >= 0 for a in st_.accounts.values() for v in a.available.values())
    st_.audit()


# --- proposer-assisted selection ---------------------------------------------------------


def test_assisted_mode_keeps_solvent_prefix():
    state = BlockState.genesis(2, {1: {0: 100}, 2: {0: 0}})
    txs = [pay(1, 3, 2, 60, fee=0), pay(1, 2, 2, 60, fee=0), pay(1, 1, 2, 60, fee=0), pay(1, 1, 2, 5, fee=0)]
    res = select_assisted(txs, state)
    # (account, seq, encoding) order: the 5-unit payment wins seq 1, seq 2 fits, seq 3 would overdraw
    assert [(t.seq, t.op.amount) for t in res.kept] == [(1, 5), (2, 60)]
    assert sorted(r for _, r in res.removed) == [OVERDRAFT, SEQ_CONFLICT]


def test_assisted_block_never_overdraws():
    state, txs = mixed_block(4, 2000, funding=50_000)
    st_ = state.copy()
    Node(st_, NodeConfig(mode="assisted", max_iters=1500)).propose(txs)
    assert all(v >= 0 for a in st_.accounts.values() for v in a.available.values())
    st_.audit()


# --- sequence window ----------------------------------------------------------------------


def test_reserve_seq_window():
    bm = SequenceBitmap()
    assert bm.reserve_seq(1, 10, 11)
    assert not bm.reserve_seq(1, 10, 11)
    assert bm.reserve_seq(1, 10, 74)
    assert not bm.reserve_seq(1, 10, 75)
    assert not bm.reserve_seq(1, 10, 10)
    assert bm.highest(1, 10) == 74


def test_reserve_seq_concurrent_single_winner():
    for _ in range(50):
        bm = SequenceBitmap()
        wins = []
        barrier = threading.Barrier(8)

        def claim():
            barrier.wait()
            wins.append(bm.reserve_seq(7, 0, 3))

        ts = [threading.Thread(target=claim) for _ in range(8)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert wins.count(True) == 1


def test_batch_columns_cached():
    b = TxBatch([pay(1, 1, 2, 3)])
    assert b.columns is b.columns and len(b) == 1
