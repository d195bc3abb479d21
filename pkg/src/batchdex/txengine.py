"""Commutative block application.

A block runs in three steps:

1. filter the batch, then apply every kept transaction: debit spends and
   fees, lock offer endowments, claim sequence numbers, mark cancelled offers
   and stage account creations.  Effects are additive, so each worker
   accumulates them locally and the totals are merged at a barrier; the
   result cannot depend on order or thread count.
2. solve prices on the resulting books (done by the caller).
3. execute trades pair by pair, credit payouts and refunds, commit staged
   account changes, advance sequence bases and recompute commitments.

Filtering removes every transaction of an account that overspends any asset
against its block-start balance, reuses a sequence number, or cancels the same
offer twice, plus both transactions whenever two create the same account.
Fees are flat, burned, and denominated in the asset the transaction sells or
sends (asset 0 for account creation).
"""

from __future__ import annotations

import gc
import threading
from collections import defaultdict
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .clearing import ClearingPlan
from .errors import CancelledTwice, ConservationViolation, NotFound
from .fixedpoint import KEY_SHIFT, MAX_KEY_PRICE
from .model import ApproxParams, AssetRegistry, OfferId, key_from_parts
from .orderbook import Execution, MarginalKey, OrderbookSet, Pair, clear_pair, execute_from_marginal_key
from .transactions import (
    KIND_CANCEL_OFFER,
    KIND_CREATE_ACCOUNT,
    KIND_CREATE_OFFER,
    KIND_PAYMENT,
    CancelOffer,
    CreateOffer,
    Payment,
    Transaction,
    deserialize_tx,
    serialize_tx,
)
from .trie import Trie

SEQ_WINDOW = 64
MAX_SIGNATURE = 64
NATIVE_ASSET = 0

# rejection reasons
OK = "ok"
BAD_SIGNATURE = "bad-signature"
UNKNOWN_ACCOUNT = "unknown-account"
SEQ_WINDOW_REASON = "seq-window"
BAD_OP = "bad-op"
UNKNOWN_DESTINATION = "unknown-destination"
UNKNOWN_OFFER = "unknown-offer"
ACCOUNT_EXISTS = "account-exists"
DUP_CREATE = "dup-create"
OVERDRAFT = "overdraft"
DUP_SEQ = "dup-seq"
DOUBLE_CANCEL = "double-cancel"
ACCOUNT_CONFLICT = "account-conflict"
SEQ_CONFLICT = "seq-conflict"

_REASONS = [OK, BAD_SIGNATURE, UNKNOWN_ACCOUNT, SEQ_WINDOW_REASON, BAD_OP, UNKNOWN_DESTINATION, UNKNOWN_OFFER, ACCOUNT_EXISTS, DUP_CREATE, OVERDRAFT, DUP_SEQ, DOUBLE_CANCEL]
_CODE = {r: i for i, r in enumerate(_REASONS)}

SignatureHook = Callable[[Transaction, bytes], bool]


def default_signature_hook(tx: Transaction, key: bytes) -> bool:
    """Accept-all placeholder that only bounds the signature length."""
    return len(tx.signature) <= MAX_SIGNATURE


# --- accounts ------------------------------------------------------------------


@dataclass
class Account:
    key: bytes
    available: dict[int, int] = field(default_factory=dict)
    locked: dict[int, int] = field(default_factory=dict)
    seq_base: int = 0

    def encode(self) -> bytes:
        assets = sorted(a for a in set(self.available) | set(self.locked) if self.available.get(a) or self.locked.get(a))
        parts = [len(self.key).to_bytes(2, "big"), self.key, self.seq_base.to_bytes(8, "big"), len(assets).to_bytes(2, "big")]
        for a in assets:
            parts.append(a.to_bytes(2, "big") + self.available.get(a, 0).to_bytes(8, "big") + self.locked.get(a, 0).to_bytes(8, "big"))
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> Account:
        klen = int.from_bytes(data[:2], "big")
        key = data[2 : 2 + klen]
        off = 2 + klen
        base = int.from_bytes(data[off : off + 8], "big")
        count = int.from_bytes(data[off + 8 : off + 10], "big")
        off += 10
        acct = cls(key, seq_base=base)
        for _ in range(count):
            a = int.from_bytes(data[off : off + 2], "big")
            av = int.from_bytes(data[off + 2 : off + 10], "big")
            lk = int.from_bytes(data[off + 10 : off + 18], "big")
            if av:
                acct.available[a] = av
            if lk:
                acct.locked[a] = lk
            off += 18
        return acct


class SequenceBitmap:
    """Per-account window of consumed sequence offsets above the committed base."""

    def __init__(self) -> None:
        self._bits: dict[int, int] = {}
        self._lock = threading.Lock()

    def reserve_seq(self, account: int, base: int, seq: int) -> bool:
        """Atomically claim ``seq``; false if outside ``(base, base + 64]`` or already taken."""
        off = seq - base
        if not 1 <= off <= SEQ_WINDOW:
            return False
        bit = 1 << (off - 1)
        with self._lock:
            cur = self._bits.get(account, 0)
            if cur & bit:
                return False
            self._bits[account] = cur | bit
        return True

    def highest(self, account: int, base: int) -> int:
        bits = self._bits.get(account, 0)
        return base + bits.bit_length()

    def accounts(self) -> list[int]:
        return sorted(self._bits)

    def clear(self) -> None:
        self._bits.clear()


class BlockState:
    """Balances, books and commitments between blocks."""

    def __init__(self, n_assets: int, registry: AssetRegistry | None = None) -> None:
        self.n_assets = n_assets
        self.registry = registry or AssetRegistry.numbered(n_assets)
        self.accounts: dict[int, Account] = {}
        self.books = OrderbookSet(n_assets)
        self.height = 0
        self.burned = [0] * n_assets
        self.surplus = [0] * n_assets
        self.issued = [0] * n_assets
        self.account_trie = Trie(8)
        self._dirty: set[int] = set()
        self._index: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def genesis(cls, n_assets: int, funding: Mapping[int, Mapping[int, int]], registry: AssetRegistry | None = None) -> BlockState:
        """Accounts ``id -> {asset: balance}``; keys default to the id's bytes."""
        st = cls(n_assets, registry)
        for acct_id in sorted(funding):
            bal = {a: v for a, v in funding[acct_id].items() if v}
            st.accounts[acct_id] = Account(acct_id.to_bytes(8, "big"), dict(bal))
            for a, v in bal.items():
                st.issued[a] += v
            st._dirty.add(acct_id)
        st.refresh_roots()
        return st

    # lookup arrays for the vectorised filter
    def index(self) -> tuple[np.ndarray, np.ndarray]:
        if self._index is None:
            ids = np.array(sorted(self.accounts), dtype=np.uint64)
            bases = np.array([self.accounts[int(i)].seq_base for i in ids], dtype=np.uint64)
            self._index = (ids, bases)
        return self._index

    def touch(self, acct_id: int) -> None:
        self._dirty.add(acct_id)

    def refresh_roots(self) -> None:
        for a in sorted(self._dirty):
            self.account_trie.put(a.to_bytes(8, "big"), self.accounts[a].encode())
        self._dirty.clear()
        self._index = None

    def state_root(self) -> bytes:
        self.refresh_roots()
        return self.account_trie.root_hash()

    def supply(self) -> list[int]:
        """Per-asset total held by accounts, locked in offers, kept by the auctioneer or burned."""
        tot = [0] * self.n_assets
        for acct in self.accounts.values():
            for a, v in acct.available.items():
                tot[a] += v
            for a, v in acct.locked.items():
                tot[a] += v
        return [t + b + s for t, b, s in zip(tot, self.burned, self.surplus)]

    def audit(self) -> None:
        """Check supply conservation, non-negative balances and lock bookkeeping."""
        if self.supply() != self.issued:
            raise ConservationViolation(f"supply {self.supply()} != issued {self.issued}")
        locked = defaultdict(int)
        for o in self.books.iter_offers():
            locked[(o.owner.account, o.sell)] += o.endowment
        for acct_id, acct in self.accounts.items():
            for a, v in acct.available.items():
                if v < 0:
                    raise ConservationViolation(f"account {acct_id} overdrawn in asset {a}")
            for a, v in acct.locked.items():
                if v != locked.get((acct_id, a), 0):
                    raise ConservationViolation(f"account {acct_id} locked {v} of asset {a}, offers hold {locked.get((acct_id, a), 0)}")

    def copy(self) -> BlockState:
        st = BlockState(self.n_assets, self.registry)
        st.accounts = {a: Account(acct.key, dict(acct.available), dict(acct.locked), acct.seq_base) for a, acct in self.accounts.items()}
        st.books = self.books.copy()
        st.height = self.height
        st.burned, st.surplus, st.issued = list(self.burned), list(self.surplus), list(self.issued)
        st.account_trie = self.account_trie.copy()
        st._dirty = set(self._dirty)
        return st


# --- filtering ---------------------------------------------------------------------


@dataclass
class TxColumns:
    """Column view of a batch for vectorised checks."""

    account: np.ndarray
    seq: np.ndarray
    fee: np.ndarray
    kind: np.ndarray
    a1: np.ndarray  # sell asset / payment asset
    a2: np.ndarray  # buy asset
    amount: np.ndarray  # endowment / payment amount
    price: np.ndarray  # limit price raw
    ref: np.ndarray  # dest / new id / cancelled offer seq
    siglen: np.ndarray

    @classmethod
    def from_txs(cls, txs: Sequence[Transaction]) -> TxColumns:
        n = len(txs)
        acc = np.empty(n, np.uint64)
        seq = np.empty(n, np.uint64)
        fee = np.empty(n, np.uint64)
        kind = np.empty(n, np.uint8)
        a1 = np.zeros(n, np.int64)
        a2 = np.zeros(n, np.int64)
        amt = np.zeros(n, np.uint64)
        price = np.zeros(n, np.uint64)
        ref = np.zeros(n, np.uint64)
        sig = np.empty(n, np.int64)
        for i, t in enumerate(txs):
            acc[i] = t.account
            seq[i] = t.seq
            fee[i] = t.fee
            sig[i] = len(t.signature)
            op = t.op
            cls_ = type(op)
            if cls_ is Payment:
                kind[i] = KIND_PAYMENT
                a1[i] = op.asset
                amt[i] = op.amount
                ref[i] = op.dest
            elif cls_ is CreateOffer:
                kind[i] = KIND_CREATE_OFFER
                a1[i] = op.sell
                a2[i] = op.buy
                amt[i] = op.endowment
                price[i] = op.limit_price_raw
            elif cls_ is CancelOffer:
                kind[i] = KIND_CANCEL_OFFER
                a1[i] = op.sell
                a2[i] = op.buy
                price[i] = op.limit_price_raw
                ref[i] = op.offer_seq
            else:
                kind[i] = KIND_CREATE_ACCOUNT
                ref[i] = op.new_id
        return cls(acc, seq, fee, kind, a1, a2, amt, price, ref, sig)


class TxBatch:
    """A block's transactions plus their lazily built column view."""

    def __init__(self, txs: Iterable[Transaction]) -> None:
        self.txs = list(txs)
        self._cols: TxColumns | None = None

    def __len__(self) -> int:
        return len(self.txs)

    @property
    def columns(self) -> TxColumns:
        if self._cols is None:
            self._cols = TxColumns.from_txs(self.txs)
        return self._cols


@dataclass
class FilterResult:
    kept: list[Transaction]
    removed: list[tuple[Transaction, str]]

    def report(self) -> str:
        """One line per removed transaction: ``account seq kind reason``."""
        return "".join(f"{t.account} {t.seq} {t.kind} {r}\n" for t, r in self.removed)


def _isin_sorted(values: np.ndarray, sorted_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(sorted_ids) == 0:
        return np.zeros(len(values), bool), np.zeros(len(values), np.int64)
    pos = np.searchsorted(sorted_ids, values)
    pos_c = np.minimum(pos, len(sorted_ids) - 1)
    return sorted_ids[pos_c] == values, pos_c


def _structural_mask(c: TxColumns, n_assets: int, registry: AssetRegistry | None) -> np.ndarray:
    kind = c.kind
    is_pay = kind == KIND_PAYMENT
    is_offer = kind == KIND_CREATE_OFFER
    is_cancel = kind == KIND_CANCEL_OFFER
    is_create = kind == KIND_CREATE_ACCOUNT
    a1_ok = (c.a1 >= 0) & (c.a1 < n_assets)
    a2_ok = (c.a2 >= 0) & (c.a2 < n_assets) & (c.a2 != c.a1)
    price_ok = (c.price > 0) & ((c.price & np.uint64((1 << KEY_SHIFT) - 1)) == 0) & ((c.price >> np.uint64(KEY_SHIFT)) <= np.uint64(MAX_KEY_PRICE))
    ok = np.zeros(len(kind), bool)
    ok |= is_pay & a1_ok & (c.amount > 0)
    offer_ok = is_offer & a1_ok & a2_ok & price_ok & (c.amount > 0)
    cancel_ok = is_cancel & a1_ok & a2_ok & price_ok
    if registry is not None and registry.anchors:
        anchor = np.full(n_assets, -1, np.int64)
        for s, a in registry.anchors.items():
            anchor[s] = a
        s1 = anchor[np.clip(c.a1, 0, n_assets - 1)]
        s2 = anchor[np.clip(c.a2, 0, n_assets - 1)]
        star_ok = ((s1 < 0) & (s2 < 0)) | (s1 == c.a2) | (s2 == c.a1)
        offer_ok &= star_ok
    ok |= offer_ok | cancel_ok | is_create
    return ok


def filter_block(
    txs: Sequence[Transaction] | TxBatch,
    state: BlockState,
    threads: int = 1,
    signature_hook: SignatureHook | None = None,
) -> FilterResult:
    """Deterministic conflict filter; the kept set does not depend on input order."""
    batch = txs if isinstance(txs, TxBatch) else TxBatch(txs)
    tx_list = batch.txs
    n = len(tx_list)
    if n == 0:
        return FilterResult([], [])
    c = batch.columns
    ids, bases = state.index()
    reason = np.zeros(n, np.uint8)

    def mark(mask: np.ndarray, why: str) -> None:
        reason[(reason == 0) & mask] = _CODE[why]

    # step 1: individually invalid transactions
    known, pos = _isin_sorted(c.account, ids)
    mark(~known, UNKNOWN_ACCOUNT)
    if signature_hook is None:
        mark(c.siglen > MAX_SIGNATURE, BAD_SIGNATURE)
    else:
        bad_sig = np.zeros(n, bool)
        for i in np.flatnonzero(reason == 0):
            t = tx_list[i]
            bad_sig[i] = not signature_hook(t, state.accounts[t.account].key)
        mark(bad_sig, BAD_SIGNATURE)
    base = np.where(known, bases[pos] if len(bases) else 0, 0).astype(np.uint64)
    in_window = (c.seq > base) & (c.seq - base <= np.uint64(SEQ_WINDOW))
    mark(~in_window, SEQ_WINDOW_REASON)
    mark(~_structural_mask(c, state.n_assets, state.registry), BAD_OP)
    is_pay = c.kind == KIND_PAYMENT
    dest_known, _ = _isin_sorted(c.ref, ids)
    mark(is_pay & ~dest_known, UNKNOWN_DESTINATION)
    is_create = c.kind == KIND_CREATE_ACCOUNT
    mark(is_create & dest_known, ACCOUNT_EXISTS)
    is_cancel = c.kind == KIND_CANCEL_OFFER
    for i in np.flatnonzero(is_cancel & (reason == 0)):
        t = tx_list[i]
        op = t.op
        book = state.books.books.get((op.sell, op.buy))
        if book is None or key_from_parts(op.limit_price_raw, t.account, op.offer_seq) not in book:
            reason[i] = _CODE[UNKNOWN_OFFER]

    # step 2a: both creators of a duplicated account id go
    live = reason == 0
    cr = np.flatnonzero(live & is_create)
    if len(cr):
        u, counts = np.unique(c.ref[cr], return_counts=True)
        dup_ids = u[counts > 1]
        if len(dup_ids):
            reason[cr[np.isin(c.ref[cr], dup_ids)]] = _CODE[DUP_CREATE]
    live = reason == 0

    # step 2b: account-level conflicts
    bad_accounts: dict[int, str] = {}
    idx = np.flatnonzero(live)
    if len(idx):
        acc = c.account[idx]
        seq = c.seq[idx]
        order = np.lexsort((seq, acc))
        sa, ss = acc[order], seq[order]
        dup = (sa[1:] == sa[:-1]) & (ss[1:] == ss[:-1])
        for a in np.unique(sa[1:][dup]):
            bad_accounts.setdefault(int(a), DUP_SEQ)
        ci = idx[is_cancel[idx]]
        if len(ci):
            pair_keys = np.stack([c.account[ci], c.ref[ci]], axis=1)
            u, counts = np.unique(pair_keys, axis=0, return_counts=True)
            for a in u[counts > 1][:, 0]:
                bad_accounts.setdefault(int(a), DOUBLE_CANCEL)
        # spends: fees in the fee asset plus payment amounts and offer endowments
        kind = c.kind[idx]
        fee_asset = np.where(kind == KIND_CREATE_ACCOUNT, NATIVE_ASSET, c.a1[idx])
        spend_asset = c.a1[idx]
        spends = np.where((kind == KIND_PAYMENT) | (kind == KIND_CREATE_OFFER), c.amount[idx], 0).astype(np.uint64)
        p = pos[idx].astype(np.int64)
        na = state.n_assets
        keys = np.concatenate([p * na + fee_asset, p * na + spend_asset])
        vals = np.concatenate([c.fee[idx], spends])
        sel = vals > 0
        keys, vals = keys[sel], vals[sel]
        if len(keys):
            order = np.argsort(keys, kind="stable")
            keys, vals = keys[order], vals[order]
            starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
            sums = np.add.reduceat(vals, starts)
            fsums = np.add.reduceat(vals.astype(np.float64), starts)
            ukeys = keys[starts]
            accounts = state.accounts
            for j in range(len(ukeys)):
                k = int(ukeys[j])
                acct_id = int(ids[k // na])
                if acct_id in bad_accounts:
                    continue
                total = int(sums[j])
                if fsums[j] > 2.0**62:
                    s0 = int(starts[j])
                    s1 = int(starts[j + 1]) if j + 1 < len(starts) else len(vals)
                    total = sum(int(v) for v in vals[s0:s1])
                if total > accounts[acct_id].available.get(k % na, 0):
                    bad_accounts[acct_id] = OVERDRAFT
        if bad_accounts:
            bad = np.array(sorted(bad_accounts), dtype=np.uint64)
            hit = idx[np.isin(c.account[idx], bad)]
            for i in hit:
                reason[i] = _CODE[bad_accounts[int(c.account[i])]]

    kept = [tx_list[i] for i in np.flatnonzero(reason == 0).tolist()]
    gone = np.flatnonzero(reason)
    # building a few hundred thousand tuples would otherwise trigger repeated
    # full collections over the live transaction objects
    enabled = gc.isenabled()
    gc.disable()
    try:
        removed = [(tx_list[i], _REASONS[r]) for i, r in zip(gone.tolist(), reason[gone].tolist())]
    finally:
        if enabled:
            gc.enable()
    return FilterResult(kept, removed)


# --- phase 1 -------------------------------------------------------------------------


@dataclass
class LocalEffects:
    """Additive effects of a chunk of transactions."""

    avail: dict[tuple[int, int], int] = field(default_factory=lambda: defaultdict(int))
    locked: dict[tuple[int, int], int] = field(default_factory=lambda: defaultdict(int))
    burned: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    offers: list = field(default_factory=list)
    cancels: list[Transaction] = field(default_factory=list)
    creations: list[tuple[int, bytes]] = field(default_factory=list)
    seqs: list[tuple[int, int]] = field(default_factory=list)

    def merge(self, other: LocalEffects) -> None:
        for k, v in other.avail.items():
            self.avail[k] += v
        for k, v in other.locked.items():
            self.locked[k] += v
        for k, v in other.burned.items():
            self.burned[k] += v
        self.offers += other.offers
        self.cancels += other.cancels
        self.creations += other.creations
        self.seqs += other.seqs


def tx_effects(txs: Iterable[Transaction]) -> LocalEffects:
    eff = LocalEffects()
    avail = eff.avail
    locked = eff.locked
    burned = eff.burned
    for t in txs:
        op = t.op
        a = t.account
        kind = type(op)
        eff.seqs.append((a, t.seq))
        if kind is Payment:
            avail[(a, op.asset)] -= op.amount + t.fee
            avail[(op.dest, op.asset)] += op.amount
            burned[op.asset] += t.fee
        elif kind is CreateOffer:
            avail[(a, op.sell)] -= op.endowment + t.fee
            locked[(a, op.sell)] += op.endowment
            burned[op.sell] += t.fee
            eff.offers.append(t.offer())
        elif kind is CancelOffer:
            avail[(a, op.sell)] -= t.fee
            burned[op.sell] += t.fee
            eff.cancels.append(t)
        else:
            avail[(a, NATIVE_ASSET)] -= t.fee
            burned[NATIVE_ASSET] += t.fee
            eff.creations.append((op.new_id, op.key))
    return eff


def _effects_from_bytes(records: list[bytes]) -> LocalEffects:
    eff = tx_effects(deserialize_tx(r) for r in records)
    eff.avail = dict(eff.avail)
    eff.locked = dict(eff.locked)
    eff.burned = dict(eff.burned)
    return eff


def _chunks(seq: Sequence, k: int) -> list[Sequence]:
    n = len(seq)
    return [seq[i * n // k : (i + 1) * n // k] for i in range(k)]


def compute_effects(txs: Sequence[Transaction], threads: int = 1, backend: str = "thread", executor=None) -> LocalEffects:
    """Per-chunk effects merged at a barrier; identical totals for any chunking."""
    threads = max(1, threads)
    if threads == 1 or len(txs) < 2 * threads:
        return tx_effects(txs)
    total = LocalEffects()
    if backend == "process":
        payloads = [[serialize_tx(t) for t in ch] for ch in _chunks(txs, threads)]
        own = executor is None
        ex = executor or ProcessPoolExecutor(threads)
        try:
            parts = list(ex.map(_effects_from_bytes, payloads))
        finally:
            if own:
                ex.shutdown()
    else:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(tx_effects, _chunks(txs, threads)))
    for p in parts:
        total.merge(p)
    return total


@dataclass
class PendingBlock:
    """What phase 1 leaves for the end of the block."""

    refunds: list[tuple[int, int, int]] = field(default_factory=list)
    creations: list[tuple[int, bytes]] = field(default_factory=list)
    seq_high: dict[int, int] = field(default_factory=dict)
    new_offers: int = 0


def apply_phase1(
    kept: Sequence[Transaction],
    state: BlockState,
    threads: int = 1,
    backend: str = "thread",
    executor=None,
) -> PendingBlock:
    """Apply filtered transactions; metadata changes and refunds are staged."""
    eff = compute_effects(kept, threads, backend, executor)
    accounts = state.accounts
    for (acct_id, asset), d in eff.avail.items():
        if d:
            acct = accounts[acct_id]
            acct.available[asset] = acct.available.get(asset, 0) + d
            state.touch(acct_id)
    for (acct_id, asset), d in eff.locked.items():
        if d:
            acct = accounts[acct_id]
            acct.locked[asset] = acct.locked.get(asset, 0) + d
    for asset, f in eff.burned.items():
        state.burned[asset] += f
    pending = PendingBlock(creations=sorted(eff.creations))
    for t in sorted(eff.cancels, key=lambda t: (t.account, t.seq)):
        op = t.op
        try:
            refund = state.books.cancel((op.sell, op.buy), op.limit_price_raw, OfferId(t.account, op.offer_seq))
        except (NotFound, CancelledTwice):
            continue
        pending.refunds.append((t.account, op.sell, refund))
    state.books.add_offers(sorted(eff.offers, key=lambda o: o.key), workers=max(1, threads))
    pending.new_offers = len(eff.offers)
    for acct_id, seq in eff.seqs:
        if seq > pending.seq_high.get(acct_id, 0):
            pending.seq_high[acct_id] = seq
    return pending


# --- proposer-assisted selection --------------------------------------------------


def select_assisted(txs: Sequence[Transaction], state: BlockState) -> FilterResult:
    """Greedy selection in ``(account, seq)`` order that never overdraws.

    Used when the proposer, not the filter, is responsible for solvency.
    Individually invalid transactions are dropped with the filter's reasons.
    """
    base = filter_block(txs, state)
    individual = {id(t): r for t, r in base.removed if r not in (OVERDRAFT, DUP_SEQ, DOUBLE_CANCEL)}
    spent: dict[tuple[int, int], int] = defaultdict(int)
    seen_seq: set[tuple[int, int]] = set()
    seen_cancel: set[tuple[int, int]] = set()
    kept, removed = [], []
    for t in sorted(txs, key=lambda t: (t.account, t.seq, serialize_tx(t))):
        if id(t) in individual:
            removed.append((t, individual[id(t)]))
            continue
        if (t.account, t.seq) in seen_seq:
            removed.append((t, SEQ_CONFLICT))
            continue
        op = t.op
        if isinstance(op, CancelOffer):
            if (t.account, op.offer_seq) in seen_cancel:
                removed.append((t, DOUBLE_CANCEL))
                continue
        need: dict[int, int] = defaultdict(int)
        if isinstance(op, Payment):
            need[op.asset] += op.amount + t.fee
        elif isinstance(op, CreateOffer):
            need[op.sell] += op.endowment + t.fee
        elif isinstance(op, CancelOffer):
            need[op.sell] += t.fee
        else:
            need[NATIVE_ASSET] += t.fee
        acct = state.accounts[t.account]
        if any(spent[(t.account, a)] + v > acct.available.get(a, 0) for a, v in need.items()):
            removed.append((t, OVERDRAFT))
            continue
        for a, v in need.items():
            spent[(t.account, a)] += v
        seen_seq.add((t.account, t.seq))
        if isinstance(op, CancelOffer):
            seen_cancel.add((t.account, op.offer_seq))
        kept.append(t)
    return FilterResult(kept, removed)


# --- phase 3 -------------------------------------------------------------------------


@dataclass
class ExecutionReport:
    executions: list[Execution]
    marginals: dict[Pair, MarginalKey]
    collected: list[int]
    paid: list[int]

    @property
    def surplus(self) -> list[int]:
        return [c - p for c, p in zip(self.collected, self.paid)]

    def partials_per_pair(self) -> dict[Pair, int]:
        out: dict[Pair, int] = defaultdict(int)
        for e in self.executions:
            if e.partial:
                out[(e.sell, e.buy)] += 1
        return dict(out)


def _settle(state: BlockState, execs: list[Execution], n: int) -> tuple[list[int], list[int]]:
    collected = [0] * n
    paid = [0] * n
    for e in execs:
        collected[e.sell] += e.sold
        paid[e.buy] += e.paid
    for a in range(n):
        if paid[a] > collected[a]:
            raise ConservationViolation(f"asset {a}: paid {paid[a]} > collected {collected[a]}")
    accounts = state.accounts
    for e in execs:
        acct = accounts[e.owner.account]
        acct.locked[e.sell] -= e.sold
        acct.available[e.buy] = acct.available.get(e.buy, 0) + e.paid
        state.touch(e.owner.account)
    for a in range(n):
        state.surplus[a] += collected[a] - paid[a]
    return collected, paid


def execute_plan(state: BlockState, plan: ClearingPlan) -> ExecutionReport:
    """Proposer path: clear each pair's cheapest ``x_AB`` units."""
    params = plan.params
    execs: list[Execution] = []
    marginals = {}
    for pair in sorted(plan.amounts):
        x = plan.amounts[pair]
        if not x:
            continue
        book = state.books.book(pair)
        ex, mk = clear_pair(book, pair, plan.prices[pair[0]], plan.prices[pair[1]], x, params)
        execs += ex
        if mk is not None:
            marginals[pair] = mk
    collected, paid = _settle(state, execs, state.n_assets)
    return ExecutionReport(execs, marginals, collected, paid)


def execute_marginals(
    state: BlockState,
    prices: Sequence[int],
    amounts: Mapping[Pair, int],
    marginals: Mapping[Pair, MarginalKey],
    params: ApproxParams,
) -> ExecutionReport:
    """Validator path: replay the header's marginal keys without solving."""
    execs: list[Execution] = []
    for pair in sorted(set(amounts) | set(marginals)):
        x = amounts.get(pair, 0)
        mk = marginals.get(pair)
        book = state.books.books.get(pair)
        if book is None:
            book = state.books.book(pair)
        execs += execute_from_marginal_key(book, mk, prices[pair[0]], prices[pair[1]], params, expected_amount=x)
    collected, paid = _settle(state, execs, state.n_assets)
    return ExecutionReport(execs, dict(marginals), collected, paid)


def finish_block(state: BlockState, pending: PendingBlock) -> None:
    """End-of-block commit: refunds, staged accounts, sequence bases, commitments."""
    for acct_id, asset, amount in pending.refunds:
        acct = state.accounts[acct_id]
        acct.locked[asset] -= amount
        acct.available[asset] = acct.available.get(asset, 0) + amount
        state.touch(acct_id)
    for acct_id, high in pending.seq_high.items():
        acct = state.accounts[acct_id]
        if high > acct.seq_base:
            acct.seq_base = high
            state.touch(acct_id)
    for new_id, key in pending.creations:
        if new_id not in state.accounts:
            state.accounts[new_id] = Account(key)
            state.touch(new_id)
    for acct_id in state._dirty:
        acct = state.accounts[acct_id]
        for d in (acct.available, acct.locked):
            for a in [a for a, v in d.items() if v == 0]:
                del d[a]
    state.books.compact()
    state.height += 1
    state.refresh_roots()


def overdrawn_accounts(state: BlockState) -> list[int]:
    return sorted(a for a, acct in state.accounts.items() if any(v < 0 for v in acct.available.values()))
