"""Single-node block loop: propose, validate, commit and replay.

Header layout (big-endian, canonical)::

    u64 height | 32 prev_hash | 32 state_root | 32 books_root | 32 tx_set_hash
    u8 mode (0 filter, 1 assisted) | u8 has_eps | u8 eps_log2 | u8 mu_log2 | u8 mu_guaranteed
    u16 n_assets | n_assets * u64 price_raw
    u32 n_trades | per trade: u16 sell | u16 buy | u16 y_len | y bytes | 22 marginal_key | u64 marginal_amount
    u32 n_books | per book: u16 sell | u16 buy | 32 root

``y`` is ``p_sell * x`` as an unsigned big-endian integer with no leading zero
bytes.  The block hash is BLAKE2b-256 of the header encoding.

Snapshots live in one directory.  A commit at height ``h`` writes
``accounts-h.bin``, then ``books-h.bin``, then replaces ``MANIFEST``; each file
goes through write-temp, fsync, rename.  The manifest names the height and
both files' checksums, so a crash at any point leaves the previous snapshot
reachable.  The block log is an append-only sequence of length-prefixed
(header, batch) records.
"""

from __future__ import annotations

import hashlib
import os
import queue
import struct
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

from .clearing import ClearingPlan, build_bounds, payout_deficits, solve_clearing
from .decomposition import MarketPartition, solve_decomposed
from .demand import SupplyCurves
from .errors import ConservationViolation, Malformed, MarginalKeyMismatch, StorageFailure, ValidationError
from .fixedpoint import ONE, Price
from .model import KEY_LEN, ApproxParams, AssetRegistry, Offer, OfferId, split_key
from .orderbook import MarginalKey, Pair, enc_amount
from .tatonnement import SolverConfig, SolverResult, UtilityReport, run_multi, unrealized_utility_ratio
from .transactions import Transaction, decode_batch, encode_batch, serialize_tx
from .trie import blake
from .txengine import (
    Account,
    BlockState,
    ExecutionReport,
    FilterResult,
    apply_phase1,
    execute_marginals,
    execute_plan,
    filter_block,
    finish_block,
    overdrawn_accounts,
    select_assisted,
)

MODE_FILTER = "filter"
MODE_ASSISTED = "assisted"

# reject reasons
BAD_CLEARING = "BadClearing"
OVERDRAFT = "Overdraft"
ROOT_MISMATCH = "RootMismatch"
MALFORMED_HEADER = "MalformedHeader"

ZERO_HASH = b"\x00" * 32


@dataclass(frozen=True)
class Trade:
    y: int
    marginal_key: bytes
    marginal_amount: int


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    state_root: bytes
    books_root: bytes
    tx_set_hash: bytes
    mode: str
    eps_log2: int | None
    mu_log2: int
    mu_guaranteed: bool
    prices: tuple[int, ...]
    trades: dict[Pair, Trade]
    book_roots: dict[Pair, bytes]

    @property
    def params(self) -> ApproxParams:
        return ApproxParams(self.eps_log2, self.mu_log2)

    def amounts(self) -> dict[Pair, int]:
        """``x = y / p_sell``; raises if a ``y`` is not an exact multiple."""
        out = {}
        for pair, t in self.trades.items():
            p = self.prices[pair[0]]
            if p <= 0 or t.y % p:
                raise ValidationError(MALFORMED_HEADER, f"y for {pair} is not a multiple of the sell price")
            out[pair] = t.y // p
        return out

    def marginals(self) -> dict[Pair, MarginalKey]:
        return {p: MarginalKey(p, t.marginal_key, t.marginal_amount) for p, t in self.trades.items()}

    def encode(self) -> bytes:
        parts = [
            struct.pack(">Q", self.height),
            self.prev_hash,
            self.state_root,
            self.books_root,
            self.tx_set_hash,
            struct.pack(
                ">BBBBB",
                0 if self.mode == MODE_FILTER else 1,
                0 if self.eps_log2 is None else 1,
                self.eps_log2 or 0,
                self.mu_log2,
                1 if self.mu_guaranteed else 0,
            ),
            struct.pack(">H", len(self.prices)),
            b"".join(struct.pack(">Q", p) for p in self.prices),
            struct.pack(">I", len(self.trades)),
        ]
        for (a, b), t in sorted(self.trades.items()):
            yb = t.y.to_bytes((t.y.bit_length() + 7) // 8, "big")
            parts.append(struct.pack(">HHH", a, b, len(yb)) + yb + t.marginal_key + struct.pack(">Q", t.marginal_amount))
        parts.append(struct.pack(">I", len(self.book_roots)))
        for (a, b), h in sorted(self.book_roots.items()):
            parts.append(struct.pack(">HH", a, b) + h)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> BlockHeader:
        try:
            (height,) = struct.unpack_from(">Q", data, 0)
            off = 8
            hashes = [data[off + 32 * i : off + 32 * (i + 1)] for i in range(4)]
            off += 128
            mode, has_eps, eps, mu, guaranteed = struct.unpack_from(">BBBBB", data, off)
            off += 5
            (n,) = struct.unpack_from(">H", data, off)
            off += 2
            prices = struct.unpack_from(f">{n}Q", data, off)
            off += 8 * n
            (nt,) = struct.unpack_from(">I", data, off)
            off += 4
            trades = {}
            for _ in range(nt):
                a, b, ylen = struct.unpack_from(">HHH", data, off)
                off += 6
                yb = data[off : off + ylen]
                if len(yb) != ylen or (ylen and yb[0] == 0):
                    raise Malformed("bad trade amount encoding")
                off += ylen
                key = data[off : off + KEY_LEN]
                off += KEY_LEN
                (amount,) = struct.unpack_from(">Q", data, off)
                off += 8
                trades[(a, b)] = Trade(int.from_bytes(yb, "big"), key, amount)
            (nb,) = struct.unpack_from(">I", data, off)
            off += 4
            roots = {}
            for _ in range(nb):
                a, b = struct.unpack_from(">HH", data, off)
                off += 4
                roots[(a, b)] = data[off : off + 32]
                off += 32
        except struct.error:
            raise Malformed("truncated header") from None
        if off != len(data) or mode > 1 or has_eps > 1 or guaranteed > 1 or any(len(h) != 32 for h in hashes):
            raise Malformed("non-canonical header")
        return cls(
            height,
            hashes[0],
            hashes[1],
            hashes[2],
            hashes[3],
            MODE_FILTER if mode == 0 else MODE_ASSISTED,
            eps if has_eps else None,
            mu,
            bool(guaranteed),
            tuple(prices),
            trades,
            roots,
        )

    def hash(self) -> bytes:
        return blake(self.encode())


def tx_set_hash(txs: Sequence[Transaction]) -> bytes:
    """Order-independent commitment: hash of the sorted record encodings."""
    return blake(b"".join(sorted(serialize_tx(t) for t in txs)))


@dataclass
class Block:
    header: BlockHeader
    txs: list[Transaction]

    def encode(self) -> bytes:
        h = self.header.encode()
        b = encode_batch(self.txs)
        return struct.pack(">II", len(h), len(b)) + h + b

    @classmethod
    def decode(cls, data: bytes) -> Block:
        if len(data) < 8:
            raise Malformed("truncated block")
        hl, bl = struct.unpack_from(">II", data, 0)
        if 8 + hl + bl != len(data):
            raise Malformed("block length mismatch")
        return cls(BlockHeader.decode(data[8 : 8 + hl]), decode_batch(data[8 + hl :]))


# --- node -----------------------------------------------------------------------


@dataclass
class NodeConfig:
    params: ApproxParams = field(default_factory=ApproxParams)
    solver_configs: list[SolverConfig] | None = None
    deterministic: bool = True
    threads: int = 1
    backend: str = "thread"
    mode: str = MODE_FILTER
    max_iters: int = 3000

    def configs(self) -> list[SolverConfig]:
        if self.solver_configs is not None:
            return self.solver_configs
        return [SolverConfig(params=self.params, max_iters=self.max_iters, timeout=None if self.deterministic else 2.0)]


@dataclass
class BlockStats:
    height: int
    txs: int
    kept: int
    solver: SolverResult | None
    plan: ClearingPlan | None
    report: ExecutionReport | None
    filter: FilterResult | None
    lp_feasible: bool
    seconds: float
    utility: UtilityReport | None = None


class Node:
    """Owns the live state and extends the chain one block at a time."""

    def __init__(self, state: BlockState, config: NodeConfig | None = None) -> None:
        self.state = state
        self.config = config or NodeConfig()
        self.prev_hash = ZERO_HASH
        self.last_prices: tuple[int, ...] | None = None
        self.history: list[BlockStats] = []

    def propose(self, txs: Sequence[Transaction]) -> Block:
        """Filter, apply, solve, clear and commit one block; returns the block with its header."""
        cfg = self.config
        st = self.state
        t0 = time.perf_counter()
        txs = list(txs)
        if cfg.mode == MODE_ASSISTED:
            filt = select_assisted(txs, st)
        else:
            filt = filter_block(txs, st, cfg.threads)
        pending = apply_phase1(filt.kept, st, cfg.threads, cfg.backend)
        curves = SupplyCurves.from_books(st.books)
        initial = self.last_prices or tuple([ONE] * st.n_assets)
        if st.registry.anchors:
            dec = solve_decomposed(MarketPartition.from_registry(st.registry), curves, cfg.configs(), cfg.params,
                                   initial, deterministic=cfg.deterministic)
            plan = dec.plan
            result = replace(dec.core_result, prices=plan.prices, converged=dec.converged)
        else:
            result = run_multi(cfg.configs(), curves, initial, deterministic=cfg.deterministic)
            plan = solve_clearing(result.prices, curves, cfg.params)
        utility = unrealized_utility_ratio(plan.prices, curves, plan.amounts)
        report = execute_plan(st, plan)
        finish_block(st, pending)
        header = BlockHeader(
            height=st.height,
            prev_hash=self.prev_hash,
            state_root=st.state_root(),
            books_root=st.books.root_hash(),
            tx_set_hash=tx_set_hash(txs),
            mode=cfg.mode,
            eps_log2=cfg.params.eps_log2,
            mu_log2=cfg.params.mu_log2,
            mu_guaranteed=plan.lower_met,
            prices=tuple(result.prices),
            trades={
                p: Trade(plan.prices[p[0]] * x, report.marginals[p].key, report.marginals[p].amount)
                for p, x in plan.amounts.items()
                if x
            },
            book_roots=st.books.roots(),
        )
        self.prev_hash = header.hash()
        self.last_prices = tuple(result.prices)
        self.history.append(
            BlockStats(st.height, len(txs), len(filt.kept), result, plan, report, filt, plan.lp_feasible, time.perf_counter() - t0,
                       utility)
        )
        return Block(header, txs)


def validate(block: Block, state: BlockState, prev_hash: bytes = ZERO_HASH, params: ApproxParams | None = None,
             threads: int = 1) -> ExecutionReport:
    """Re-execute a block from its header alone; mutates ``state`` on success.

    Raises :class:`ValidationError` with one of ``BadClearing``, ``Overdraft``,
    ``RootMismatch`` or ``MalformedHeader``.  On failure ``state`` is left
    partially updated, so callers validate against a copy they can discard.
    """
    h = block.header
    if h.height != state.height + 1 or h.prev_hash != prev_hash:
        raise ValidationError(MALFORMED_HEADER, "height or parent mismatch")
    if len(h.prices) != state.n_assets or any(p <= 0 for p in h.prices):
        raise ValidationError(MALFORMED_HEADER, "price vector")
    if params is not None and (params.eps_log2 != h.eps_log2 or params.mu_log2 != h.mu_log2):
        raise ValidationError(MALFORMED_HEADER, "approximation parameters differ from the configured ones")
    if h.tx_set_hash != tx_set_hash(block.txs):
        raise ValidationError(MALFORMED_HEADER, "transaction set hash")
    hp = h.params
    if h.mode == MODE_ASSISTED:
        filt = select_assisted(block.txs, state)
    else:
        filt = filter_block(block.txs, state, threads)
    pending = apply_phase1(filt.kept, state, threads)
    amounts = h.amounts()
    curves = SupplyCurves.from_books(state.books)
    bounds = build_bounds(h.prices, curves, hp.mu_log2)
    for pair, x in amounts.items():
        if x > bounds.upper_units.get(pair, 0):
            raise ValidationError(BAD_CLEARING, f"{pair}: {x} units exceed the in-the-money supply")
    if h.mu_guaranteed:
        for pair, low in bounds.lower_units.items():
            if amounts.get(pair, 0) < low:
                raise ValidationError(BAD_CLEARING, f"{pair}: mandatory volume {low} not executed")
    if any(d > 0 for d in payout_deficits(amounts, h.prices, hp)):
        raise ValidationError(BAD_CLEARING, "trade amounts do not conserve assets")
    try:
        report = execute_marginals(state, h.prices, amounts, h.marginals(), hp)
    except (MarginalKeyMismatch, ConservationViolation) as exc:
        raise ValidationError(BAD_CLEARING, str(exc)) from None
    if h.mode == MODE_ASSISTED and overdrawn_accounts(state):
        raise ValidationError(OVERDRAFT, "account overdrawn at end of block")
    finish_block(state, pending)
    if overdrawn_accounts(state):
        raise ValidationError(OVERDRAFT, "account overdrawn at end of block")
    if state.state_root() != h.state_root or state.books.root_hash() != h.books_root or state.books.roots() != h.book_roots:
        raise ValidationError(ROOT_MISMATCH, "post-state commitment differs from header")
    return report


# --- snapshots ----------------------------------------------------------------------

SNAP_MAGIC = b"BDXS"
SNAP_VERSION = 1


class SimulatedCrash(Exception):
    """Raised by fault-injection hooks to stop a commit mid-way."""


FaultHook = Callable[[str, Path], None]


def _atomic_write(path: Path, data: bytes, fault: FaultHook | None, tag: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            half = len(data) // 2
            f.write(data[:half])
            if fault:
                fault(f"{tag}:partial", tmp)
            f.write(data[half:])
            f.flush()
            os.fsync(f.fileno())
        if fault:
            fault(f"{tag}:before-rename", tmp)
        os.replace(tmp, path)
        dfd = os.open(path.parent, os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)
        if fault:
            fault(f"{tag}:after-rename", path)
    except SimulatedCrash:
        raise
    except OSError as exc:
        raise StorageFailure(str(exc)) from exc


def _container(kind: bytes, payload: bytes) -> bytes:
    body = SNAP_MAGIC + kind + struct.pack(">I", SNAP_VERSION) + payload
    return body + hashlib.blake2b(body, digest_size=32).digest()


def _open_container(kind: bytes, data: bytes) -> bytes:
    if len(data) < 44 or data[:4] != SNAP_MAGIC or data[4:8] != kind:
        raise Malformed("bad snapshot container")
    body, digest = data[:-32], data[-32:]
    if hashlib.blake2b(body, digest_size=32).digest() != digest:
        raise Malformed("snapshot checksum mismatch")
    if struct.unpack_from(">I", body, 8)[0] != SNAP_VERSION:
        raise Malformed("snapshot version")
    return body[12:]


def _encode_accounts(state: BlockState, prev_hash: bytes, last_prices: Sequence[int] | None) -> bytes:
    reg = state.registry.dump().encode()
    parts = [struct.pack(">QH", state.height, state.n_assets), prev_hash, struct.pack(">I", len(reg)), reg]
    for vec in (state.burned, state.surplus, state.issued):
        parts.append(b"".join(v.to_bytes(16, "big") for v in vec))
    lp = list(last_prices) if last_prices else []
    parts.append(struct.pack(">H", len(lp)) + b"".join(struct.pack(">Q", p) for p in lp))
    parts.append(struct.pack(">Q", len(state.accounts)))
    for acct_id in sorted(state.accounts):
        rec = state.accounts[acct_id].encode()
        parts.append(struct.pack(">QI", acct_id, len(rec)) + rec)
    return b"".join(parts)


def _encode_books(state: BlockState) -> bytes:
    offers = list(state.books.iter_offers())
    parts = [struct.pack(">QQ", state.height, len(offers))]
    for o in offers:
        parts.append(struct.pack(">HH", o.sell, o.buy) + o.key + enc_amount(o.endowment))
    return b"".join(parts)


@dataclass
class Snapshot:
    height: int
    state: BlockState
    prev_hash: bytes
    last_prices: tuple[int, ...] | None


def _decode_snapshot(acc: bytes, books: bytes) -> Snapshot:
    height, n = struct.unpack_from(">QH", acc, 0)
    off = 10
    prev_hash = acc[off : off + 32]
    off += 32
    (rlen,) = struct.unpack_from(">I", acc, off)
    off += 4
    registry = AssetRegistry.parse(acc[off : off + rlen].decode())
    off += rlen
    st = BlockState(n, registry)
    vecs = []
    for _ in range(3):
        vecs.append([int.from_bytes(acc[off + 16 * i : off + 16 * (i + 1)], "big") for i in range(n)])
        off += 16 * n
    st.burned, st.surplus, st.issued = vecs
    (nlp,) = struct.unpack_from(">H", acc, off)
    off += 2
    last = tuple(struct.unpack_from(f">{nlp}Q", acc, off)) if nlp else None
    off += 8 * nlp
    (count,) = struct.unpack_from(">Q", acc, off)
    off += 8
    for _ in range(count):
        acct_id, rlen = struct.unpack_from(">QI", acc, off)
        off += 12
        st.accounts[acct_id] = Account.decode(acc[off : off + rlen])
        st.touch(acct_id)
        off += rlen
    bh, nof = struct.unpack_from(">QQ", books, 0)
    if bh != height:
        raise Malformed("accounts and books snapshots are from different heights")
    off = 16
    offers = []
    for _ in range(nof):
        a, b = struct.unpack_from(">HH", books, off)
        off += 4
        key = books[off : off + KEY_LEN]
        off += KEY_LEN
        endow = int.from_bytes(books[off : off + 8], "big")
        off += 8
        price, acct, seq = split_key(key)
        offers.append(Offer(a, b, endow, Price(price), OfferId(acct, seq)))
    st.books.add_offers(offers)
    st.height = height
    st.refresh_roots()
    return Snapshot(height, st, prev_hash, last)


class SnapshotStore:
    """Directory of committed snapshots with an atomically replaced manifest."""

    def __init__(self, root: str | Path, fault: FaultHook | None = None, keep: int = 2) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fault = fault
        self.keep = keep

    def write(self, state: BlockState, prev_hash: bytes, last_prices: Sequence[int] | None) -> None:
        self.write_payloads(state.height, _encode_accounts(state, prev_hash, last_prices), _encode_books(state))

    def write_payloads(self, height: int, acc_payload: bytes, book_payload: bytes) -> None:
        acc = _container(b"ACCT", acc_payload)
        books = _container(b"BOOK", book_payload)
        acc_name = f"accounts-{height}.bin"
        book_name = f"books-{height}.bin"
        # account data first, then books, then the manifest that makes both visible
        _atomic_write(self.root / acc_name, acc, self.fault, "accounts")
        _atomic_write(self.root / book_name, books, self.fault, "books")
        manifest = struct.pack(">Q", height) + blake(acc) + blake(books) + acc_name.encode() + b"\n" + book_name.encode()
        _atomic_write(self.root / "MANIFEST", _container(b"MANI", manifest), self.fault, "manifest")
        self._prune(height)

    def _prune(self, height: int) -> None:
        snaps = sorted(
            {int(p.stem.split("-")[1]) for p in self.root.glob("accounts-*.bin")} | {int(p.stem.split("-")[1]) for p in self.root.glob("books-*.bin")}
        )
        old = [h for h in snaps if h < height][: max(0, len([h for h in snaps if h < height]) - (self.keep - 1))]
        for h in old:
            for name in (f"accounts-{h}.bin", f"books-{h}.bin"):
                try:
                    (self.root / name).unlink()
                except FileNotFoundError:
                    pass

    def load(self) -> Snapshot | None:
        """The snapshot the manifest points to, or None when nothing was committed."""
        path = self.root / "MANIFEST"
        if not path.exists():
            return None
        m = _open_container(b"MANI", path.read_bytes())
        (height,) = struct.unpack_from(">Q", m, 0)
        acc_sum, book_sum = m[8:40], m[40:72]
        acc_name, book_name = m[72:].decode().split("\n")
        acc = (self.root / acc_name).read_bytes()
        books = (self.root / book_name).read_bytes()
        if blake(acc) != acc_sum or blake(books) != book_sum:
            raise Malformed("snapshot files do not match the manifest")
        snap = _decode_snapshot(_open_container(b"ACCT", acc), _open_container(b"BOOK", books))
        if snap.height != height:
            raise Malformed("manifest height mismatch")
        return snap


class BlockLog:
    """Append-only block file: ``u64 len | block`` records."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)

    def append(self, block: Block) -> None:
        data = block.encode()
        with open(self.path, "ab") as f:
            f.write(struct.pack(">Q", len(data)) + data)
            f.flush()
            os.fsync(f.fileno())

    def read(self) -> list[Block]:
        if not self.path.exists():
            return []
        data = self.path.read_bytes()
        out = []
        off = 0
        while off + 8 <= len(data):
            (n,) = struct.unpack_from(">Q", data, off)
            if off + 8 + n > len(data):
                break  # torn tail from a crash
            out.append(Block.decode(data[off + 8 : off + 8 + n]))
            off += 8 + n
        return out


class Chain:
    """A node plus its block log and periodic background snapshots."""

    def __init__(
        self,
        state: BlockState,
        directory: str | Path,
        config: NodeConfig | None = None,
        commit_every: int = 5,
        fault: FaultHook | None = None,
        background: bool = True,
    ) -> None:
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.genesis = state.copy()
        self.node = Node(state, config)
        self.log = BlockLog(self.dir / "blocks.log")
        self.store = SnapshotStore(self.dir / "snapshots", fault)
        self.commit_every = commit_every
        self.background = background
        self._queue: queue.Queue = queue.Queue()
        self._error: BaseException | None = None
        self._writer: threading.Thread | None = None

    def _ensure_writer(self) -> None:
        if self._writer is None:
            self._writer = threading.Thread(target=self._write_loop, daemon=True)
            self._writer.start()

    def _write_loop(self) -> None:
        while True:
            job = self._queue.get()
            if job is None:
                self._queue.task_done()
                return
            try:
                self.store.write_payloads(*job)
            except BaseException as exc:  # surfaced on the next barrier
                self._error = exc
            finally:
                self._queue.task_done()

    def barrier(self) -> None:
        """Wait for the in-flight snapshot write and re-raise its failure, if any."""
        if self._writer is not None:
            self._queue.join()
        if self._error is not None:
            err, self._error = self._error, None
            raise err

    def extend(self, txs: Sequence[Transaction]) -> Block:
        block = self.node.propose(txs)
        self.log.append(block)
        st = self.node.state
        if st.height % self.commit_every == 0:
            self.barrier()
            job = (st.height, _encode_accounts(st, self.node.prev_hash, self.node.last_prices), _encode_books(st))
            if self.background:
                self._ensure_writer()
                self._queue.put(job)
            else:
                self.store.write_payloads(*job)
        return block

    def close(self) -> None:
        self.barrier()
        if self._writer is not None:
            self._queue.put(None)
            self._writer.join()
            self._writer = None


def replay(state: BlockState, blocks: Sequence[Block], prev_hash: bytes = ZERO_HASH, threads: int = 1) -> bytes:
    """Validate-and-apply each block in turn; returns the final block hash."""
    for b in blocks:
        if b.header.height <= state.height:
            continue
        validate(b, state, prev_hash, threads=threads)
        prev_hash = b.header.hash()
    return prev_hash


def recover(directory: str | Path, genesis: BlockState) -> tuple[BlockState, bytes]:
    """Load the latest snapshot (or genesis) and replay the block log on top."""
    d = Path(directory)
    snap = SnapshotStore(d / "snapshots").load()
    if snap is None:
        state, prev = genesis.copy(), ZERO_HASH
    else:
        state, prev = snap.state, snap.prev_hash
    blocks = BlockLog(d / "blocks.log").read()
    prev = replay(state, blocks, prev)
    return state, prev
