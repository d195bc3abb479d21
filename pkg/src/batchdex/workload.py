"""Synthetic transaction streams.

Latent asset valuations follow a driftless geometric Brownian motion; offers
pick a pair by per-asset volume weights and set their limit price to the
latent exchange rate times a uniform jitter.  Account activity follows a
Zipf-like power law.  Randomness comes from numpy's PCG64 generator seeded
once per workload, so a seed fully determines every batch.

Workload file layout (big-endian)::

    b"BDXW" | u32 version | u32 registry_len | registry text (utf-8)
    u32 funded_accounts, then per account: u64 id | u16 k | k * (u16 asset | u64 amount)
    u32 blocks, then per block: u64 len | transaction batch bytes
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import Malformed
from .fixedpoint import MAX_PRICE_RAW, MIN_PRICE_RAW, ONE, KEY_SHIFT
from .model import AssetRegistry
from .transactions import (
    CancelOffer,
    CreateAccount,
    CreateOffer,
    Payment,
    Transaction,
    decode_batch,
    encode_batch,
)

WORKLOAD_MAGIC = b"BDXW"
WORKLOAD_VERSION = 1
MAX_TXS_PER_ACCOUNT = 60


@dataclass(frozen=True)
class Mix:
    offer: float = 0.85
    cancel: float = 0.05
    payment: float = 0.08
    create_account: float = 0.02

    def __post_init__(self) -> None:
        vals = (self.offer, self.cancel, self.payment, self.create_account)
        if min(vals) < 0 or not math.isclose(sum(vals), 1.0):
            raise ValueError("mix fractions must be non-negative and sum to 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.offer, self.cancel, self.payment, self.create_account])


PAYMENTS_ONLY = Mix(0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class VolatilityModel:
    """Per-block redraw of volume weights and price shocks.

    ``weight_sigma`` is the log-volatility of each asset's volume weight per
    block; ``price_sigma`` scales the valuation shocks.  Zero for both gives
    a static market.
    """

    weight_sigma: float = 0.0
    price_sigma: float = 0.0


@dataclass(frozen=True)
class MarketModel:
    n_assets: int = 20
    sigma: float = 0.01
    account_count: int = 1000
    popularity: float = 1.0
    mix: Mix = field(default_factory=Mix)
    jitter: float = 0.02
    fee: int = 1
    funding: int = 10**12
    endowment_range: tuple[int, int] = (100, 100_000)
    volume_weights: tuple[float, ...] | None = None
    registry: AssetRegistry | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_assets < 2:
            raise ValueError("need at least two assets")
        if self.volume_weights is not None and (len(self.volume_weights) != self.n_assets or min(self.volume_weights) < 0):
            raise ValueError("volume weights must be non-negative, one per asset")

    def asset_registry(self) -> AssetRegistry:
        return self.registry or AssetRegistry.numbered(self.n_assets)

    def weights(self) -> np.ndarray:
        w = np.ones(self.n_assets) if self.volume_weights is None else np.array(self.volume_weights, float)
        return w / w.sum()

    def genesis_funding(self) -> dict[int, dict[int, int]]:
        return {a: {k: self.funding for k in range(self.n_assets)} for a in range(self.account_count)}


def pair_probabilities(weights: np.ndarray, registry: AssetRegistry | None = None) -> np.ndarray:
    """``P[a, b]`` of an offer selling ``a`` for ``b`` under the generator's sampling."""
    n = len(weights)
    allowed = _allowed_pairs(n, registry)
    p = np.zeros((n, n))
    for a in range(n):
        if weights[a] == 0:
            continue
        w = np.array([weights[b] if allowed[a, b] else 0.0 for b in range(n)])
        if w.sum() > 0:
            p[a] = weights[a] * w / w.sum()
    return p / p.sum()


def _allowed_pairs(n: int, registry: AssetRegistry | None) -> np.ndarray:
    ok = ~np.eye(n, dtype=bool)
    if registry is None or not registry.anchors:
        return ok
    anchors = registry.anchors
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            sa, sb = a in anchors, b in anchors
            if (sa or sb) and not (anchors.get(a) == b or anchors.get(b) == a):
                ok[a, b] = False
    return ok


class Workload:
    """Stateful generator; each :meth:`next_block` advances prices and sequence numbers."""

    def __init__(self, model: MarketModel, volatility: VolatilityModel | None = None) -> None:
        self.model = model
        self.volatility = volatility or VolatilityModel()
        self.rng = np.random.Generator(np.random.PCG64(model.seed))
        self.valuations = np.exp(self.rng.uniform(-1.0, 1.0, model.n_assets))
        self.weights = model.weights()
        self.allowed = _allowed_pairs(model.n_assets, model.registry)
        ranks = np.arange(1, model.account_count + 1, dtype=float)
        pop = ranks ** -model.popularity
        self.popularity = pop / pop.sum()
        self.next_seq = np.ones(model.account_count, np.int64)
        self.next_account = model.account_count
        self.open_offers: list[tuple[int, int, int, int, int]] = []

    def step_market(self) -> None:
        m = self.model
        sig = m.sigma + self.volatility.price_sigma
        if sig > 0:
            self.valuations = self.valuations * np.exp(sig * self.rng.standard_normal(m.n_assets))
        if self.volatility.weight_sigma > 0:
            w = self.weights * np.exp(self.volatility.weight_sigma * self.rng.standard_normal(m.n_assets))
            self.weights = w / w.sum()

    def implied_rate(self, a: int, b: int) -> float:
        return float(self.valuations[a] / self.valuations[b])

    def _pairs(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Sell asset by volume weight, then buy asset by weight among allowed partners."""
        n = self.model.n_assets
        sells = self.rng.choice(n, size=count, p=self.weights)
        w = np.where(self.allowed, self.weights[None, :], 0.0)
        rows = w.sum(axis=1, keepdims=True)
        w = np.where(rows > 0, w / np.where(rows > 0, rows, 1.0), self.allowed / self.allowed.sum(axis=1, keepdims=True))
        cum = np.cumsum(w, axis=1)
        u = self.rng.random(count)
        buys = np.minimum((u[:, None] >= cum[sells]).sum(axis=1), n - 1)
        return sells, buys

    def next_block(self, size: int) -> list[Transaction]:
        """One batch of ``size`` transactions at the current market state, then advance."""
        m = self.model
        if size > MAX_TXS_PER_ACCOUNT * m.account_count:
            raise ValueError(f"{size} transactions exceed {MAX_TXS_PER_ACCOUNT} per account over {m.account_count} accounts")
        rng = self.rng
        kinds = rng.choice(4, size=size, p=m.mix.as_array())
        accts = rng.choice(m.account_count, size=size, p=self.popularity)
        sells, buys = self._pairs(size)
        jit = rng.uniform(-m.jitter, m.jitter, size)
        lo, hi = m.endowment_range
        endows = np.exp(rng.uniform(math.log(lo), math.log(hi), size)).astype(np.int64)
        dests = rng.integers(m.account_count, size=size)
        assets = rng.integers(m.n_assets, size=size)
        amounts = rng.integers(1, 1000, size=size)
        rates = self.valuations[sells] / self.valuations[buys] * (1.0 + jit)
        used = np.zeros(m.account_count, np.int64)
        next_seq = self.next_seq
        fee = m.fee
        txs: list[Transaction] = []
        for i in range(size):
            kind = kinds[i]
            acct = int(accts[i])
            while used[acct] >= MAX_TXS_PER_ACCOUNT:
                acct = int(rng.integers(m.account_count))
            if kind == 1 and self.open_offers:
                j = int(rng.integers(len(self.open_offers)))
                self.open_offers[j], self.open_offers[-1] = self.open_offers[-1], self.open_offers[j]
                o_acct, o_seq, a, b, raw = self.open_offers[-1]
                if used[o_acct] < MAX_TXS_PER_ACCOUNT:
                    self.open_offers.pop()
                    used[o_acct] += 1
                    seq = int(next_seq[o_acct])
                    next_seq[o_acct] += 1
                    # cancels come from the offer's owner
                    txs.append(Transaction(o_acct, seq, fee, CancelOffer(a, b, raw, o_seq)))
                    continue
                kind = 0
            used[acct] += 1
            seq = int(next_seq[acct])
            next_seq[acct] += 1
            if kind <= 1:
                a, b = int(sells[i]), int(buys[i])
                raw = int(rates[i] * ONE) >> KEY_SHIFT << KEY_SHIFT
                raw = min(MAX_PRICE_RAW, max(MIN_PRICE_RAW, raw))
                txs.append(Transaction(acct, seq, fee, CreateOffer(a, b, int(endows[i]), raw)))
                self.open_offers.append((acct, seq, a, b, raw))
            elif kind == 2:
                txs.append(Transaction(acct, seq, fee, Payment(int(dests[i]), int(assets[i]), int(amounts[i]))))
            else:
                txs.append(Transaction(acct, seq, fee, CreateAccount(self.next_account, rng.bytes(32))))
                self.next_account += 1
        if len(self.open_offers) > 50 * max(size, 1):
            del self.open_offers[: len(self.open_offers) // 2]
        self.step_market()
        return txs


def gen_block(model: MarketModel, size: int) -> list[Transaction]:
    if size < 0:
        raise ValueError("size must be >= 0")
    return Workload(model).next_block(size)


def gen_series(model: MarketModel, blocks: int, size: int) -> list[list[Transaction]]:
    w = Workload(model)
    return [w.next_block(size) for _ in range(blocks)]


def gen_robustness_series(
    model: MarketModel,
    blocks: int = 50,
    size: int = 5000,
    volatility: VolatilityModel | None = None,
) -> list[list[Transaction]]:
    """Blocks whose volume weights and price shocks are re-drawn each step."""
    w = Workload(model, volatility or VolatilityModel(weight_sigma=0.3, price_sigma=0.05))
    return [w.next_block(size) for _ in range(blocks)]


# --- files -------------------------------------------------------------------------


@dataclass
class WorkloadFile:
    registry: AssetRegistry
    funding: dict[int, dict[int, int]]
    blocks: list[list[Transaction]]

    def encode(self) -> bytes:
        reg = self.registry.dump().encode()
        parts = [WORKLOAD_MAGIC, struct.pack(">II", WORKLOAD_VERSION, len(reg)), reg, struct.pack(">I", len(self.funding))]
        for acct in sorted(self.funding):
            bal = sorted((a, v) for a, v in self.funding[acct].items() if v)
            parts.append(struct.pack(">QH", acct, len(bal)))
            parts += [struct.pack(">HQ", a, v) for a, v in bal]
        parts.append(struct.pack(">I", len(self.blocks)))
        for b in self.blocks:
            data = encode_batch(b)
            parts.append(struct.pack(">Q", len(data)) + data)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> WorkloadFile:
        try:
            if data[:4] != WORKLOAD_MAGIC:
                raise Malformed("not a workload file")
            version, rlen = struct.unpack_from(">II", data, 4)
            if version != WORKLOAD_VERSION:
                raise Malformed(f"unsupported workload version {version}")
            off = 12
            registry = AssetRegistry.parse(data[off : off + rlen].decode())
            off += rlen
            (nacc,) = struct.unpack_from(">I", data, off)
            off += 4
            funding = {}
            for _ in range(nacc):
                acct, k = struct.unpack_from(">QH", data, off)
                off += 10
                bal = {}
                for _ in range(k):
                    a, v = struct.unpack_from(">HQ", data, off)
                    off += 10
                    bal[a] = v
                funding[acct] = bal
            (nblocks,) = struct.unpack_from(">I", data, off)
            off += 4
            blocks = []
            for _ in range(nblocks):
                (blen,) = struct.unpack_from(">Q", data, off)
                off += 8
                blocks.append(decode_batch(data[off : off + blen]))
                off += blen
        except struct.error:
            raise Malformed("truncated workload file") from None
        if off != len(data):
            raise Malformed("trailing bytes in workload file")
        return cls(registry, funding, blocks)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.encode())

    @classmethod
    def load(cls, path: str | Path) -> WorkloadFile:
        return cls.decode(Path(path).read_bytes())


def make_workload(model: MarketModel, blocks: int, size: int, volatility: VolatilityModel | None = None) -> WorkloadFile:
    w = Workload(model, volatility)
    return WorkloadFile(model.asset_registry(), model.genesis_funding(), [w.next_block(size) for _ in range(blocks)])
