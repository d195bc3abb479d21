"""Per-pair offer books and batch execution against a solved clearing.

Each directed pair ``(A, B)`` owns a :class:`~batchdex.trie.Trie` keyed by the
22-byte offer key, whose value is the offer's remaining endowment as a u64.
Because the key starts with the limit price, walking a book in key order
visits offers from cheapest to most expensive, so executing the cheapest
``x_AB`` units always removes a dense key prefix.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator
from dataclasses import dataclass

from .errors import AlreadyDeleted, CancelledTwice, DuplicateKey, DuplicateOfferId, InsufficientSupply, MarginalKeyMismatch, NotFound
from .fixedpoint import RADIX
from .model import KEY_LEN, ApproxParams, Offer, OfferId, key_from_parts, split_key
from .trie import EMPTY_HASH, EphemeralTrie, Trie, batch_merge, blake

Pair = tuple[int, int]


def enc_amount(units: int) -> bytes:
    return units.to_bytes(8, "big")


def dec_amount(value: bytes) -> int:
    return int.from_bytes(value, "big")


def in_the_money(limit_raw: int, sell_price_raw: int, buy_price_raw: int) -> bool:
    """``limit <= p_sell / p_buy``, decided exactly."""
    return limit_raw * buy_price_raw <= sell_price_raw << RADIX


@dataclass(frozen=True)
class Execution:
    owner: OfferId
    sell: int
    buy: int
    limit_raw: int
    endowment: int
    sold: int
    paid: int

    @property
    def partial(self) -> bool:
        return self.sold < self.endowment


@dataclass(frozen=True)
class MarginalKey:
    """Offers keyed below ``key`` trade in full; the offer at ``key`` trades ``amount`` units."""

    pair: Pair
    key: bytes
    amount: int


class OrderbookSet:
    def __init__(self, n_assets: int) -> None:
        self.n_assets = n_assets
        self.books: dict[Pair, Trie] = {}

    def book(self, pair: Pair) -> Trie:
        b = self.books.get(pair)
        if b is None:
            a, c = pair
            if not (0 <= a < self.n_assets and 0 <= c < self.n_assets) or a == c:
                raise ValueError(f"invalid pair {pair}")
            b = self.books[pair] = Trie(KEY_LEN)
        return b

    def copy(self) -> OrderbookSet:
        out = OrderbookSet(self.n_assets)
        out.books = {p: b.copy() for p, b in self.books.items()}
        return out

    def pairs(self) -> list[Pair]:
        """Pairs with at least one live offer, sorted."""
        return sorted(p for p, b in self.books.items() if len(b))

    def __len__(self) -> int:
        return sum(len(b) for b in self.books.values())

    # --- insertion --------------------------------------------------------

    def add_offers(self, offers: Iterable[Offer], workers: int = 1) -> None:
        """Insert a batch through per-worker ephemeral tries and one merge per book."""
        locals_: dict[Pair, list[EphemeralTrie]] = {}
        for i, o in enumerate(offers):
            tries = locals_.setdefault(o.pair, [EphemeralTrie(KEY_LEN) for _ in range(workers)])
            try:
                tries[i % workers].insert_local(o.key, enc_amount(o.endowment))
            except DuplicateKey:
                raise DuplicateOfferId(o.owner) from None
        for pair in sorted(locals_):
            try:
                batch_merge(self.book(pair), locals_[pair])
            except DuplicateKey as exc:
                raise DuplicateOfferId(split_key(exc.args[0])[1:]) from None

    def add_offer(self, offer: Offer) -> None:
        book = self.book(offer.pair)
        if offer.key in book:
            raise DuplicateOfferId(offer.owner)
        book.insert(offer.key, enc_amount(offer.endowment))

    # --- lookup -----------------------------------------------------------

    def remaining(self, pair: Pair, limit_raw: int, owner: OfferId) -> int:
        return dec_amount(self.book(pair).get(key_from_parts(limit_raw, owner.account, owner.seq)))

    def iter_offers(self) -> Iterator[Offer]:
        from .fixedpoint import Price

        for pair in self.pairs():
            for key, value in self.books[pair].items():
                price, acct, seq = split_key(key)
                yield Offer(pair[0], pair[1], dec_amount(value), Price(price), OfferId(acct, seq))

    # --- cancellation -----------------------------------------------------

    def cancel(self, pair: Pair, limit_raw: int, owner: OfferId) -> int:
        """Mark an offer deleted and return its refund (the remaining endowment).

        The offer no longer trades this block; it is physically removed when
        the book is compacted at the end of the block.
        """
        key = key_from_parts(limit_raw, owner.account, owner.seq)
        book = self.books.get(pair)
        if book is None:
            raise NotFound(owner)
        try:
            refund = dec_amount(book.get(key))
        except NotFound:
            if book.is_marked(key):
                raise CancelledTwice(owner) from None
            raise
        try:
            book.mark_delete(key)
        except AlreadyDeleted:
            raise CancelledTwice(owner) from None
        return refund

    def compact(self) -> None:
        for b in self.books.values():
            b.compact()

    # --- commitments ------------------------------------------------------

    def roots(self) -> dict[Pair, bytes]:
        return {p: self.books[p].root_hash() for p in self.pairs()}

    def root_hash(self) -> bytes:
        """Single commitment over every non-empty book's root."""
        roots = self.roots()
        if not roots:
            return EMPTY_HASH
        data = b"".join(a.to_bytes(2, "big") + b.to_bytes(2, "big") + h for (a, b), h in sorted(roots.items()))
        return blake(b"\x03" + data)


def clear_pair(
    book: Trie,
    pair: Pair,
    sell_price_raw: int,
    buy_price_raw: int,
    amount: int,
    params: ApproxParams,
) -> tuple[list[Execution], MarginalKey | None]:
    """Execute the cheapest ``amount`` units of ``book`` at rate ``p_sell / p_buy``.

    Offers trade in key order; only the last one may trade partially.  The
    executed prefix is removed from the book and a partially filled offer
    keeps its key with a reduced endowment.
    """
    if amount <= 0:
        return [], None
    plan: list[tuple[bytes, int, int]] = []
    left = amount
    for key, value in book.items():
        limit_raw = split_key(key)[0]
        if not in_the_money(limit_raw, sell_price_raw, buy_price_raw):
            break
        endow = dec_amount(value)
        take = min(endow, left)
        plan.append((key, endow, take))
        left -= take
        if not left:
            break
    if left:
        raise InsufficientSupply(f"pair {pair}: {left} of {amount} units unfilled at the given rate")
    last_key, last_endow, last_take = plan[-1]
    marginal = MarginalKey(pair, last_key, last_take)
    return _apply(book, pair, plan, sell_price_raw, buy_price_raw, params), marginal


def execute_from_marginal_key(
    book: Trie,
    marginal: MarginalKey | None,
    sell_price_raw: int,
    buy_price_raw: int,
    params: ApproxParams,
    expected_amount: int | None = None,
) -> list[Execution]:
    """Validator path: trade everything below the marginal key and ``amount`` at it.

    Raises :class:`MarginalKeyMismatch` if the marginal offer is missing, any
    executed offer is above the rate, or the implied volume disagrees with
    ``expected_amount``.
    """
    if marginal is None or marginal.amount == 0:
        if expected_amount:
            raise MarginalKeyMismatch(f"header trades {expected_amount} units but names no marginal offer")
        return []
    pair = marginal.pair
    plan: list[tuple[bytes, int, int]] = []
    total = 0
    found = False
    for key, value in book.items():
        if key > marginal.key:
            break
        limit_raw = split_key(key)[0]
        if not in_the_money(limit_raw, sell_price_raw, buy_price_raw):
            raise MarginalKeyMismatch(f"pair {pair}: executed offer above the clearing rate")
        endow = dec_amount(value)
        if key == marginal.key:
            if marginal.amount > endow:
                raise MarginalKeyMismatch(f"pair {pair}: marginal amount exceeds the offer")
            take = marginal.amount
            found = True
        else:
            take = endow
        plan.append((key, endow, take))
        total += take
    if not found:
        raise MarginalKeyMismatch(f"pair {pair}: marginal offer not in book")
    if expected_amount is not None and total != expected_amount:
        raise MarginalKeyMismatch(f"pair {pair}: marginal key implies {total} units, header says {expected_amount}")
    return _apply(book, pair, plan, sell_price_raw, buy_price_raw, params)


def _apply(book, pair, plan, sell_price_raw, buy_price_raw, params) -> list[Execution]:
    sell, buy = pair
    execs = []
    for key, endow, take in plan:
        limit_raw, acct, seq = split_key(key)
        execs.append(
            Execution(OfferId(acct, seq), sell, buy, limit_raw, endow, take, params.payout(take, sell_price_raw, buy_price_raw))
        )
    last_key, last_endow, last_take = plan[-1]
    if last_take == last_endow:
        book.remove_below(last_key, inclusive=True)
    else:
        book.remove_below(last_key, inclusive=False)
        book.update(last_key, enc_amount(last_endow - last_take))
    return execs
