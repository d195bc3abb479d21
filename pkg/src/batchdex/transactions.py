"""Transactions and their canonical binary encoding.

Record layout (all integers big-endian)::

    u32  body_len
    body:
      u64  account
      u64  seq
      u64  fee
      u8   kind            1=CreateAccount 2=CreateOffer 3=CancelOffer 4=Payment
      ...  op fields       see below
      u16  sig_len
      sig_len bytes signature

    CreateAccount : u64 new_id, u16 key_len, key bytes
    CreateOffer   : u16 sell, u16 buy, u64 endowment, u64 limit_price_raw
    CancelOffer   : u16 sell, u16 buy, u64 limit_price_raw, u64 offer_seq
    Payment       : u64 dest, u16 asset, u64 amount

Every value has exactly one encoding: decoding rejects truncation, unknown
kinds and trailing bytes.  A batch file is ``b"BDXT" | u32 version | u64 count``
followed by ``count`` records.
"""

from __future__ import annotations

import struct
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from .errors import Malformed
from .fixedpoint import Price
from .model import Offer, OfferId

KIND_CREATE_ACCOUNT = 1
KIND_CREATE_OFFER = 2
KIND_CANCEL_OFFER = 3
KIND_PAYMENT = 4

BATCH_MAGIC = b"BDXT"
BATCH_VERSION = 1

_HEAD = struct.Struct(">QQQB")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_CREATE_ACCOUNT = struct.Struct(">QH")
_CREATE_OFFER = struct.Struct(">HHQQ")
_CANCEL_OFFER = struct.Struct(">HHQQ")
_PAYMENT = struct.Struct(">QHQ")


@dataclass(frozen=True)
class CreateAccount:
    new_id: int
    key: bytes


@dataclass(frozen=True)
class CreateOffer:
    sell: int
    buy: int
    endowment: int
    limit_price_raw: int


@dataclass(frozen=True)
class CancelOffer:
    sell: int
    buy: int
    limit_price_raw: int
    offer_seq: int


@dataclass(frozen=True)
class Payment:
    dest: int
    asset: int
    amount: int


Operation = Union[CreateAccount, CreateOffer, CancelOffer, Payment]


@dataclass(frozen=True)
class Transaction:
    account: int
    seq: int
    fee: int
    op: Operation
    signature: bytes = b""

    @property
    def kind(self) -> int:
        return _KINDS[type(self.op)]

    def offer(self) -> Offer:
        """The offer a CreateOffer transaction creates; its id is (account, seq)."""
        op = self.op
        if not isinstance(op, CreateOffer):
            raise TypeError("not a CreateOffer transaction")
        return Offer(op.sell, op.buy, op.endowment, Price(op.limit_price_raw), OfferId(self.account, self.seq))

    def cancelled_id(self) -> OfferId:
        if not isinstance(self.op, CancelOffer):
            raise TypeError("not a CancelOffer transaction")
        return OfferId(self.account, self.op.offer_seq)

    def encode(self) -> bytes:
        return serialize_tx(self)


_KINDS = {CreateAccount: KIND_CREATE_ACCOUNT, CreateOffer: KIND_CREATE_OFFER, CancelOffer: KIND_CANCEL_OFFER, Payment: KIND_PAYMENT}


def _body(tx: Transaction) -> bytes:
    op = tx.op
    parts = [_HEAD.pack(tx.account, tx.seq, tx.fee, tx.kind)]
    if isinstance(op, CreateAccount):
        parts.append(_CREATE_ACCOUNT.pack(op.new_id, len(op.key)) + op.key)
    elif isinstance(op, CreateOffer):
        parts.append(_CREATE_OFFER.pack(op.sell, op.buy, op.endowment, op.limit_price_raw))
    elif isinstance(op, CancelOffer):
        parts.append(_CANCEL_OFFER.pack(op.sell, op.buy, op.limit_price_raw, op.offer_seq))
    else:
        parts.append(_PAYMENT.pack(op.dest, op.asset, op.amount))
    parts.append(_U16.pack(len(tx.signature)) + tx.signature)
    return b"".join(parts)


def serialize_tx(tx: Transaction) -> bytes:
    try:
        body = _body(tx)
    except struct.error as exc:
        raise Malformed(f"field out of range: {exc}") from None
    return _U32.pack(len(body)) + body


def _decode_body(body: bytes) -> Transaction:
    try:
        account, seq, fee, kind = _HEAD.unpack_from(body, 0)
        off = _HEAD.size
        if kind == KIND_CREATE_ACCOUNT:
            new_id, klen = _CREATE_ACCOUNT.unpack_from(body, off)
            off += _CREATE_ACCOUNT.size
            key = body[off : off + klen]
            if len(key) != klen:
                raise Malformed("truncated account key")
            off += klen
            op: Operation = CreateAccount(new_id, key)
        elif kind == KIND_CREATE_OFFER:
            op = CreateOffer(*_CREATE_OFFER.unpack_from(body, off))
            off += _CREATE_OFFER.size
        elif kind == KIND_CANCEL_OFFER:
            op = CancelOffer(*_CANCEL_OFFER.unpack_from(body, off))
            off += _CANCEL_OFFER.size
        elif kind == KIND_PAYMENT:
            op = Payment(*_PAYMENT.unpack_from(body, off))
            off += _PAYMENT.size
        else:
            raise Malformed(f"unknown transaction kind {kind}")
        (slen,) = _U16.unpack_from(body, off)
        off += _U16.size
        sig = body[off : off + slen]
        if len(sig) != slen:
            raise Malformed("truncated signature")
        off += slen
    except struct.error:
        raise Malformed("truncated transaction") from None
    if off != len(body):
        raise Malformed("trailing bytes in transaction")
    return Transaction(account, seq, fee, op, sig)


def deserialize_tx(data: bytes) -> Transaction:
    """Decode exactly one length-prefixed record."""
    if len(data) < _U32.size:
        raise Malformed("missing length prefix")
    (n,) = _U32.unpack_from(data, 0)
    if n != len(data) - _U32.size:
        raise Malformed("length prefix disagrees with record size")
    return _decode_body(bytes(data[_U32.size :]))


def iter_records(data: bytes, offset: int = 0) -> Iterable[Transaction]:
    """Decode back-to-back records until the buffer is exhausted."""
    view = memoryview(data)
    while offset < len(data):
        if offset + _U32.size > len(data):
            raise Malformed("truncated length prefix")
        (n,) = _U32.unpack_from(data, offset)
        end = offset + _U32.size + n
        if end > len(data):
            raise Malformed("truncated record")
        yield _decode_body(bytes(view[offset + _U32.size : end]))
        offset = end


def encode_batch(txs: Iterable[Transaction]) -> bytes:
    records = [serialize_tx(t) for t in txs]
    return BATCH_MAGIC + _U32.pack(BATCH_VERSION) + struct.pack(">Q", len(records)) + b"".join(records)


def decode_batch(data: bytes) -> list[Transaction]:
    if len(data) < 16 or data[:4] != BATCH_MAGIC:
        raise Malformed("not a transaction batch")
    (version,) = _U32.unpack_from(data, 4)
    if version != BATCH_VERSION:
        raise Malformed(f"unsupported batch version {version}")
    (count,) = struct.unpack_from(">Q", data, 8)
    txs = list(iter_records(data, 16))
    if len(txs) != count:
        raise Malformed("record count mismatch")
    return txs


def write_batch(path: str | Path, txs: Iterable[Transaction]) -> None:
    Path(path).write_bytes(encode_batch(txs))


def read_batch(path: str | Path) -> list[Transaction]:
    return decode_batch(Path(path).read_bytes())
