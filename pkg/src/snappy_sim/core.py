"""Transactions, payment intents, quorum bitvectors and per-actor state.

The binary codec is canonical: every field has a fixed width except the
opaque ``data`` payload, which is length-prefixed, so equal values always
encode to identical bytes and ``decode_tx`` rejects anything it would not
have produced itself.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Iterable, Optional

from .accounts import ADDRESS_SIZE, AccountId, AccountSig
from .bls import G1_SIZE, AggregateSignature

MAX_AMOUNT = 2**128 - 1
MAX_U64 = 2**64 - 1
QUORUM_BITS = 256
MAX_CONSORTIUM = QUORUM_BITS

INTENT_TAG = b"SNAPPY-SIM-V1/intent"
TXHASH_TAG = b"SNAPPY-SIM-V1/txhash"

ZERO_ADDRESS = AccountId(b"\x00" * ADDRESS_SIZE)


class CodecError(ValueError):
    pass


class Op(enum.IntEnum):
    TRANSFER = 0
    PAY = 1
    REGISTER_CUSTOMER = 2
    REGISTER_MERCHANT = 3
    REGISTER_STATEKEEPER = 4
    CLAIM = 5
    CLEAR = 6
    WITHDRAW = 7


def check_amount(value: int) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise TypeError(f"amount must be an int, got {type(value).__name__}")
    if value < 0 or value > MAX_AMOUNT:
        raise OverflowError(f"amount {value} outside u128")
    return value


def add_amounts(*values: int) -> int:
    return check_amount(sum(check_amount(v) for v in values))


def sub_amount(a: int, b: int) -> int:
    if b > a:
        raise OverflowError(f"amount underflow: {a} - {b}")
    return check_amount(a - b)


def majority(k: int) -> int:
    """Smallest quorum size: ceil((k+1)/2)."""
    return k // 2 + 1


@dataclass(frozen=True)
class QuorumBitvector:
    bits: int
    k: int

    def __post_init__(self) -> None:
        if not 1 <= self.k <= MAX_CONSORTIUM:
            raise ValueError(f"consortium size {self.k} outside 1..{MAX_CONSORTIUM}")
        if self.bits < 0 or self.bits >> self.k:
            raise ValueError(f"quorum sets bits beyond consortium size {self.k}")

    @classmethod
    def from_indices(cls, indices: Iterable[int], k: int) -> "QuorumBitvector":
        bits = 0
        for i in indices:
            if not 0 <= i < k:
                raise ValueError(f"statekeeper index {i} outside 0..{k - 1}")
            bits |= 1 << i
        return cls(bits, k)

    def indices(self) -> list[int]:
        return [i for i in range(self.k) if self.bits >> i & 1]

    def popcount(self) -> int:
        return self.bits.bit_count()

    def is_majority(self) -> bool:
        return self.popcount() >= majority(self.k)

    def __and__(self, other: "QuorumBitvector") -> "QuorumBitvector":
        return QuorumBitvector(self.bits & other.bits, max(self.k, other.k))

    def to_bytes(self) -> bytes:
        return self.bits.to_bytes(QUORUM_BITS // 8, "big")


@dataclass(frozen=True)
class PaymentIntent:
    frm: AccountId
    merchant: AccountId
    value: int
    index: int
    nonce: int

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("intent index starts at 1")
        if check_amount(self.value) == 0:
            raise ValueError("intent value must be positive")


def intent_digest(intent: PaymentIntent) -> bytes:
    """The message statekeepers sign."""
    body = (
        bytes(intent.frm)
        + bytes(intent.merchant)
        + intent.value.to_bytes(16, "big")
        + struct.pack(">QQ", intent.index, intent.nonce)
    )
    return hashlib.sha256(INTENT_TAG + body).digest()


@dataclass(frozen=True)
class Transaction:
    to: AccountId
    frm: AccountId
    value: int
    nonce: int
    op: Op
    merchant: Optional[AccountId] = None
    index: int = 0
    agg_sig: Optional[AggregateSignature] = None
    quorum: Optional[QuorumBitvector] = None
    data: bytes = b""
    sig: AccountSig = field(default_factory=AccountSig.empty)

    def __post_init__(self) -> None:
        check_amount(self.value)
        if not 0 <= self.nonce <= MAX_U64 or not 0 <= self.index <= MAX_U64:
            raise ValueError("nonce/index outside u64")
        pay_fields = (self.merchant, self.agg_sig, self.quorum)
        if self.op == Op.PAY:
            if any(f is None for f in pay_fields) or self.index < 1:
                raise ValueError("Pay transaction needs merchant, index, aggregate and quorum")
        elif any(f is not None for f in pay_fields) or self.index:
            raise ValueError(f"{self.op.name} transaction carries Pay-only fields")

    @property
    def is_pay(self) -> bool:
        return self.op == Op.PAY

    def intent(self) -> PaymentIntent:
        return PaymentIntent(self.frm, self.merchant, self.value, self.index, self.nonce)

    def with_sig(self, sig: AccountSig) -> "Transaction":
        return Transaction(**{**self.__dict__, "sig": sig})


_HEAD = struct.Struct(">BB20s20s16sQB")
_SIG = struct.Struct(">B32s32s")
VERSION = 1


def _encode_unsigned(tx: Transaction) -> bytes:
    flags = 1 if tx.is_pay else 0
    out = [
        _HEAD.pack(VERSION, tx.op, tx.to, tx.frm, tx.value.to_bytes(16, "big"), tx.nonce, flags)
    ]
    if tx.is_pay:
        out.append(bytes(tx.merchant))
        out.append(struct.pack(">Q", tx.index))
        out.append(tx.agg_sig.point)
        out.append(tx.quorum.to_bytes())
    out.append(struct.pack(">I", len(tx.data)))
    out.append(tx.data)
    return b"".join(out)


def signing_bytes(tx: Transaction) -> bytes:
    return _encode_unsigned(tx)


def encode_tx(tx: Transaction) -> bytes:
    s = tx.sig
    return _encode_unsigned(tx) + _SIG.pack(s.v, s.r.to_bytes(32, "big"), s.s.to_bytes(32, "big"))


def _take(buf: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise CodecError("truncated transaction")
    return buf[pos : pos + n], pos + n


def decode_tx_prefix(buf: bytes, k: int, pos: int = 0) -> tuple[Transaction, int]:
    """Decode one transaction starting at ``pos``; returns it and the end offset."""
    head, pos = _take(buf, pos, _HEAD.size)
    version, op, to, frm, value, nonce, flags = _HEAD.unpack(head)
    if version != VERSION:
        raise CodecError(f"unknown codec version {version}")
    try:
        op = Op(op)
    except ValueError:
        raise CodecError(f"unknown op {op}") from None
    if flags not in (0, 1) or bool(flags) != (op == Op.PAY):
        raise CodecError("flags do not match op")
    merchant = index = agg = quorum = None
    if flags:
        raw, pos = _take(buf, pos, ADDRESS_SIZE)
        merchant = AccountId(raw)
        raw, pos = _take(buf, pos, 8)
        (index,) = struct.unpack(">Q", raw)
        raw, pos = _take(buf, pos, G1_SIZE)
        agg = AggregateSignature(raw)
        raw, pos = _take(buf, pos, QUORUM_BITS // 8)
        bits = int.from_bytes(raw, "big")
        if bits >> k:
            raise CodecError(f"quorum sets bits beyond consortium size {k}")
        quorum = QuorumBitvector(bits, k)
    raw, pos = _take(buf, pos, 4)
    (dlen,) = struct.unpack(">I", raw)
    data, pos = _take(buf, pos, dlen)
    raw, pos = _take(buf, pos, _SIG.size)
    v, r, s = _SIG.unpack(raw)
    try:
        tx = Transaction(
            to=AccountId(to),
            frm=AccountId(frm),
            value=int.from_bytes(value, "big"),
            nonce=nonce,
            op=op,
            merchant=merchant,
            index=index or 0,
            agg_sig=agg,
            quorum=quorum,
            data=data,
            sig=AccountSig(v, int.from_bytes(r, "big"), int.from_bytes(s, "big")),
        )
    except ValueError as exc:
        raise CodecError(str(exc)) from None
    return tx, pos


def decode_tx(buf: bytes, k: int) -> Transaction:
    tx, end = decode_tx_prefix(buf, k)
    if end != len(buf):
        raise CodecError("trailing bytes after transaction")
    return tx


def tx_hash(tx: Transaction) -> bytes:
    """Digest over exactly (from, to, value, index)."""
    body = bytes(tx.frm) + bytes(tx.to) + tx.value.to_bytes(16, "big") + struct.pack(">Q", tx.index)
    return hashlib.sha3_256(TXHASH_TAG + body).digest()


def tx_id(tx: Transaction) -> bytes:
    """Identity of the full signed encoding (mempool deduplication, traces)."""
    return hashlib.sha256(encode_tx(tx)).digest()


# --- arbiter-side records -------------------------------------------------


@dataclass
class FinalizedEntry:
    tx_hash: bytes
    agg_sig: AggregateSignature
    quorum: QuorumBitvector
    verified: bool
    block: int
    # intent digest the aggregate signs; lazy verification needs it
    message: bytes = b""


@dataclass
class CustomerRecord:
    collateral: int
    clearance: int = 0
    finalized: dict[int, FinalizedEntry] = field(default_factory=dict)
    # tx hash -> amount already paid out by settlement for that tx
    settled: dict[bytes, int] = field(default_factory=dict)
    # indices <= base_index were pruned after the expiration window
    base_index: int = 0


@dataclass
class StatekeeperRecord:
    position: int
    public: bytes
    deposit: int
    allocation: dict[AccountId, int] = field(default_factory=dict)


# --- actor-local state ----------------------------------------------------


@dataclass
class CustomerLocalState:
    approved: list[Transaction] = field(default_factory=list)
    pending: list[Transaction] = field(default_factory=list)
    next_index: int = 1

    def pending_total(self) -> int:
        return add_amounts(*(t.value for t in self.pending)) if self.pending else 0


@dataclass
class StatekeeperLocalState:
    approved_intents: dict[tuple[AccountId, int], bytes] = field(default_factory=dict)


@dataclass
class MerchantLocalState:
    remaining: dict[int, int] = field(default_factory=dict)
    outstanding: dict[int, int] = field(default_factory=dict)


# --- JSON rendering -------------------------------------------------------


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, AccountId):
        return str(obj)
    if isinstance(obj, (bytes, bytearray)):
        return bytes(obj).hex()
    if isinstance(obj, enum.Enum):
        return obj.name
    if isinstance(obj, QuorumBitvector):
        return {"k": obj.k, "members": obj.indices()}
    if isinstance(obj, (AggregateSignature,)):
        return obj.point.hex()
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {_key(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = [to_jsonable(v) for v in obj]
        return sorted(items, key=repr) if isinstance(obj, (set, frozenset)) else items
    return obj


def _key(k: Any) -> str:
    if isinstance(k, tuple):
        return ":".join(_key(x) for x in k)
    j = to_jsonable(k)
    return j if isinstance(j, str) else json.dumps(j)


def dumps(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))
