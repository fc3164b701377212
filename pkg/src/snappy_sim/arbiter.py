"""The settlement contract, run as a deterministic state machine.

The chain simulator calls :meth:`Arbiter.execute` once per included
transaction addressed to the Arbiter. The contract only sees its own state and
that transaction. A rejected call raises :class:`ArbiterError` and the chain
reverts the value transfer; an accepted call returns the payouts the chain
must apply from the Arbiter's balance.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

from . import bls
from .accounts import AccountId
from .core import (
    CodecError,
    CustomerRecord,
    FinalizedEntry,
    Op,
    QuorumBitvector,
    StatekeeperRecord,
    Transaction,
    add_amounts,
    decode_tx_prefix,
    dumps,
    encode_tx,
    intent_digest,
    sub_amount,
    to_jsonable,
    tx_hash,
    MAX_CONSORTIUM,
)

PER_SIGNER = "per_signer"
AGGREGATE = "aggregate"
VERIFY_MODES = (PER_SIGNER, AGGREGATE)

# how much a conflicting tuple lets the claimant take from an equivocator
PENALTY_RESIDUAL = "residual"
PENALTY_DIFFERENCE = "difference"
PENALTY_RULES = (PENALTY_RESIDUAL, PENALTY_DIFFERENCE)


class ArbiterError(Exception):
    """The call is rejected; the chain reverts it."""


@dataclass
class ArbiterConfig:
    k: int
    clearance_period: int = 6646  # ~24h of 13s blocks
    expiration_window: Optional[int] = 6646
    verify_mode: str = PER_SIGNER
    penalty_rule: str = PENALTY_RESIDUAL
    # None verifies the preceding-pending list itemwise
    batch_strategy: Optional[str] = None

    def __post_init__(self) -> None:
        if not 1 <= self.k <= MAX_CONSORTIUM:
            raise ValueError(f"k={self.k} outside 1..{MAX_CONSORTIUM}")
        if self.verify_mode not in VERIFY_MODES:
            raise ValueError(f"unknown verify mode {self.verify_mode!r}")
        if self.penalty_rule not in PENALTY_RULES:
            raise ValueError(f"unknown penalty rule {self.penalty_rule!r}")
        if self.batch_strategy not in (None, *bls.BATCH_STRATEGIES):
            raise ValueError(f"unknown batch strategy {self.batch_strategy!r}")


@dataclass
class CostMeter:
    storage_writes: int = 0
    storage_reads: int = 0
    pairings: int = 0
    group_exps: int = 0
    group_adds: int = 0
    hash_ops: int = 0

    def reset(self) -> None:
        for name in self.__dataclass_fields__:
            setattr(self, name, 0)

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class Payout:
    to: AccountId
    amount: int
    reason: str
    source: str = "arbiter"
    ref: bytes = b""


@dataclass
class SettlementClaim:
    pending_tx: Transaction
    preceding_pending: list[Transaction] = field(default_factory=list)
    conflict_tuples: list[tuple[Transaction, Transaction]] = field(default_factory=list)


@dataclass
class CallResult:
    payouts: list[Payout]
    events: list[dict[str, Any]]
    cost: dict[str, int]


def encode_claim(claim: SettlementClaim) -> bytes:
    parts = [encode_tx(claim.pending_tx), struct.pack(">H", len(claim.preceding_pending))]
    parts += [encode_tx(t) for t in claim.preceding_pending]
    parts.append(struct.pack(">H", len(claim.conflict_tuples)))
    for a, b in claim.conflict_tuples:
        parts += [encode_tx(a), encode_tx(b)]
    return b"".join(parts)


def decode_claim(data: bytes, k: int) -> SettlementClaim:
    pending, pos = decode_tx_prefix(data, k)

    def count(pos: int) -> tuple[int, int]:
        if pos + 2 > len(data):
            raise CodecError("truncated claim")
        return struct.unpack(">H", data[pos : pos + 2])[0], pos + 2

    n, pos = count(pos)
    preceding = []
    for _ in range(n):
        tx, pos = decode_tx_prefix(data, k, pos)
        preceding.append(tx)
    n, pos = count(pos)
    tuples = []
    for _ in range(n):
        a, pos = decode_tx_prefix(data, k, pos)
        b, pos = decode_tx_prefix(data, k, pos)
        tuples.append((a, b))
    if pos != len(data):
        raise CodecError("trailing bytes after claim")
    return SettlementClaim(pending, preceding, tuples)


def encode_statekeeper_registration(
    public: bytes, proof: bls.PossessionProof, allocation: Optional[dict[AccountId, int]] = None
) -> bytes:
    out = [public, proof.proof, struct.pack(">H", len(allocation or {}))]
    for m, amount in sorted((allocation or {}).items()):
        out.append(bytes(m) + amount.to_bytes(16, "big"))
    return b"".join(out)


def decode_statekeeper_registration(
    data: bytes,
) -> tuple[bytes, bls.PossessionProof, dict[AccountId, int]]:
    head = bls.G2_SIZE + bls.G1_SIZE
    if len(data) < head + 2:
        raise CodecError("truncated statekeeper registration")
    public, proof = data[: bls.G2_SIZE], bls.PossessionProof(data[bls.G2_SIZE : head])
    (n,) = struct.unpack(">H", data[head : head + 2])
    body = data[head + 2 :]
    if len(body) != n * 36:
        raise CodecError("malformed allocation policy")
    policy = {}
    for i in range(n):
        rec = body[i * 36 : (i + 1) * 36]
        policy[AccountId(rec[:20])] = int.from_bytes(rec[20:], "big")
    return public, proof, policy


def find_overlap(q1: QuorumBitvector, q2: QuorumBitvector) -> list[int]:
    """Statekeeper positions present in both quorums."""
    return (q1 & q2).indices()


class Arbiter:
    def __init__(self, address: AccountId, config: ArbiterConfig):
        self.address = address
        self.config = config
        self.customers: dict[AccountId, CustomerRecord] = {}
        self.merchants: list[AccountId] = []
        self.statekeepers: dict[AccountId, StatekeeperRecord] = {}
        self.by_position: list[AccountId] = []
        self.forfeited = 0
        self.meter = CostMeter()
        self._events: list[dict[str, Any]] = []
        self._block = 0

    # --- queries -------------------------------------------------------

    @property
    def merchants_sealed(self) -> bool:
        return bool(self.statekeepers)

    @property
    def consortium_complete(self) -> bool:
        return len(self.by_position) == self.config.k

    def statekeeper_keys(self) -> list[bytes]:
        return [self.statekeepers[a].public for a in self.by_position]

    def held_funds(self) -> int:
        """Value the contract must hold: all collaterals plus forfeited penalties."""
        return add_amounts(
            *(c.collateral for c in self.customers.values()),
            *(s.deposit for s in self.statekeepers.values()),
            self.forfeited,
        )

    def allocation(self, statekeeper_position: int, merchant: AccountId) -> int:
        sk = self.statekeepers[self.by_position[statekeeper_position]]
        return sk.allocation.get(merchant, 0)

    # --- entry point ---------------------------------------------------

    def execute(self, tx: Transaction, block: int) -> CallResult:
        self.meter.reset()
        self._events = []
        self._block = block
        handler = {
            Op.PAY: self.record_and_forward,
            Op.REGISTER_CUSTOMER: self.register_customer,
            Op.REGISTER_MERCHANT: self.register_merchant,
            Op.REGISTER_STATEKEEPER: self.register_statekeeper,
            Op.CLAIM: self._claim_tx,
            Op.CLEAR: self.clear_collateral,
            Op.WITHDRAW: self.withdraw_collateral,
        }.get(tx.op)
        if handler is None:
            raise ArbiterError(f"unsupported op {tx.op.name}")
        payouts = handler(tx)
        return CallResult(payouts, self._events, self.meter.as_dict())

    def _emit(self, kind: str, **fields: Any) -> None:
        self._events.append({"kind": kind, **to_jsonable(fields)})

    # --- registration --------------------------------------------------

    def register_merchant(self, tx: Transaction) -> list[Payout]:
        if self.merchants_sealed:
            raise ArbiterError("merchant set is sealed")
        if tx.frm in self.merchants:
            raise ArbiterError("merchant already registered")
        self.meter.storage_reads += 1
        self.meter.storage_writes += 1
        self.merchants.append(tx.frm)
        self._emit("merchant_registered", merchant=tx.frm)
        return self._refund_value(tx)

    def register_customer(self, tx: Transaction) -> list[Payout]:
        if tx.value <= 0:
            raise ArbiterError("customer collateral must be positive")
        if tx.frm in self.customers:
            raise ArbiterError("customer already registered")
        self.meter.storage_reads += 1
        self.meter.storage_writes += 1
        self.customers[tx.frm] = CustomerRecord(collateral=tx.value)
        self._emit("customer_registered", customer=tx.frm, collateral=tx.value)
        return []

    def register_statekeeper(self, tx: Transaction) -> list[Payout]:
        if self.consortium_complete:
            raise ArbiterError("consortium is full")
        if tx.frm in self.statekeepers:
            raise ArbiterError("statekeeper already registered")
        if tx.value <= 0:
            raise ArbiterError("statekeeper collateral must be positive")
        try:
            public, proof, policy = decode_statekeeper_registration(tx.data)
        except (CodecError, ValueError) as exc:
            raise ArbiterError(f"bad registration payload: {exc}") from None
        self.meter.pairings += 2
        self.meter.hash_ops += 1
        if not bls.verify_possession(public, proof):
            raise ArbiterError("possession proof rejected")
        if any(s.public == public for s in self.statekeepers.values()):
            raise ArbiterError("BLS key already registered")
        if not self.merchants:
            raise ArbiterError("no merchants to allocate collateral to")
        if policy:
            unknown = set(policy) - set(self.merchants)
            if unknown:
                raise ArbiterError("allocation names unregistered merchants")
            if sum(policy.values()) > tx.value:
                raise ArbiterError("allocation exceeds deposit")
            allocation = {m: policy.get(m, 0) for m in self.merchants}
        else:
            share = tx.value // max(self.config.k, len(self.merchants))
            allocation = {m: share for m in self.merchants}
        rec = StatekeeperRecord(len(self.by_position), public, tx.value, allocation)
        self.statekeepers[tx.frm] = rec
        self.by_position.append(tx.frm)
        self.meter.storage_writes += 1 + len(allocation)
        self._emit(
            "statekeeper_registered",
            statekeeper=tx.frm,
            position=rec.position,
            public=public,
            deposit=tx.value,
            per_merchant=sorted(set(allocation.values())),
        )
        return []

    def _refund_value(self, tx: Transaction) -> list[Payout]:
        if tx.value:
            return [Payout(tx.frm, tx.value, "refund")]
        return []

    # --- payments ------------------------------------------------------

    def record_and_forward(self, tx: Transaction) -> list[Payout]:
        """Log the payment and forward its value; no signature check on this path."""
        c = tx.frm
        rec = self.customers.get(c)
        self.meter.storage_reads += 1
        h = tx_hash(tx)
        self.meter.hash_ops += 1
        if rec is not None and tx.index not in rec.finalized and tx.index > rec.base_index:
            rec.finalized[tx.index] = FinalizedEntry(
                tx_hash=h,
                agg_sig=tx.agg_sig,
                quorum=tx.quorum,
                verified=False,
                block=self._block,
                message=intent_digest(tx.intent()),
            )
            self.meter.hash_ops += 1
            self.meter.storage_writes += 1
            self._emit("payment_logged", customer=c, index=tx.index, tx_hash=h, merchant=tx.merchant)
            return [Payout(tx.merchant, tx.value, "forward", ref=intent_digest(tx.intent()))]
        self._emit("payment_returned", customer=c, index=tx.index, tx_hash=h)
        return [Payout(c, tx.value, "return", ref=intent_digest(tx.intent()))]

    # --- verification --------------------------------------------------

    def _keys_for(self, quorum: QuorumBitvector) -> tuple[bytes, ...]:
        return tuple(self.statekeepers[self.by_position[i]].public for i in quorum.indices())

    def _verify_approval(self, message: bytes, agg: bls.AggregateSignature, quorum: QuorumBitvector) -> bool:
        if quorum.k != self.config.k or not quorum.is_majority():
            return False
        keys = self._keys_for(quorum)
        self.meter.storage_reads += len(keys)
        self.meter.hash_ops += 1
        if self.config.verify_mode == PER_SIGNER:
            self.meter.pairings += len(keys) + 1
            return bls.verify_aggregate_per_signer(message, agg, keys)
        self.meter.pairings += 2
        self.meter.group_adds += len(keys) - 1
        return bls.verify_aggregate(message, agg, keys)

    def verify_tx(self, tx: Transaction) -> bool:
        if not tx.is_pay:
            return False
        self.meter.hash_ops += 1
        return self._verify_approval(intent_digest(tx.intent()), tx.agg_sig, tx.quorum)

    def _verify_many(self, txs: list[Transaction]) -> bool:
        if not txs:
            return True
        strategy = self.config.batch_strategy
        if strategy is None:
            return all(self.verify_tx(t) for t in txs)
        if any(not t.is_pay or t.quorum.k != self.config.k or not t.quorum.is_majority() for t in txs):
            return False
        items = [(intent_digest(t.intent()), t.agg_sig, self._keys_for(t.quorum)) for t in txs]
        self.meter.hash_ops += 2 * len(items)
        self.meter.group_exps += 2 * len(items)
        self.meter.pairings += bls.batch_pairing_count(items, strategy)
        seed = int.from_bytes(hashlib.sha256(b"".join(m for m, _, _ in items)).digest()[:8], "big")
        return bls.batch_verify(items, strategy=strategy, seed=seed ^ self._block)

    # --- settlement ----------------------------------------------------

    def _claim_tx(self, tx: Transaction) -> list[Payout]:
        try:
            claim = decode_claim(tx.data, self.config.k)
        except (CodecError, ValueError) as exc:
            raise ArbiterError(f"bad claim payload: {exc}") from None
        return self.claim_settlement(claim)

    def _prune(self, rec: CustomerRecord) -> None:
        window = self.config.expiration_window
        if window is None:
            return
        horizon = self._block - window
        while True:
            nxt = rec.base_index + 1
            entry = rec.finalized.get(nxt)
            if entry is None or entry.block >= horizon:
                return
            del rec.finalized[nxt]
            rec.base_index = nxt
            self.meter.storage_writes += 1

    def claim_settlement(self, claim: SettlementClaim) -> list[Payout]:
        tp = claim.pending_tx
        if not tp.is_pay:
            raise ArbiterError("claim must reference a Pay transaction")
        if not self.consortium_complete:
            raise ArbiterError("consortium not initialized")
        rec = self.customers.get(tp.frm)
        if rec is None:
            raise ArbiterError("unknown customer")
        self._prune(rec)
        if tp.index <= rec.base_index:
            raise ArbiterError("transaction outside expiration window")
        key = intent_digest(tp.intent())
        self.meter.hash_ops += 1
        already = rec.settled.get(key)
        if already is not None and already >= tp.value:
            raise ArbiterError("transaction already processed")
        entry = rec.finalized.get(tp.index)
        if already is None and entry is not None and entry.message == key:
            raise ArbiterError("transaction was recorded on chain")
        if not self._verify_approval(key, tp.agg_sig, tp.quorum):
            raise ArbiterError("pending transaction lacks a valid majority approval")

        payouts: list[Payout] = []
        paid = already or 0
        if already is not None:
            self._emit("settlement_topup", customer=tp.frm, index=tp.index, owed=tp.value - paid)
        residual = self.claim_customer(tp, claim.preceding_pending, payouts, tp.value - paid)
        paid += tp.value - paid - residual
        if residual > 0:
            paid += self.claim_statekeeper(residual, tp, list(claim.conflict_tuples), payouts)
        if tp.index not in rec.finalized:
            # a conflicting record already there stays: it is the evidence
            rec.finalized[tp.index] = FinalizedEntry(
                tx_hash(tp), tp.agg_sig, tp.quorum, True, self._block, key
            )
        rec.settled[key] = paid
        self.meter.storage_writes += 2
        self._emit(
            "settlement",
            customer=tp.frm,
            index=tp.index,
            merchant=tp.merchant,
            intent=key,
            value=tp.value,
            paid=paid,
        )
        return payouts

    def claim_customer(
        self,
        tp: Transaction,
        preceding: list[Transaction],
        payouts: list[Payout],
        owed: Optional[int] = None,
    ) -> int:
        """Recover from the customer's collateral; returns the residual.

        ``owed`` is below the transaction value only for a top-up claim, i.e. a
        second claim on a transaction whose first settlement fell short. Its own
        processed-log entry then does not count as a conflicting record.
        """
        owed = tp.value if owed is None else owed
        c = tp.frm
        key = intent_digest(tp.intent())
        rec = self.customers[c]
        store = rec.finalized
        for i in sorted(store):
            e = store[i]
            self.meter.storage_reads += 1
            if e.verified:
                continue
            if self._verify_approval(e.message, e.agg_sig, e.quorum):
                e.verified = True
                self.meter.storage_writes += 1
            else:
                del store[i]
                self.meter.storage_writes += 1
                self._emit("entry_deleted", customer=c, index=i)

        for t in preceding:
            if not t.is_pay or t.frm != c or t.index >= tp.index:
                raise ArbiterError("preceding list holds an unrelated transaction")
        if any(a.index > b.index for a, b in zip(preceding, preceding[1:])):
            raise ArbiterError("preceding list not sorted by index")
        listed = {t.index for t in preceding}
        for i in range(rec.base_index + 1, tp.index):
            if i not in store and i not in listed:
                raise ArbiterError(f"preceding index {i} missing")
        if not self._verify_many(preceding):
            raise ArbiterError("preceding transaction lacks approval")

        logged = store.get(tp.index)
        if logged is not None and not (owed < tp.value and logged.message == key):
            self._emit("equivocation_detected", customer=c, index=tp.index)
            return owed
        # an entry already in the processed log is no longer pending: the
        # claimant built its list before an earlier claim in this or a recent
        # block settled it, so reserving for it again would double count
        still_pending = [t.value for t in preceding if t.index not in store]
        reserved = add_amounts(*still_pending) if still_pending else 0
        cov = max(0, rec.collateral - reserved)
        rho = min(cov, owed)
        rec.collateral = sub_amount(rec.collateral, rho)
        self.meter.storage_writes += 1
        if rho:
            payouts.append(Payout(tp.merchant, rho, "settlement", "customer", intent_digest(tp.intent())))
        self._emit("customer_claim", customer=c, index=tp.index, reserved=reserved, paid=rho)
        return owed - rho

    def claim_statekeeper(
        self,
        residual: int,
        tp: Transaction,
        tuples: list[tuple[Transaction, Transaction]],
        payouts: list[Payout],
    ) -> int:
        """Recover the residual from equivocators' allocations; returns amount paid."""
        m = tp.merchant
        left = residual
        deducted = 0
        queue = list(tuples)
        while left > 0 and queue:
            a, b = queue.pop(0)
            if not (a.is_pay and b.is_pay):
                continue
            if a.frm != tp.frm or b.frm != tp.frm or a.index != b.index or a.index > tp.index:
                continue
            if intent_digest(a.intent()) == intent_digest(b.intent()):
                continue
            if not (self.verify_tx(a) and self.verify_tx(b)):
                continue
            overlap = find_overlap(a.quorum, b.quorum)
            if not overlap:
                continue
            if self.config.penalty_rule == PENALTY_RESIDUAL:
                amount = left
            else:
                amount = abs(a.value - b.value)
            taken = self._deduct(overlap, m, amount, partial=self.config.penalty_rule == PENALTY_RESIDUAL)
            deducted += taken
            left -= taken
        pay = min(residual, deducted)
        if deducted > pay:
            self.forfeited += deducted - pay
        if pay:
            payouts.append(Payout(m, pay, "settlement", "statekeeper", intent_digest(tp.intent())))
        self._emit("statekeeper_claim", customer=tp.frm, index=tp.index, residual=residual, paid=pay)
        return pay

    def _deduct(self, positions: list[int], merchant: AccountId, amount: int, partial: bool) -> int:
        if amount <= 0:
            return 0
        recs = [self.statekeepers[self.by_position[p]] for p in sorted(positions)]
        self.meter.storage_reads += len(recs)
        for r in recs:
            if r.allocation.get(merchant, 0) >= amount:
                self._charge(r, merchant, amount)
                return amount
        if not partial:
            return 0
        taken = 0
        for r in recs:
            part = min(r.allocation.get(merchant, 0), amount - taken)
            if part:
                self._charge(r, merchant, part)
                taken += part
            if taken == amount:
                break
        return taken

    def _charge(self, rec: StatekeeperRecord, merchant: AccountId, amount: int) -> None:
        rec.allocation[merchant] = sub_amount(rec.allocation[merchant], amount)
        rec.deposit = sub_amount(rec.deposit, amount)
        self.meter.storage_writes += 2
        self._emit("statekeeper_deducted", position=rec.position, merchant=merchant, amount=amount)

    # --- exit ----------------------------------------------------------

    def clear_collateral(self, tx: Transaction) -> list[Payout]:
        rec = self.customers.get(tx.frm)
        if rec is None:
            raise ArbiterError("unknown customer")
        if rec.clearance:
            raise ArbiterError("clearance already requested")
        rec.clearance = self._block
        self.meter.storage_writes += 1
        self._emit("clearance_started", customer=tx.frm, block=self._block)
        return self._refund_value(tx)

    def withdraw_collateral(self, tx: Transaction) -> list[Payout]:
        rec = self.customers.get(tx.frm)
        if rec is None or not rec.clearance:
            raise ArbiterError("no clearance in progress")
        if self._block < rec.clearance + self.config.clearance_period:
            raise ArbiterError("clearance period has not elapsed")
        del self.customers[tx.frm]
        self.meter.storage_writes += 1
        self._emit("collateral_withdrawn", customer=tx.frm, amount=rec.collateral)
        out = self._refund_value(tx)
        if rec.collateral:
            out.append(Payout(tx.frm, rec.collateral, "withdraw"))
        return out

    # --- snapshots -----------------------------------------------------

    def snapshot(self) -> dict[str, Any]:
        return to_jsonable(
            {
                "address": self.address,
                "config": asdict(self.config),
                "customers": self.customers,
                "merchants": self.merchants,
                "statekeepers": self.statekeepers,
                "by_position": self.by_position,
                "forfeited": self.forfeited,
            }
        )

    @classmethod
    def from_snapshot(cls, snap: dict[str, Any]) -> "Arbiter":
        cfg = ArbiterConfig(**snap["config"])
        arb = cls(AccountId.from_hex(snap["address"]), cfg)
        arb.merchants = [AccountId.from_hex(m) for m in snap["merchants"]]
        arb.by_position = [AccountId.from_hex(a) for a in snap["by_position"]]
        arb.forfeited = snap["forfeited"]
        for addr, s in snap["statekeepers"].items():
            arb.statekeepers[AccountId.from_hex(addr)] = StatekeeperRecord(
                position=s["position"],
                public=bytes.fromhex(s["public"]),
                deposit=s["deposit"],
                allocation={AccountId.from_hex(m): v for m, v in s["allocation"].items()},
            )
        for addr, c in snap["customers"].items():
            rec = CustomerRecord(
                collateral=c["collateral"],
                clearance=c["clearance"],
                base_index=c["base_index"],
                settled={bytes.fromhex(h): v for h, v in c["settled"].items()},
            )
            for idx, e in c["finalized"].items():
                rec.finalized[int(idx)] = FinalizedEntry(
                    tx_hash=bytes.fromhex(e["tx_hash"]),
                    agg_sig=bls.AggregateSignature(bytes.fromhex(e["agg_sig"])),
                    quorum=QuorumBitvector.from_indices(e["quorum"]["members"], e["quorum"]["k"]),
                    verified=e["verified"],
                    block=e["block"],
                    message=bytes.fromhex(e["message"]),
                )
            arb.customers[AccountId.from_hex(addr)] = rec
        return arb

    def export_json(self) -> str:
        """Canonical JSON: sorted keys, no whitespace, bytes as hex."""
        return dumps(self.snapshot())

    @classmethod
    def import_json(cls, text: str) -> "Arbiter":
        return cls.from_snapshot(json.loads(text))
