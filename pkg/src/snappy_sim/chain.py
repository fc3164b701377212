"""Deterministic ledger: mempool, blocks, nonces, balances and Arbiter calls.

There are no forks. A transaction is final once it sits ``finality_depth``
blocks below the head, which stands in for the confirmation delay of a real
chain. Miners may reorder and temporarily censor but never include an invalid
transaction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .accounts import AccountId, AccountKey, verify_account_sig
from .arbiter import Arbiter, ArbiterError, CallResult, decode_claim
from .core import (
    CodecError,
    Op,
    Transaction,
    add_amounts,
    intent_digest,
    signing_bytes,
    sub_amount,
    to_jsonable,
    tx_id,
)


@dataclass
class ChainConfig:
    block_interval: int = 13_000  # sim-ms
    finality_depth: int = 10
    block_capacity: int = 500

    def __post_init__(self) -> None:
        if self.block_interval <= 0 or self.finality_depth < 1 or self.block_capacity < 1:
            raise ValueError("invalid chain config")

    @property
    def latency_period(self) -> int:
        """Sim-ms until a freshly included transaction is final."""
        return self.block_interval * self.finality_depth


@dataclass
class CensorWindow:
    """Exclude matching transactions from blocks in [start, end)."""

    start: int
    end: int
    senders: frozenset = frozenset()
    ops: frozenset = frozenset()

    def matches(self, tx: Transaction, height: int) -> bool:
        if not self.start <= height < self.end:
            return False
        if self.senders and tx.frm not in self.senders:
            return False
        if self.ops and tx.op not in self.ops:
            return False
        return True


@dataclass
class MinerPolicy:
    censor: list[CensorWindow] = field(default_factory=list)
    # senders / transactions packed ahead of everything else (colluding miner)
    priority_senders: set = field(default_factory=set)
    priority_txids: set = field(default_factory=set)
    honor_priority: bool = False

    def censored(self, tx: Transaction, height: int) -> bool:
        return any(w.matches(tx, height) for w in self.censor)

    def _favoured(self, e: "PoolEntry") -> bool:
        return e.tx.frm in self.priority_senders or e.txid in self.priority_txids

    def order(self, pool: list["PoolEntry"]) -> list["PoolEntry"]:
        if not (self.priority_senders or self.priority_txids):
            return pool
        first = [e for e in pool if self._favoured(e)]
        rest = [e for e in pool if not self._favoured(e)]
        return first + rest


@dataclass
class PoolEntry:
    tx: Transaction
    txid: bytes
    arrival: int


@dataclass
class Inclusion:
    tx: Transaction
    txid: bytes
    height: int
    status: str  # "ok" or "reverted"
    result: Optional[CallResult] = None
    error: str = ""


@dataclass
class Block:
    height: int
    time: int
    included: list[Inclusion] = field(default_factory=list)
    dropped: list[tuple[bytes, str]] = field(default_factory=list)


class ChainError(ValueError):
    pass


class ChainState:
    def __init__(self, config: ChainConfig, arbiter: Arbiter, policy: Optional[MinerPolicy] = None):
        self.config = config
        self.arbiter = arbiter
        self.policy = policy or MinerPolicy()
        self.height = 0
        self.last_block_time = 0
        self.blocks: list[Block] = []
        self.balances: dict[AccountId, int] = {arbiter.address: 0}
        self.next_nonce: dict[AccountId, int] = {}
        self.registry: dict[AccountId, bytes] = {}
        self.mempool: list[PoolEntry] = []
        self._pool_ids: set[bytes] = set()
        self._arrivals = 0
        self.total_minted = 0
        self.included: dict[bytes, Inclusion] = {}
        # every approved-looking Pay transaction seen anywhere, by customer
        self.observed_pay: dict[AccountId, dict[bytes, Transaction]] = {}
        self.listeners: list[Callable[[Block], None]] = []

    # --- accounts ------------------------------------------------------

    def add_account(self, key: AccountKey, balance: int = 0) -> None:
        self.registry[key.address] = key.public
        self.balances.setdefault(key.address, 0)
        self.next_nonce.setdefault(key.address, 0)
        if balance:
            self.mint(key.address, balance)

    def mint(self, addr: AccountId, amount: int) -> None:
        self.balances[addr] = add_amounts(self.balances.get(addr, 0), amount)
        self.total_minted = add_amounts(self.total_minted, amount)

    def balance(self, addr: AccountId) -> int:
        return self.balances.get(addr, 0)

    def pending_nonce(self, addr: AccountId) -> int:
        """Next nonce to use given both the chain and this sender's pooled txs."""
        n = self.next_nonce.get(addr, 0)
        pooled = {e.tx.nonce for e in self.mempool if e.tx.frm == addr}
        while n in pooled:
            n += 1
        return n

    # --- mempool -------------------------------------------------------

    def submit(self, tx: Transaction, priority: bool = False) -> bool:
        """Admit ``tx`` to the mempool; returns False for duplicates.

        ``priority`` asks a colluding miner to pack the transaction first; the
        honest default policy ignores it.
        """
        public = self.registry.get(tx.frm)
        if public is None:
            raise ChainError("unknown sender")
        if not verify_account_sig(public, signing_bytes(tx), tx.sig):
            raise ChainError("bad account signature")
        tid = tx_id(tx)
        if tid in self._pool_ids or tid in self.included:
            return False
        self._arrivals += 1
        if priority and self.policy.honor_priority:
            self.policy.priority_txids.add(tid)
        self.mempool.append(PoolEntry(tx, tid, self._arrivals))
        self._pool_ids.add(tid)
        self._observe(tx)
        return True

    def in_mempool(self, tx: Transaction) -> bool:
        return tx_id(tx) in self._pool_ids

    def _observe(self, tx: Transaction) -> None:
        found: list[Transaction] = []
        if tx.is_pay:
            found.append(tx)
        elif tx.op == Op.CLAIM and tx.to == self.arbiter.address:
            try:
                claim = decode_claim(tx.data, self.arbiter.config.k)
            except (CodecError, ValueError):
                return
            found.append(claim.pending_tx)
            found += claim.preceding_pending
            for a, b in claim.conflict_tuples:
                found += [a, b]
        for t in found:
            if t.is_pay:
                self.observed_pay.setdefault(t.frm, {})[intent_digest(t.intent())] = t

    # --- blocks --------------------------------------------------------

    def mine_block(self, now: int) -> Block:
        if self.blocks and now < self.last_block_time + self.config.block_interval:
            raise ChainError("block interval not elapsed")
        self.height += 1
        self.last_block_time = now
        block = Block(self.height, now)
        pool = self.policy.order(list(self.mempool))
        removed: set[bytes] = set()
        progress = True
        while progress and len(block.included) < self.config.block_capacity:
            progress = False
            for entry in pool:
                if entry.txid in removed or len(block.included) >= self.config.block_capacity:
                    continue
                tx = entry.tx
                if self.policy.censored(tx, self.height):
                    continue
                expected = self.next_nonce.get(tx.frm, 0)
                if tx.nonce < expected:
                    removed.add(entry.txid)
                    block.dropped.append((entry.txid, "stale nonce"))
                    continue
                if tx.nonce > expected:
                    continue
                if self.balance(tx.frm) < tx.value:
                    removed.add(entry.txid)
                    block.dropped.append((entry.txid, "insufficient balance"))
                    continue
                removed.add(entry.txid)
                block.included.append(self._apply(tx, entry.txid))
                progress = True
        self.mempool = [e for e in self.mempool if e.txid not in removed]
        self._pool_ids -= removed
        self.blocks.append(block)
        for inc in block.included:
            self.included[inc.txid] = inc
        for fn in self.listeners:
            fn(block)
        return block

    def _apply(self, tx: Transaction, tid: bytes) -> Inclusion:
        frm, to = tx.frm, tx.to
        self.balances[frm] = sub_amount(self.balances[frm], tx.value)
        self.next_nonce[frm] = self.next_nonce.get(frm, 0) + 1
        self.balances[to] = add_amounts(self.balances.get(to, 0), tx.value)
        if to != self.arbiter.address:
            return Inclusion(tx, tid, self.height, "ok")
        try:
            result = self.arbiter.execute(tx, self.height)
        except ArbiterError as exc:
            self.balances[to] = sub_amount(self.balances[to], tx.value)
            self.balances[frm] = add_amounts(self.balances[frm], tx.value)
            return Inclusion(tx, tid, self.height, "reverted", error=str(exc))
        for p in result.payouts:
            self.balances[to] = sub_amount(self.balances[to], p.amount)
            self.balances[p.to] = add_amounts(self.balances.get(p.to, 0), p.amount)
        return Inclusion(tx, tid, self.height, "ok", result)

    # --- views ---------------------------------------------------------

    @property
    def finalized_height(self) -> int:
        return max(0, self.height - self.config.finality_depth)

    def finalized_view(self, height: Optional[int] = None) -> list[Block]:
        """Blocks at depth >= finality_depth below ``height`` (default: head)."""
        h = self.height if height is None else min(height, self.height)
        final = max(0, h - self.config.finality_depth)
        return self.blocks[:final]

    def is_final(self, height: int) -> bool:
        return 0 < height <= self.finalized_height

    def inclusion(self, tx: Transaction) -> Optional[Inclusion]:
        return self.included.get(tx_id(tx))

    def total_balances(self) -> int:
        return sum(self.balances.values())

    # --- trace ---------------------------------------------------------

    def block_record(self, block: Block) -> dict[str, Any]:
        inc = []
        for i in block.included:
            rec: dict[str, Any] = {
                "id": i.txid.hex(),
                "from": str(i.tx.frm),
                "to": str(i.tx.to),
                "op": i.tx.op.name,
                "nonce": i.tx.nonce,
                "value": i.tx.value,
                "status": i.status,
            }
            if i.tx.is_pay:
                rec["pay"] = {
                    "merchant": str(i.tx.merchant),
                    "index": i.tx.index,
                    "intent": intent_digest(i.tx.intent()).hex(),
                    "agg": i.tx.agg_sig.point.hex(),
                    "quorum": i.tx.quorum.indices(),
                }
            if i.tx.data:
                rec["data"] = i.tx.data.hex()
            if i.error:
                rec["error"] = i.error
            if i.result is not None:
                rec["payouts"] = [
                    {"to": str(p.to), "amount": p.amount, "reason": p.reason, "source": p.source, "ref": p.ref.hex()}
                    for p in i.result.payouts
                ]
                rec["events"] = i.result.events
                rec["cost"] = i.result.cost
            inc.append(rec)
        return {
            "block": block.height,
            "time": block.time,
            "included": inc,
            "dropped": [{"id": t.hex(), "reason": r} for t, r in block.dropped],
        }

    def export_trace(self) -> list[dict[str, Any]]:
        return [self.block_record(b) for b in self.blocks]


def write_jsonl(records: Iterable[dict[str, Any]], path: str) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(to_jsonable(r), sort_keys=True, separators=(",", ":")) + "\n")
