"""Customer, merchant and statekeeper state machines.

Actors never share mutable state. They talk through the simulated network
and read the chain, and everything they decide goes into the trace so the
auditor can reconstruct the run without looking inside them.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol

from . import bls
from .accounts import AccountId, AccountKey, verify_account_sig
from .arbiter import Arbiter, SettlementClaim, encode_claim
from .chain import Block, ChainError, ChainState
from .core import (
    CustomerLocalState,
    FinalizedEntry,
    MerchantLocalState,
    Op,
    PaymentIntent,
    QuorumBitvector,
    StatekeeperLocalState,
    Transaction,
    intent_digest,
    majority,
    signing_bytes,
)

CONSORTIUM = "consortium"
QUORUM = "quorum"


@dataclass
class ProtocolConfig:
    k: int
    max_pending: Optional[int] = None
    patience_blocks: int = 20
    # a still-valid tx sitting in the mempool defers the claim up to this many blocks
    max_patience_blocks: int = 80
    approval_timeout_ms: int = 2_000
    broadcast_timeout_ms: int = 13_000
    reservation_scope: str = CONSORTIUM
    statekeeper_service_ms: int = 0
    claim_retry_blocks: int = 2
    max_claim_attempts: int = 4
    max_conflict_tuples: int = 6

    def __post_init__(self) -> None:
        if self.reservation_scope not in (CONSORTIUM, QUORUM):
            raise ValueError(f"unknown reservation scope {self.reservation_scope!r}")
        if self.max_pending is not None and self.max_pending < 1:
            raise ValueError("max_pending must be >= 1")


# --- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class ApprovalRequest:
    intent: PaymentIntent
    customer_pending: tuple[Transaction, ...] = ()


@dataclass(frozen=True)
class SignRequest:
    intent: PaymentIntent


@dataclass(frozen=True)
class ApprovalResponse:
    statekeeper: int
    intent_key: bytes
    sig: Optional[bls.BlsSignature] = None
    # digest of the intent already approved for that (customer, index)
    conflict: Optional[bytes] = None

    @property
    def approved(self) -> bool:
        return self.sig is not None


@dataclass(frozen=True)
class ApprovalResult:
    intent: PaymentIntent
    agg_sig: bls.AggregateSignature
    quorum: QuorumBitvector


@dataclass(frozen=True)
class Abort:
    intent: PaymentIntent
    reason: str
    # False when no statekeeper was contacted, so the index is still unused
    index_burnt: bool = True


@dataclass(frozen=True)
class SignedTx:
    tx: Transaction


class Context(Protocol):
    """What the world exposes to actors."""

    chain: ChainState
    arbiter: Arbiter
    config: ProtocolConfig
    statekeeper_actors: list[str]
    sink: AccountId

    def now(self) -> int: ...
    def chain_address(self, actor: str) -> AccountId: ...
    def send(self, frm: str, to: str, msg: Any) -> None: ...
    def after(self, delay: int, fn: Callable[..., Any], *args: Any) -> None: ...
    def submit(self, tx: Transaction, priority: bool = False) -> bool: ...
    def trace(self, kind: str, **fields: Any) -> None: ...


def approval_valid(
    arbiter: Arbiter, message: bytes, agg: bls.AggregateSignature, quorum: QuorumBitvector
) -> bool:
    """Off-chain replica of the Arbiter's approval check (no cost metering)."""
    if quorum.k != arbiter.config.k or not quorum.is_majority():
        return False
    if not arbiter.consortium_complete:
        return False
    keys = arbiter.statekeeper_keys()
    return bls.verify_aggregate(message, agg, [keys[i] for i in quorum.indices()])


def tx_approved(arbiter: Arbiter, tx: Transaction) -> bool:
    return tx.is_pay and approval_valid(arbiter, intent_digest(tx.intent()), tx.agg_sig, tx.quorum)


def entry_approved(arbiter: Arbiter, entry: FinalizedEntry) -> bool:
    return entry.verified or approval_valid(arbiter, entry.message, entry.agg_sig, entry.quorum)


# --- statekeeper ------------------------------------------------------------


@dataclass
class StatekeeperBehavior:
    equivocate: bool = False
    crash_at: Optional[int] = None
    recover_at: Optional[int] = None
    # refuse everything (True) or only these customers
    refuse: bool = False
    refuse_customers: frozenset = frozenset()
    # stay silent instead of sending an explicit refusal
    silent: bool = False


class Statekeeper:
    def __init__(
        self,
        actor_id: str,
        position: int,
        account: AccountKey,
        bls_key: bls.BlsKeypair,
        ctx: Context,
        behavior: Optional[StatekeeperBehavior] = None,
    ):
        self.actor_id = actor_id
        self.position = position
        self.account = account
        self.bls_key = bls_key
        self.ctx = ctx
        self.behavior = behavior or StatekeeperBehavior()
        self.state = StatekeeperLocalState()
        self._sigs: dict[bytes, bls.BlsSignature] = {}

    def crashed(self, now: int) -> bool:
        b = self.behavior
        if b.crash_at is None or now < b.crash_at:
            return False
        return b.recover_at is None or now < b.recover_at

    def approve(self, intent: PaymentIntent) -> ApprovalResponse:
        """Sign unless a different intent already holds this (customer, index)."""
        digest = intent_digest(intent)
        slot = (intent.frm, intent.index)
        seen = self.state.approved_intents.get(slot)
        if seen is not None and seen != digest and not self.behavior.equivocate:
            return ApprovalResponse(self.position, digest, conflict=seen)
        if seen is None:
            self.state.approved_intents[slot] = digest
        sig = self._sigs.get(digest)
        if sig is None:
            sig = self._sigs[digest] = bls.sign(self.bls_key, digest)
            self.ctx.trace(
                "sign",
                statekeeper=self.position,
                customer=intent.frm,
                index=intent.index,
                intent=digest,
            )
        return ApprovalResponse(self.position, digest, sig=sig)

    def handle(self, frm: str, msg: Any) -> None:
        if not isinstance(msg, SignRequest):
            return
        now = self.ctx.now()
        if self.crashed(now):
            return
        b = self.behavior
        if b.refuse or msg.intent.frm in b.refuse_customers:
            self.ctx.trace("refuse", statekeeper=self.position, customer=msg.intent.frm, why="censor")
            if not b.silent:
                self._reply(frm, ApprovalResponse(self.position, intent_digest(msg.intent)))
            return
        resp = self.approve(msg.intent)
        if not resp.approved:
            self.ctx.trace(
                "refuse", statekeeper=self.position, customer=msg.intent.frm, why="conflict"
            )
        self._reply(frm, resp)

    def _reply(self, to: str, resp: ApprovalResponse) -> None:
        delay = self.ctx.config.statekeeper_service_ms
        if delay:
            self.ctx.after(delay, self.ctx.send, self.actor_id, to, resp)
        else:
            self.ctx.send(self.actor_id, to, resp)


# --- customer ---------------------------------------------------------------


@dataclass
class Order:
    merchant: str
    value: int
    attack: Optional[str] = None
    accomplice: Optional[str] = None
    accomplice_value: Optional[int] = None
    # equivocate against the lowest pending index instead of the new one
    lower_index: bool = False
    sink: Optional[AccountId] = None
    sink_nonce: Optional[int] = None


ATTACKS = ("double_spend", "deplete", "withhold", "omit_pending", "equivocate")


class Customer:
    def __init__(self, actor_id: str, account: AccountKey, ctx: Context):
        self.actor_id = actor_id
        self.account = account
        self.address = account.address
        self.ctx = ctx
        self.state = CustomerLocalState()
        self._nonce = 0
        self.queue: deque[Order] = deque()
        self.busy: Optional[tuple[Order, PaymentIntent]] = None
        self.retries = 0
        self.side: dict[bytes, Order] = {}  # accomplice intents by digest
        self.stuck = False
        self.collateral = 0  # registration deposit, set by the world

    # chain nonces

    def _take_nonce(self) -> int:
        n = max(self._nonce, self.ctx.chain.pending_nonce(self.address))
        self._nonce = n + 1
        return n

    def _signed(self, tx: Transaction) -> Transaction:
        return tx.with_sig(self.account.sign(signing_bytes(tx)))

    def in_clearance(self) -> bool:
        rec = self.ctx.arbiter.customers.get(self.address)
        return rec is None or bool(rec.clearance)

    def purchase(self, order: Order) -> None:
        self.queue.append(order)
        self._next()

    def _next(self) -> None:
        if self.busy is not None or not self.queue or self.stuck:
            return
        order = self.queue.popleft()
        if self.in_clearance():
            self.ctx.trace("purchase_refused", customer=self.address, why="clearance or unregistered")
            return self._next()
        req = self.create_intent(order)
        self.busy = (order, req.intent)
        self.retries = 0
        self.ctx.send(self.actor_id, order.merchant, req)
        if order.attack == "equivocate" and order.accomplice:
            self._launch_side(order, req.intent)

    def create_intent(self, order: Order) -> ApprovalRequest:
        merchant = self.ctx.chain_address(order.merchant)
        nonce = self._take_nonce()
        if order.attack == "deplete":
            # keep this nonce for the drain and pay with the next one
            order.sink_nonce = nonce
            nonce = self._take_nonce()
        intent = PaymentIntent(self.address, merchant, order.value, self.state.next_index, nonce)
        pending = tuple(self.state.pending)
        if order.attack == "omit_pending" and pending:
            pending = pending[1:]
        return ApprovalRequest(intent, pending)

    def _launch_side(self, order: Order, main: PaymentIntent) -> None:
        idx, nonce = main.index, main.nonce
        pend = list(self.state.pending)
        if order.lower_index and pend:
            idx, nonce = pend[0].index, pend[0].nonce
        side = PaymentIntent(
            self.address,
            self.ctx.chain_address(order.accomplice),
            order.accomplice_value or order.value,
            idx,
            nonce,
        )
        self.side[intent_digest(side)] = order
        req = ApprovalRequest(side, tuple(t for t in pend if t.index < idx))
        self.ctx.send(self.actor_id, order.accomplice, req)

    def finalize(self, intent: PaymentIntent, agg: bls.AggregateSignature, quorum: QuorumBitvector) -> Transaction:
        tx = Transaction(
            to=self.ctx.arbiter.address,
            frm=self.address,
            value=intent.value,
            nonce=intent.nonce,
            op=Op.PAY,
            merchant=intent.merchant,
            index=intent.index,
            agg_sig=agg,
            quorum=quorum,
        )
        return self._signed(tx)

    def handle(self, frm: str, msg: Any) -> None:
        if isinstance(msg, ApprovalResult):
            self._on_result(frm, msg)
        elif isinstance(msg, Abort):
            self._on_abort(frm, msg)

    def _on_result(self, frm: str, msg: ApprovalResult) -> None:
        digest = intent_digest(msg.intent)
        if digest in self.side:
            tx = self.finalize(msg.intent, msg.agg_sig, msg.quorum)
            self.ctx.send(self.actor_id, frm, SignedTx(tx))
            return
        if self.busy is None or self.busy[1] != msg.intent:
            return
        order, intent = self.busy
        tx = self.finalize(intent, msg.agg_sig, msg.quorum)
        self.state.approved.append(tx)
        self.state.pending.append(tx)
        self.state.next_index = intent.index + 1
        self.busy = None
        if order.attack == "withhold":
            self.ctx.trace("withheld", customer=self.address, index=intent.index)
        else:
            self.ctx.send(self.actor_id, frm, SignedTx(tx))
            self.ctx.after(self.ctx.config.broadcast_timeout_ms, self._broadcast_fallback, tx)
        if order.attack == "double_spend":
            self._drain(intent.nonce, order)
        elif order.attack == "deplete":
            self._drain(order.sink_nonce, order)
        self._next()

    def _drain(self, nonce: int, order: Order) -> None:
        """Move the whole balance away with a transfer that beats the payment."""
        amount = self.ctx.chain.balance(self.address)
        if amount == 0:
            return
        sink = order.sink or self.ctx.sink
        tx = self._signed(Transaction(to=sink, frm=self.address, value=amount, nonce=nonce, op=Op.TRANSFER))
        self.ctx.submit(tx, priority=True)
        self.ctx.trace("drain", customer=self.address, nonce=nonce, amount=amount)

    def _broadcast_fallback(self, tx: Transaction) -> None:
        chain = self.ctx.chain
        if chain.inclusion(tx) is None and not chain.in_mempool(tx):
            if tx.nonce >= chain.next_nonce.get(self.address, 0):
                self.ctx.submit(tx)
                self.ctx.trace("customer_broadcast", customer=self.address, index=tx.index)

    def _on_abort(self, frm: str, msg: Abort) -> None:
        if self.busy is None or self.busy[1] != msg.intent:
            return
        order, intent = self.busy
        if not msg.index_burnt:
            # nobody signed anything: free the nonce and index for the next order
            self._nonce = intent.nonce
            self.busy = None
            self._next()
            return
        if self.retries < 2:
            # a different intent at this index would meet refusals; retry the same one
            self.retries += 1
            req = ApprovalRequest(intent, tuple(self.state.pending))
            self.ctx.after(500, self.ctx.send, self.actor_id, order.merchant, req)
            return
        self.busy = None
        self.stuck = True
        self.ctx.trace("customer_stuck", customer=self.address, index=intent.index)

    def on_block(self, block: Block) -> None:
        rec = self.ctx.arbiter.customers.get(self.address)
        if rec is None:
            return
        final = self.ctx.chain.finalized_height
        keep = []
        for t in self.state.pending:
            e = rec.finalized.get(t.index)
            if (e is not None and 0 < e.block <= final) or t.index <= rec.base_index:
                continue
            keep.append(t)
        self.state.pending = keep

    def request_clearance(self) -> None:
        tx = Transaction(to=self.ctx.arbiter.address, frm=self.address, value=0, nonce=self._take_nonce(), op=Op.CLEAR)
        self.ctx.submit(self._signed(tx))

    def request_withdrawal(self) -> None:
        tx = Transaction(
            to=self.ctx.arbiter.address, frm=self.address, value=0, nonce=self._take_nonce(), op=Op.WITHDRAW
        )
        self.ctx.submit(self._signed(tx))


# --- merchant ---------------------------------------------------------------


@dataclass
class MerchantBehavior:
    colluding: bool = False
    # colluder's use of a conflicting tx: put it on chain or claim it from collateral
    drain: str = "submit"
    # statekeeper positions to contact (None = everyone)
    contact: Optional[tuple[int, ...]] = None
    withhold_broadcast: bool = False


@dataclass
class Session:
    request: ApprovalRequest
    customer_actor: str
    started: int
    responses: dict[int, bls.BlsSignature] = field(default_factory=dict)
    arrival: list[int] = field(default_factory=list)
    refused: set = field(default_factory=set)
    bad: set = field(default_factory=set)
    contacted: int = 0
    result: Optional[ApprovalResult] = None
    reserved: tuple[int, ...] = ()
    closed: bool = False


@dataclass
class Accepted:
    tx: Transaction
    key: bytes
    pending: tuple[Transaction, ...]
    height: int
    reserved: tuple[int, ...]
    honest: bool
    paid: int = 0
    forwarded: bool = False
    claim_tx: Optional[Transaction] = None
    attempts: int = 0
    next_try: int = 0
    done: bool = False
    done_height: int = 0
    released: bool = False


class Merchant:
    def __init__(self, actor_id: str, account: AccountKey, ctx: Context, behavior: Optional[MerchantBehavior] = None):
        self.actor_id = actor_id
        self.account = account
        self.address = account.address
        self.ctx = ctx
        self.behavior = behavior or MerchantBehavior()
        self.state = MerchantLocalState()
        self.sessions: dict[bytes, Session] = {}
        self.accepted: dict[bytes, Accepted] = {}
        self._scanned = 0

    @property
    def k(self) -> int:
        return self.ctx.config.k

    def sync_allocations(self) -> None:
        arb = self.ctx.arbiter
        for pos in range(len(arb.by_position)):
            self.state.remaining[pos] = arb.allocation(pos, self.address)
            self.state.outstanding.setdefault(pos, 0)

    def _signed(self, tx: Transaction) -> Transaction:
        return tx.with_sig(self.account.sign(signing_bytes(tx)))

    # step 2: the customer's state

    def evaluate_customer(self, req: ApprovalRequest) -> Optional[str]:
        """None if the request is acceptable, else the rejection reason."""
        intent = req.intent
        arb = self.ctx.arbiter
        if intent.merchant != self.address:
            return "intent names another merchant"
        rec = arb.customers.get(intent.frm)
        if rec is None:
            return "unregistered customer"
        if rec.clearance:
            return "customer in clearance"
        pending = list(req.customer_pending)
        for t in pending:
            if not t.is_pay or t.frm != intent.frm:
                return "foreign transaction in pending list"
        idxs = [t.index for t in pending]
        if idxs != sorted(set(idxs)):
            return "pending list not strictly increasing"
        if intent.index <= rec.base_index or intent.index in rec.finalized:
            return "index already used"
        live = []
        for t in pending:
            e = rec.finalized.get(t.index)
            if t.index <= rec.base_index:
                continue
            if e is not None:
                if e.message != intent_digest(t.intent()) and entry_approved(arb, e):
                    return "pending entry conflicts with chain record"
                if e.message == intent_digest(t.intent()):
                    continue
            if t.index >= intent.index:
                return "pending entry at or above intent index"
            live.append(t)
        have = {t.index for t in live}
        for j in range(rec.base_index + 1, intent.index):
            e = rec.finalized.get(j)
            if j in have:
                continue
            if e is None:
                return f"missing index {j}"
            if not entry_approved(arb, e):
                return f"unapproved chain record at index {j}"
        cap = self.ctx.config.max_pending
        if cap is not None and len(live) >= cap:
            return "pending limit reached"
        if rec.collateral < sum(t.value for t in live) + intent.value:
            return "insufficient customer collateral"
        for t in live:
            if not tx_approved(arb, t):
                return "pending entry lacks approval"
        return None

    def _scope_ok(self, positions, value: int) -> bool:
        st = self.state
        return all(st.outstanding.get(p, 0) + value <= st.remaining.get(p, 0) for p in positions)

    def handle(self, frm: str, msg: Any) -> None:
        if isinstance(msg, ApprovalRequest):
            self._on_request(frm, msg)
        elif isinstance(msg, ApprovalResponse):
            self._on_response(msg)
        elif isinstance(msg, SignedTx):
            self._on_signed(frm, msg.tx)

    def _on_request(self, frm: str, req: ApprovalRequest) -> None:
        key = intent_digest(req.intent)
        if key in self.sessions:
            s = self.sessions[key]
            if s.result is not None and not s.closed:
                self.ctx.send(self.actor_id, frm, s.result)
                return
            if not s.closed:
                return
            if self.accepted.get(key):
                return
        now = self.ctx.now()
        honest = not self.behavior.colluding
        self.ctx.trace(
            "request",
            merchant=self.address,
            customer=req.intent.frm,
            index=req.intent.index,
            intent=key,
            value=req.intent.value,
        )
        if honest:
            why = self.evaluate_customer(req)
            if why is None and self.ctx.config.reservation_scope == CONSORTIUM:
                if not self._scope_ok(range(self.k), req.intent.value):
                    why = "insufficient statekeeper collateral"
            if why is not None:
                self.ctx.trace("reject", merchant=self.address, intent=key, reason=why)
                self.ctx.send(self.actor_id, frm, Abort(req.intent, why, index_burnt=False))
                return
        s = Session(req, frm, now)
        self.sessions[key] = s
        targets = self.behavior.contact if self.behavior.contact is not None else range(self.k)
        for pos in targets:
            s.contacted += 1
            self.ctx.send(self.actor_id, self.ctx.statekeeper_actors[pos], SignRequest(req.intent))
        self.ctx.after(self.ctx.config.approval_timeout_ms, self._timeout, key)

    def _on_response(self, resp: ApprovalResponse) -> None:
        s = self.sessions.get(resp.intent_key)
        if s is None or s.closed or s.result is not None:
            return
        if resp.statekeeper in s.responses or resp.statekeeper in s.refused:
            return
        if resp.approved:
            s.responses[resp.statekeeper] = resp.sig
            s.arrival.append(resp.statekeeper)
        else:
            s.refused.add(resp.statekeeper)
        self._try_quorum(resp.intent_key, s)

    def evaluate_statekeepers(self, s: Session) -> list[int]:
        """Responders usable for the quorum, in arrival order."""
        value = s.request.intent.value
        out = []
        for pos in s.arrival:
            if pos in s.bad:
                continue
            if self.behavior.colluding or self.ctx.config.reservation_scope == CONSORTIUM:
                out.append(pos)
            elif self._scope_ok((pos,), value):
                out.append(pos)
        return out

    def aggregate_and_return(self, s: Session, members: list[int]) -> tuple[bls.AggregateSignature, QuorumBitvector]:
        members = sorted(members)
        agg = bls.aggregate([s.responses[p] for p in members])
        return agg, QuorumBitvector.from_indices(members, self.k)

    def _try_quorum(self, key: bytes, s: Session) -> None:
        need = majority(self.k)
        while True:
            usable = self.evaluate_statekeepers(s)
            if len(usable) < need:
                break
            members = usable[:need]
            agg, q = self.aggregate_and_return(s, members)
            if approval_valid(self.ctx.arbiter, key, agg, q):
                self._quorum_reached(key, s, agg, q)
                return
            keys = self.ctx.arbiter.statekeeper_keys()
            for p in members:
                if not bls.verify(s.responses[p], key, keys[p]):
                    s.bad.add(p)
        unanswered = s.contacted - len(s.arrival) - len(s.refused)
        if len(self.evaluate_statekeepers(s)) + unanswered < need:
            self._abort(key, s, "quorum unreachable")

    def _quorum_reached(self, key: bytes, s: Session, agg, q: QuorumBitvector) -> None:
        intent = s.request.intent
        scope = range(self.k) if self.ctx.config.reservation_scope == CONSORTIUM else q.indices()
        if not self.behavior.colluding:
            s.reserved = tuple(scope)
            for p in s.reserved:
                self.state.outstanding[p] = self.state.outstanding.get(p, 0) + intent.value
        s.result = ApprovalResult(intent, agg, q)
        self.ctx.trace(
            "quorum",
            merchant=self.address,
            customer=intent.frm,
            index=intent.index,
            intent=key,
            quorum=q.indices(),
            latency=self.ctx.now() - s.started,
        )
        self.ctx.send(self.actor_id, s.customer_actor, s.result)
        self.ctx.after(self.ctx.config.approval_timeout_ms, self._timeout, key)

    def _release(self, positions, value: int) -> None:
        for p in positions:
            self.state.outstanding[p] = max(0, self.state.outstanding.get(p, 0) - value)

    def _abort(self, key: bytes, s: Session, reason: str) -> None:
        if s.closed:
            return
        s.closed = True
        self._release(s.reserved, s.request.intent.value)
        s.reserved = ()
        self.ctx.trace("abort", merchant=self.address, intent=key, reason=reason)
        self.ctx.send(self.actor_id, s.customer_actor, Abort(s.request.intent, reason))

    def _timeout(self, key: bytes) -> None:
        s = self.sessions.get(key)
        if s is None or s.closed or key in self.accepted:
            return
        if s.result is None:
            self._abort(key, s, "approval timeout")
        elif self.ctx.now() - s.started >= self.ctx.config.approval_timeout_ms:
            self._abort(key, s, "customer did not finalize")

    # step 7

    def accept_payment(self, s: Session, tx: Transaction) -> Optional[str]:
        r = s.result
        if r is None:
            return "no approval on record"
        if not tx.is_pay or tx.intent() != r.intent:
            return "transaction does not match intent"
        if tx.agg_sig != r.agg_sig or tx.quorum != r.quorum or tx.to != self.ctx.arbiter.address:
            return "approval fields altered"
        if not tx_approved(self.ctx.arbiter, tx):
            return "aggregate does not verify"
        public = self.ctx.chain.registry.get(tx.frm)
        if public is None or not verify_account_sig(public, signing_bytes(tx), tx.sig):
            return "bad account signature"
        if tx.nonce < self.ctx.chain.next_nonce.get(tx.frm, 0):
            return "nonce already used"
        return None

    def _on_signed(self, frm: str, tx: Transaction) -> None:
        if not tx.is_pay:
            return
        key = intent_digest(tx.intent())
        s = self.sessions.get(key)
        if s is None or s.closed or key in self.accepted:
            return
        why = self.accept_payment(s, tx)
        if why is not None:
            self._abort(key, s, why)
            return
        s.closed = True
        arb = self.ctx.arbiter
        rec = arb.customers.get(tx.frm)
        honest = not self.behavior.colluding
        pend = tuple(s.request.customer_pending)
        acc = Accepted(tx, key, pend, self.ctx.chain.height, s.reserved, honest)
        self.accepted[key] = acc
        self.ctx.trace(
            "accept",
            merchant=self.address,
            honest=honest,
            customer=tx.frm,
            index=tx.index,
            intent=key,
            value=tx.value,
            nonce=tx.nonce,
            collateral=rec.collateral if rec else 0,
            pending=[[t.index, t.value, intent_digest(t.intent()).hex()] for t in pend],
            quorum=tx.quorum.indices(),
            agg=tx.agg_sig.point,
        )
        if self.behavior.colluding and self.behavior.drain == "claim":
            acc.next_try = self.ctx.chain.height
            self._claim(acc)
            return
        if not self.behavior.withhold_broadcast:
            try:
                self.ctx.submit(tx, priority=self.behavior.colluding)
            except ChainError:
                pass

    # settlement

    def _forward_seen(self, acc: Accepted) -> bool:
        inc = self.ctx.chain.inclusion(acc.tx)
        if inc is None or inc.result is None:
            return False
        return any(p.reason == "forward" and p.to == self.address for p in inc.result.payouts)

    def known_approved(self, customer: AccountId, acc: Accepted) -> dict[bytes, Transaction]:
        seen = dict(self.ctx.chain.observed_pay.get(customer, {}))
        for t in acc.pending:
            seen.setdefault(intent_digest(t.intent()), t)
        seen.setdefault(acc.key, acc.tx)
        return seen

    def build_claim(self, acc: Accepted) -> SettlementClaim:
        tx = acc.tx
        arb = self.ctx.arbiter
        rec = arb.customers.get(tx.frm)
        store = rec.finalized if rec else {}
        base = rec.base_index if rec else 0
        preceding = []
        for t in sorted(acc.pending, key=lambda t: t.index):
            if t.index >= tx.index or t.index <= base:
                continue
            e = store.get(t.index)
            if e is None or not entry_approved(arb, e):
                preceding.append(t)
        by_index: dict[int, list[tuple[bytes, Transaction]]] = {}
        for key, t in self.known_approved(tx.frm, acc).items():
            if t.index <= tx.index:
                by_index.setdefault(t.index, []).append((key, t))
        tuples: list[tuple[Transaction, Transaction]] = []
        for idx in sorted(by_index, key=lambda i: (i != tx.index, -i)):
            group = [t for key, t in sorted(by_index[idx], key=lambda kv: kv[0]) if tx_approved(arb, t)]
            if len(group) < 2:
                continue
            anchor = tx if idx == tx.index and tx in group else group[0]
            for other in group:
                if other is not anchor and other != anchor:
                    tuples.append((anchor, other))
        tuples = tuples[: self.ctx.config.max_conflict_tuples]
        return SettlementClaim(tx, preceding, tuples)

    def _claim(self, acc: Accepted) -> None:
        claim = self.build_claim(acc)
        ctx = self.ctx
        tx = Transaction(
            to=ctx.arbiter.address,
            frm=self.address,
            value=0,
            nonce=ctx.chain.pending_nonce(self.address),
            op=Op.CLAIM,
            data=encode_claim(claim),
        )
        tx = self._signed(tx)
        acc.claim_tx = tx
        acc.attempts += 1
        ctx.submit(tx, priority=not acc.honest)
        ctx.trace(
            "claim_submitted",
            merchant=self.address,
            intent=acc.key,
            preceding=len(claim.preceding_pending),
            tuples=len(claim.conflict_tuples),
            attempt=acc.attempts,
        )

    def on_block(self, block: Block) -> None:
        chain = self.ctx.chain
        height = chain.height
        cfg = self.ctx.config
        for acc in self.accepted.values():
            if acc.done:
                continue
            if self._forward_seen(acc):
                acc.forwarded = True
                self._finish(acc)
                continue
            if acc.claim_tx is not None:
                inc = chain.inclusion(acc.claim_tx)
                if inc is None:
                    if not chain.in_mempool(acc.claim_tx):
                        acc.claim_tx = None  # dropped; rebuild
                    continue
                acc.claim_tx = None
                paid = self._settled_amount(inc, acc.key)
                if paid is not None:
                    acc.paid = paid
                    if paid >= acc.tx.value:
                        self._finish(acc)
                        continue
                if acc.attempts >= cfg.max_claim_attempts:
                    self._finish(acc)
                    self.ctx.trace("claim_gave_up", merchant=self.address, intent=acc.key, paid=acc.paid)
                    continue
                acc.next_try = height + cfg.claim_retry_blocks
                continue
            if not acc.honest:
                if self.behavior.drain == "claim" and acc.attempts == 0:
                    self._claim(acc)
                continue
            if height < max(acc.height + cfg.patience_blocks, acc.next_try):
                continue
            if (
                chain.inclusion(acc.tx) is None
                and chain.in_mempool(acc.tx)
                and acc.tx.nonce >= chain.next_nonce.get(acc.tx.frm, 0)
                and height < acc.height + cfg.max_patience_blocks
            ):
                continue  # congestion: still includable
            self._claim(acc)
        self._process_finalized()

    def _finish(self, acc: Accepted) -> None:
        acc.done = True
        acc.done_height = self.ctx.chain.height

    @staticmethod
    def _settled_amount(inc, key: bytes) -> Optional[int]:
        if inc.status != "ok" or inc.result is None:
            return None
        for ev in inc.result.events:
            if ev["kind"] == "settlement" and ev["intent"] == key.hex():
                return ev["paid"]
        return None

    def on_settlement_event(self, event: dict[str, Any]) -> None:
        if event.get("kind") == "statekeeper_deducted" and event["merchant"] == str(self.address):
            pos = event["position"]
            self.state.remaining[pos] = max(0, self.state.remaining.get(pos, 0) - event["amount"])

    def _process_finalized(self) -> None:
        chain = self.ctx.chain
        final = chain.finalized_height
        while self._scanned < final:
            block = chain.blocks[self._scanned]
            self._scanned += 1
            for inc in block.included:
                if inc.result is None:
                    continue
                for ev in inc.result.events:
                    self.on_settlement_event(ev)
        for acc in self.accepted.values():
            if acc.done and not acc.released and acc.done_height <= final:
                self._release(acc.reserved, acc.tx.value)
                acc.released = True
