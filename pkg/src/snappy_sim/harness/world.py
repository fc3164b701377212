"""Wires a scenario into scheduler, network, chain, Arbiter and actors, and runs it."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .. import bls
from ..accounts import AccountId, AccountKey, account_keygen, address_of
from ..arbiter import Arbiter, ArbiterConfig, encode_statekeeper_registration
from ..chain import CensorWindow, ChainConfig, ChainError, ChainState, MinerPolicy
from ..core import Op, Transaction, signing_bytes, to_jsonable
from ..net import LinkModel, Network, Scheduler, load_rtt_csv, regions_of
from ..participants import (
    Customer,
    Merchant,
    MerchantBehavior,
    Order,
    ProtocolConfig,
    Statekeeper,
    StatekeeperBehavior,
)
from .scenario import Scenario

CUSTOMER_REGION = "client"


def _canonical(record: dict[str, Any]) -> str:
    return json.dumps(to_jsonable(record), sort_keys=True, separators=(",", ":"))


@dataclass
class RunResult:
    scenario: Scenario
    trace: list[dict[str, Any]]
    trace_hash: str
    audit: Any
    metrics: Any
    conservation_ok: bool
    failures: list[str] = field(default_factory=list)
    world: Optional["World"] = None

    @property
    def ok(self) -> bool:
        return not self.failures

    def jsonl(self) -> str:
        return "".join(_canonical(r) + "\n" for r in self.trace)


class World:
    """Implements the actor context and owns every simulated component."""

    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        self.scenario = sc = scenario
        self.seed = sc.seed if seed is None else seed
        self.key_seed = self.seed if sc.key_seed is None else sc.key_seed
        self.scheduler = Scheduler()
        self.scheduler.keep_log = False
        matrix = load_rtt_csv(sc.network.matrix)
        links = LinkModel(
            base_rtt=matrix,
            default_rtt=sc.network.customer_rtt,
            jitter=sc.network.jitter,
            drop_rate=sc.network.drop_rate,
            partition_windows=[(p.frm, p.to, p.start, p.end) for p in sc.network.partitions],
        )
        self.network = Network(self.scheduler, links, seed=self.seed)
        self.network.keep_log = False
        self.regions = regions_of(matrix)
        self.trace_log: list[dict[str, Any]] = []

        k = sc.consortium.k
        depth = sc.chain.finality_depth
        patience = sc.protocol.patience_blocks or 2 * depth
        self.config = ProtocolConfig(
            k=k,
            max_pending=sc.protocol.max_pending,
            patience_blocks=patience,
            max_patience_blocks=sc.protocol.max_patience_blocks or 4 * patience,
            approval_timeout_ms=sc.protocol.approval_timeout_ms,
            broadcast_timeout_ms=sc.protocol.broadcast_timeout_ms or sc.chain.block_interval,
            reservation_scope=sc.protocol.reservation_scope,
            statekeeper_service_ms=sc.protocol.statekeeper_service_ms,
        )
        self.arbiter = Arbiter(
            address_of(b"snappy-arbiter"),
            ArbiterConfig(
                k=k,
                clearance_period=sc.arbiter.clearance_period,
                expiration_window=sc.arbiter.expiration_window,
                verify_mode=sc.arbiter.verify_mode,
                penalty_rule=sc.arbiter.penalty_rule,
                batch_strategy=sc.arbiter.batch_strategy,
            ),
        )
        self.chain_config = ChainConfig(sc.chain.block_interval, depth, sc.chain.block_capacity)
        self.policy = MinerPolicy(honor_priority=sc.chain.miner.colluding)
        self.chain = ChainState(self.chain_config, self.arbiter, self.policy)
        self._addr: dict[str, AccountId] = {}
        self._build_actors()
        self.sink = self._account("sink").address
        for w in sc.chain.miner.censor:
            self.policy.censor.append(
                CensorWindow(
                    w.start,
                    w.end,
                    frozenset(self.customers[c].address for c in w.customers),
                    frozenset(Op[o] for o in w.ops),
                )
            )

    # --- context interface -----------------------------------------------

    @property
    def statekeeper_actors(self) -> list[str]:
        return [s.actor_id for s in self.statekeepers]

    def now(self) -> int:
        return self.scheduler.now

    def chain_address(self, actor: str) -> AccountId:
        return self._addr[actor]

    def send(self, frm: str, to: str, msg: Any) -> None:
        self.network.send(frm, to, msg)

    def after(self, delay: int, fn: Callable[..., Any], *args: Any) -> None:
        self.scheduler.after(delay, fn, *args)

    def submit(self, tx: Transaction, priority: bool = False) -> bool:
        try:
            return self.chain.submit(tx, priority=priority)
        except ChainError as exc:
            self.trace("submit_rejected", sender=tx.frm, reason=str(exc))
            return False

    def trace(self, kind: str, **fields: Any) -> None:
        self.trace_log.append(to_jsonable({"t": self.scheduler.now, "kind": kind, **fields}))

    # --- construction ----------------------------------------------------

    def _account(self, label: str, balance: int = 0) -> AccountKey:
        key = account_keygen(f"{self.key_seed}/{label}".encode(), self.scenario.account_scheme)
        self.chain.add_account(key, balance)
        return key

    def _build_actors(self) -> None:
        sc = self.scenario
        k = sc.consortium.k
        self.merchants: list[Merchant] = []
        for j in range(sc.merchant_count):
            spec = sc.merchants.behaviors.get(j)
            behavior = MerchantBehavior(
                colluding=spec.colluding,
                drain=spec.drain,
                contact=tuple(spec.contact) if spec.contact is not None else None,
                withhold_broadcast=spec.withhold_broadcast,
            ) if spec else MerchantBehavior()
            m = Merchant(f"m{j}", self._account(f"merchant/{j}"), self, behavior)
            self._addr[m.actor_id] = m.address
            self.network.register(m.actor_id, self.regions[j % len(self.regions)], m.handle)
            self.merchants.append(m)
        self.statekeepers: list[Statekeeper] = []
        for i in range(k):
            spec = sc.consortium.statekeepers.get(i)
            behavior = StatekeeperBehavior()
            if spec:
                behavior = StatekeeperBehavior(
                    equivocate=spec.equivocate,
                    crash_at=None if spec.crash_at is None else spec.crash_at + self.setup_time,
                    recover_at=None if spec.recover_at is None else spec.recover_at + self.setup_time,
                    refuse=spec.refuse,
                    silent=spec.silent,
                )
            acct = self._account(f"statekeeper/{i}", sc.consortium.collateral)
            s = Statekeeper(f"s{i}", i, acct, bls.keygen(f"{self.key_seed}/bls/{i}".encode()), self, behavior)
            self._addr[s.actor_id] = acct.address
            self.network.register(s.actor_id, self.regions[i % len(self.regions)], s.handle)
            self.statekeepers.append(s)
        self.customers: list[Customer] = []
        for c in range(sc.customers.count):
            o = sc.customers.overrides.get(c)
            collateral = (o and o.collateral) or sc.customers.collateral
            balance = o.balance if o and o.balance is not None else sc.customers.balance
            cust = Customer(f"c{c}", self._account(f"customer/{c}", collateral + balance), self)
            cust.collateral = collateral
            self._addr[cust.actor_id] = cust.address
            self.network.register(cust.actor_id, CUSTOMER_REGION, cust.handle)
            self.customers.append(cust)
        for i, spec in sc.consortium.statekeepers.items():
            if spec.refuse_customers:
                self.statekeepers[i].behavior.refuse_customers = frozenset(
                    self.customers[c].address for c in spec.refuse_customers
                )

    @property
    def setup_time(self) -> int:
        """Registrations land in block 1; the protocol starts right after."""
        return self.scenario.chain.block_interval + 1

    def _signed(self, key: AccountKey, tx: Transaction) -> Transaction:
        return tx.with_sig(key.sign(signing_bytes(tx)))

    def _register_all(self) -> None:
        arb = self.arbiter.address
        for m in self.merchants:
            self.submit(self._signed(m.account, Transaction(arb, m.address, 0, 0, Op.REGISTER_MERCHANT)))
        for s in self.statekeepers:
            spec = self.scenario.consortium.statekeepers.get(s.position)
            policy = None
            if spec and spec.allocation:
                policy = {self.merchants[j].address: v for j, v in spec.allocation.items()}
            data = encode_statekeeper_registration(s.bls_key.public, bls.prove_possession(s.bls_key), policy)
            tx = Transaction(arb, s.account.address, self.scenario.consortium.collateral, 0, Op.REGISTER_STATEKEEPER, data=data)
            self.submit(self._signed(s.account, tx))
        for c in self.customers:
            tx = Transaction(arb, c.address, c.collateral, 0, Op.REGISTER_CUSTOMER)
            self.submit(self._signed(c.account, tx))

    # --- running ---------------------------------------------------------

    def _mine(self) -> None:
        block = self.chain.mine_block(self.scheduler.now)
        self.trace_log.append({"t": self.scheduler.now, "kind": "block", **self.chain.block_record(block)})
        if any(inc.tx.op == Op.REGISTER_STATEKEEPER for inc in block.included):
            for m in self.merchants:
                m.sync_allocations()
        for c in self.customers:
            c.on_block(block)
        for m in self.merchants:
            m.on_block(block)
        if self.scheduler.now + self.chain_config.block_interval <= self.end_time:
            self.scheduler.after(self.chain_config.block_interval, self._mine, label="block")

    def _fire(self, ev) -> None:
        cust = self.customers[ev.customer]
        if ev.kind == "purchase":
            order = Order(
                merchant=self.merchants[ev.merchant].actor_id,
                value=ev.value,
                attack=ev.attack,
                accomplice=None if ev.accomplice is None else self.merchants[ev.accomplice].actor_id,
                accomplice_value=ev.accomplice_value,
                lower_index=ev.lower_index,
            )
            self.trace("purchase", customer=cust.address, merchant=self.merchants[ev.merchant].address, value=ev.value, attack=ev.attack)
            cust.purchase(order)
        elif ev.kind == "clear":
            cust.request_clearance()
        elif ev.kind == "withdraw":
            cust.request_withdrawal()

    def tail_blocks(self) -> int:
        sc = self.scenario
        if sc.tail_blocks is not None:
            return sc.tail_blocks
        cfg = self.config
        depth = self.chain_config.finality_depth
        retries = cfg.max_claim_attempts * (cfg.claim_retry_blocks + 2)
        return cfg.max_patience_blocks + retries + 2 * depth + 4

    def run(self) -> None:
        sc = self.scenario
        interval = self.chain_config.block_interval
        last = max((ev.at for ev in sc.schedule), default=0) + self.setup_time
        self.end_time = last + self.tail_blocks() * interval
        self.trace(
            "roster",
            customers=[c.address for c in self.customers],
            merchants=[m.address for m in self.merchants],
            statekeepers=[s.account.address for s in self.statekeepers],
        )
        self._register_all()
        adversarial = set()
        for ev in sc.schedule:
            if ev.attack in ("double_spend", "deplete", "equivocate"):
                adversarial.add(self.customers[ev.customer].address)
        self.policy.priority_senders |= adversarial if sc.chain.miner.colluding else set()
        for ev in sc.schedule:
            self.scheduler.schedule(self.setup_time + ev.at, self._fire, ev, label="event")
        self.scheduler.schedule(interval, self._mine, label="block")
        self.scheduler.run_until(self.end_time)

    def conservation_ok(self) -> bool:
        chain = self.chain
        return (
            chain.total_minted == chain.total_balances()
            and chain.balance(self.arbiter.address) == self.arbiter.held_funds()
        )

    def summary_record(self) -> dict[str, Any]:
        return to_jsonable(
            {
                "t": self.scheduler.now,
                "kind": "final",
                "height": self.chain.height,
                "total_minted": self.chain.total_minted,
                "balances": {str(a): v for a, v in sorted(self.chain.balances.items())},
                "arbiter_held": self.arbiter.held_funds(),
                "statekeepers": {
                    s.position: self.arbiter.statekeepers[s.account.address].deposit
                    for s in self.statekeepers
                    if s.account.address in self.arbiter.statekeepers
                },
            }
        )


def trace_hash(trace: list[dict[str, Any]]) -> str:
    h = hashlib.sha256()
    for r in trace:
        h.update(_canonical(r).encode())
        h.update(b"\n")
    return h.hexdigest()


def run_scenario(scenario: Scenario, seed: Optional[int] = None, keep_world: bool = False) -> RunResult:
    """Run ``scenario`` to completion and audit it from its trace."""
    from .audit import audit_trace, check_expectations
    from .metrics import metrics_from_trace

    world = World(scenario, seed)
    world.run()
    trace = world.trace_log + [world.summary_record()]
    audit = audit_trace(trace)
    metrics = metrics_from_trace(trace)
    conserved = world.conservation_ok()
    failures = check_expectations(scenario.expect, audit, metrics)
    if not conserved:
        failures.append("funds not conserved")
    return RunResult(
        scenario=scenario,
        trace=trace,
        trace_hash=trace_hash(trace),
        audit=audit,
        metrics=metrics,
        conservation_ok=conserved,
        failures=failures,
        world=world if keep_world else None,
    )
