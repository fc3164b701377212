"""Declarative scenario files (JSON), validated before a run starts."""

from __future__ import annotations

import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..core import MAX_CONSORTIUM


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StatekeeperSpec(_Model):
    equivocate: bool = False
    crash_at: Optional[int] = Field(None, ge=0, description="ms after setup")
    recover_at: Optional[int] = Field(None, ge=0)
    refuse: bool = False
    refuse_customers: list[int] = []
    silent: bool = False
    # merchant index -> amount; omitted means an equal split
    allocation: Optional[dict[int, int]] = None


class ConsortiumSpec(_Model):
    k: int = Field(..., ge=1, le=MAX_CONSORTIUM)
    collateral: int = Field(300_000, gt=0)
    statekeepers: dict[int, StatekeeperSpec] = {}


class MerchantSpec(_Model):
    colluding: bool = False
    drain: Literal["submit", "claim"] = "submit"
    contact: Optional[list[int]] = None
    withhold_broadcast: bool = False


class MerchantsSpec(_Model):
    count: Optional[int] = Field(None, ge=1, description="defaults to k")
    behaviors: dict[int, MerchantSpec] = {}


class CustomerSpec(_Model):
    collateral: Optional[int] = Field(None, gt=0)
    balance: Optional[int] = Field(None, ge=0)


class CustomersSpec(_Model):
    count: int = Field(1, ge=1)
    collateral: int = Field(10_000, gt=0)
    balance: int = Field(100_000, ge=0)
    overrides: dict[int, CustomerSpec] = {}


class CensorSpec(_Model):
    start: int = Field(..., ge=0, description="first censored block height")
    end: int = Field(..., ge=0)
    customers: list[int] = []
    ops: list[str] = []


class MinerSpec(_Model):
    colluding: bool = False
    censor: list[CensorSpec] = []


class ChainSpec(_Model):
    block_interval: int = Field(13_000, gt=0)
    finality_depth: int = Field(10, ge=1)
    block_capacity: int = Field(500, ge=1)
    miner: MinerSpec = MinerSpec()


class PartitionSpec(_Model):
    frm: str = "*"
    to: str = "*"
    start: int = 0
    end: int = 0


class NetworkSpec(_Model):
    matrix: Optional[str] = Field(None, description="CSV path; shipped matrix if omitted")
    jitter: float = Field(0.0, ge=0.0)
    drop_rate: float = Field(0.0, ge=0.0, le=1.0)
    customer_rtt: float = Field(4.0, gt=0.0)
    partitions: list[PartitionSpec] = []


class ArbiterSpec(_Model):
    clearance_period: int = Field(6646, ge=0)
    expiration_window: Optional[int] = Field(6646, ge=1)
    verify_mode: Literal["per_signer", "aggregate"] = "per_signer"
    penalty_rule: Literal["residual", "difference"] = "residual"
    batch_strategy: Optional[Literal["per_message", "per_signer"]] = None


class ProtocolSpec(_Model):
    max_pending: Optional[int] = Field(None, ge=1)
    patience_blocks: Optional[int] = Field(None, ge=1, description="defaults to 2 x finality depth")
    max_patience_blocks: Optional[int] = Field(None, ge=1)
    approval_timeout_ms: int = Field(2_000, gt=0)
    broadcast_timeout_ms: Optional[int] = Field(None, gt=0, description="defaults to one block")
    reservation_scope: Literal["consortium", "quorum"] = "consortium"
    statekeeper_service_ms: int = Field(0, ge=0)


class EventSpec(_Model):
    at: int = Field(..., ge=0, description="ms after setup")
    kind: Literal["purchase", "clear", "withdraw"]
    customer: int = Field(..., ge=0)
    merchant: Optional[int] = Field(None, ge=0)
    value: Optional[int] = Field(None, gt=0)
    attack: Optional[Literal["double_spend", "deplete", "withhold", "omit_pending", "equivocate"]] = None
    accomplice: Optional[int] = Field(None, ge=0)
    accomplice_value: Optional[int] = Field(None, gt=0)
    lower_index: bool = False


class ExpectSpec(_Model):
    safe: bool = True
    accepted: Optional[int] = None
    min_accepted: Optional[int] = None
    max_accepted: Optional[int] = None
    min_aborted: Optional[int] = None
    min_rejected: Optional[int] = None
    min_settlements: Optional[int] = None
    max_settlements: Optional[int] = None
    min_deductions: Optional[int] = None
    max_deductions: Optional[int] = None
    withdrawn: list[int] = []


class Scenario(_Model):
    name: str
    description: str = ""
    seed: int = 0
    # derives BLS and account keys; defaults to ``seed``. Fixing it lets many
    # runs share one consortium while network and behaviour vary with ``seed``
    key_seed: Optional[int] = None
    account_scheme: Literal["ecdsa", "stub"] = "ecdsa"
    consortium: ConsortiumSpec
    merchants: MerchantsSpec = MerchantsSpec()
    customers: CustomersSpec = CustomersSpec()
    chain: ChainSpec = ChainSpec()
    network: NetworkSpec = NetworkSpec()
    arbiter: ArbiterSpec = ArbiterSpec()
    protocol: ProtocolSpec = ProtocolSpec()
    schedule: list[EventSpec] = []
    # blocks simulated after the last scheduled event; derived when omitted
    tail_blocks: Optional[int] = Field(None, ge=0)
    expect: ExpectSpec = ExpectSpec()

    @property
    def merchant_count(self) -> int:
        return self.merchants.count or self.consortium.k

    @model_validator(mode="after")
    def _references(self) -> "Scenario":
        k = self.consortium.k
        m = self.merchant_count
        n = self.customers.count
        for pos, sk in self.consortium.statekeepers.items():
            if not 0 <= pos < k:
                raise ValueError(f"statekeeper {pos} outside consortium of {k}")
            if any(not 0 <= c < n for c in sk.refuse_customers):
                raise ValueError(f"statekeeper {pos} refuses an undeclared customer")
            if sk.allocation and any(not 0 <= j < m for j in sk.allocation):
                raise ValueError(f"statekeeper {pos} allocates to an undeclared merchant")
        for j, spec in self.merchants.behaviors.items():
            if not 0 <= j < m:
                raise ValueError(f"merchant {j} not declared")
            if spec.contact and any(not 0 <= p < k for p in spec.contact):
                raise ValueError(f"merchant {j} contacts an undeclared statekeeper")
        for c in self.customers.overrides:
            if not 0 <= c < n:
                raise ValueError(f"customer override {c} not declared")
        for w in self.chain.miner.censor:
            if any(not 0 <= c < n for c in w.customers):
                raise ValueError("censor window names an undeclared customer")
        for i, ev in enumerate(self.schedule):
            if ev.customer >= n:
                raise ValueError(f"event {i}: customer {ev.customer} not declared")
            if ev.kind == "purchase":
                if ev.merchant is None or ev.value is None:
                    raise ValueError(f"event {i}: purchase needs merchant and value")
                if ev.merchant >= m:
                    raise ValueError(f"event {i}: merchant {ev.merchant} not declared")
                if ev.attack == "equivocate":
                    if ev.accomplice is None or ev.accomplice >= m:
                        raise ValueError(f"event {i}: equivocation needs a declared accomplice")
                    if not self.merchants.behaviors.get(ev.accomplice, MerchantSpec()).colluding:
                        raise ValueError(f"event {i}: accomplice {ev.accomplice} is not colluding")
        if self.protocol.reservation_scope not in ("consortium", "quorum"):
            raise ValueError("bad reservation scope")
        return self

    @classmethod
    def load(cls, path: str) -> "Scenario":
        with open(path) as fh:
            return cls.model_validate(json.load(fh))

    def dump(self) -> str:
        return self.model_dump_json(indent=2, exclude_defaults=True)
