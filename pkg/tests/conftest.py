"""Shared fixtures: a small Arbiter rig driven directly, without the chain."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import pytest

from snappy_sim import bls
from snappy_sim.accounts import AccountId, address_of
from snappy_sim.arbiter import (
    Arbiter,
    ArbiterConfig,
    CallResult,
    SettlementClaim,
    encode_claim,
    encode_statekeeper_registration,
)
from snappy_sim.core import Op, PaymentIntent, QuorumBitvector, Transaction, intent_digest, majority


@dataclass
class Rig:
    arbiter: Arbiter
    merchants: list[AccountId]
    keys: list[bls.BlsKeypair]
    customers: list[AccountId] = field(default_factory=list)
    block: int = 1
    _nonce: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.arbiter.config.k

    def nonce(self, who: AccountId) -> int:
        n = self._nonce.get(who, 0)
        self._nonce[who] = n + 1
        return n

    def call(self, tx: Transaction, block: Optional[int] = None) -> CallResult:
        return self.arbiter.execute(tx, self.block if block is None else block)

    def add_customer(self, collateral: int, label: str = "") -> AccountId:
        c = address_of(f"customer-{len(self.customers)}{label}".encode())
        self.call(Transaction(self.arbiter.address, c, collateral, self.nonce(c), Op.REGISTER_CUSTOMER))
        self.customers.append(c)
        return c

    def pay(
        self,
        customer: AccountId,
        merchant: AccountId,
        value: int,
        index: int,
        signers: Optional[Sequence[int]] = None,
        nonce: Optional[int] = None,
    ) -> Transaction:
        """A Pay transaction approved by ``signers`` (default: the first majority)."""
        signers = list(range(majority(self.k))) if signers is None else list(signers)
        nonce = 1000 + index if nonce is None else nonce
        digest = intent_digest(PaymentIntent(customer, merchant, value, index, nonce))
        agg = bls.aggregate([bls.sign(self.keys[i], digest) for i in signers])
        q = QuorumBitvector.from_indices(signers, self.k)
        return Transaction(self.arbiter.address, customer, value, nonce, Op.PAY, merchant, index, agg, q)

    def claim(self, claimant: AccountId, claim: SettlementClaim, block: Optional[int] = None) -> CallResult:
        tx = Transaction(self.arbiter.address, claimant, 0, self.nonce(claimant), Op.CLAIM, data=encode_claim(claim))
        return self.call(tx, block)


def make_rig(
    k: int = 3,
    merchants: int = 3,
    deposit: int = 30_000,
    **config,
) -> Rig:
    arb = Arbiter(address_of(b"arbiter"), ArbiterConfig(k=k, **config))
    ms = [address_of(f"merchant-{j}".encode()) for j in range(merchants)]
    keys = [bls.keygen(f"rig-statekeeper-{i}".encode()) for i in range(k)]
    rig = Rig(arb, ms, keys)
    for m in ms:
        rig.call(Transaction(arb.address, m, 0, rig.nonce(m), Op.REGISTER_MERCHANT))
    for i, key in enumerate(keys):
        s = address_of(f"statekeeper-{i}".encode())
        data = encode_statekeeper_registration(key.public, bls.prove_possession(key))
        rig.call(Transaction(arb.address, s, deposit, rig.nonce(s), Op.REGISTER_STATEKEEPER, data=data))
    return rig


@pytest.fixture
def rig3() -> Rig:
    return make_rig(k=3)


@pytest.fixture(scope="session")
def key_pool() -> list[bls.BlsKeypair]:
    return [bls.keygen(f"pool-{i}".encode()) for i in range(16)]
