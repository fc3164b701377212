"""Settlement contract: registration, logging, claims, clearance, snapshots."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_rig
from snappy_sim import bls
from snappy_sim.accounts import address_of
from snappy_sim.arbiter import (
    Arbiter,
    ArbiterError,
    SettlementClaim,
    decode_claim,
    encode_claim,
    encode_statekeeper_registration,
    find_overlap,
)
from snappy_sim.core import Op, QuorumBitvector, Transaction, dumps


def brute_force_customer_payout(collateral, reserved, value):
    """Largest payout that leaves the reserved amount untouched, by enumeration."""
    best = 0
    for rho in range(value + 1):
        if collateral - rho >= reserved:
            best = rho
    return best


def settlement_payouts(result, source):
    return sum(p.amount for p in result.payouts if p.reason == "settlement" and p.source == source)


def events(result, kind):
    return [e for e in result.events if e["kind"] == kind]


# --- registration --------------------------------------------------------


def test_merchant_registration_rules():
    rig = make_rig(k=3)
    m = address_of(b"late")
    with pytest.raises(ArbiterError, match="sealed"):
        rig.call(Transaction(rig.arbiter.address, m, 0, 0, Op.REGISTER_MERCHANT))
    arb = Arbiter(address_of(b"a2"), rig.arbiter.config)
    arb.execute(Transaction(arb.address, m, 0, 0, Op.REGISTER_MERCHANT), 1)
    before = dumps(arb.snapshot())
    with pytest.raises(ArbiterError, match="already"):
        arb.execute(Transaction(arb.address, m, 0, 1, Op.REGISTER_MERCHANT), 1)
    assert dumps(arb.snapshot()) == before


def test_customer_registration():
    rig = make_rig(k=3)
    c = rig.add_customer(100_00)
    assert rig.arbiter.customers[c].collateral == 100_00
    with pytest.raises(ArbiterError):
        rig.call(Transaction(rig.arbiter.address, c, 5, 9, Op.REGISTER_CUSTOMER))
    with pytest.raises(ArbiterError, match="positive"):
        rig.call(Transaction(rig.arbiter.address, address_of(b"zero"), 0, 0, Op.REGISTER_CUSTOMER))


def test_equal_split_allocation_small_shops():
    # $3,000 deposit spread over a consortium of 100 gives $30 per merchant
    rig = make_rig(k=100, merchants=3, deposit=3000_00)
    assert rig.arbiter.consortium_complete
    assert all(rig.arbiter.allocation(p, m) == 30_00 for p in (0, 57, 99) for m in rig.merchants)


def test_single_statekeeper_holds_everything():
    rig = make_rig(k=1, merchants=1, deposit=5_000)
    assert rig.arbiter.allocation(0, rig.merchants[0]) == 5_000


def test_allocations_never_exceed_deposit():
    rig = make_rig(k=3, merchants=10, deposit=30_000)
    for p in range(3):
        assert sum(rig.arbiter.allocation(p, m) for m in rig.merchants) <= 30_000


def test_statekeeper_registration_rejects_rogue_key_and_duplicates():
    arb = Arbiter(address_of(b"arb"), make_rig(k=2).arbiter.config)
    m = address_of(b"m")
    arb.execute(Transaction(arb.address, m, 0, 0, Op.REGISTER_MERCHANT), 1)
    honest = bls.keygen(b"honest")
    rogue = bls.rogue_public_key(honest.public, 77)
    fake = bls.PossessionProof(bls.forge_with_secret(77, rogue, bls.POP_DST))
    s1, s2 = address_of(b"s1"), address_of(b"s2")
    with pytest.raises(ArbiterError, match="possession"):
        arb.execute(
            Transaction(arb.address, s2, 100, 0, Op.REGISTER_STATEKEEPER, data=encode_statekeeper_registration(rogue, fake)),
            1,
        )
    good = encode_statekeeper_registration(honest.public, bls.prove_possession(honest))
    arb.execute(Transaction(arb.address, s1, 100, 0, Op.REGISTER_STATEKEEPER, data=good), 1)
    with pytest.raises(ArbiterError, match="already"):
        arb.execute(Transaction(arb.address, s1, 100, 1, Op.REGISTER_STATEKEEPER, data=good), 1)
    with pytest.raises(ArbiterError, match="BLS key"):
        arb.execute(Transaction(arb.address, s2, 100, 1, Op.REGISTER_STATEKEEPER, data=good), 1)
    assert len(arb.statekeepers) == 1


def test_consortium_is_fixed_once_full(rig3):
    extra = bls.keygen(b"fourth")
    data = encode_statekeeper_registration(extra.public, bls.prove_possession(extra))
    with pytest.raises(ArbiterError, match="full"):
        rig3.call(Transaction(rig3.arbiter.address, address_of(b"s4"), 10, 0, Op.REGISTER_STATEKEEPER, data=data))


# --- logging and forwarding ----------------------------------------------


def test_pay_forwards_and_logs_without_pairings(rig3):
    c = rig3.add_customer(1_000)
    tx = rig3.pay(c, rig3.merchants[0], 250, 1)
    res = rig3.call(tx)
    assert res.cost["pairings"] == 0
    assert [(p.to, p.amount, p.reason) for p in res.payouts] == [(rig3.merchants[0], 250, "forward")]
    entry = rig3.arbiter.customers[c].finalized[1]
    assert entry.verified is False


def test_pay_with_used_index_is_returned(rig3):
    c = rig3.add_customer(1_000)
    rig3.call(rig3.pay(c, rig3.merchants[0], 250, 1))
    res = rig3.call(rig3.pay(c, rig3.merchants[1], 90, 1, nonce=55))
    assert [(p.to, p.amount, p.reason) for p in res.payouts] == [(c, 90, "return")]
    assert res.cost["pairings"] == 0


def test_pay_from_unregistered_sender_is_returned(rig3):
    stranger = address_of(b"stranger")
    res = rig3.call(rig3.pay(stranger, rig3.merchants[0], 40, 1))
    assert [(p.to, p.reason) for p in res.payouts] == [(stranger, "return")]


def test_pay_with_forged_aggregate_is_still_logged(rig3):
    # logging does not verify; the forgery is caught lazily at claim time
    c = rig3.add_customer(1_000)
    tx = rig3.pay(c, rig3.merchants[0], 10, 1, signers=[0])
    res = rig3.call(tx)
    assert res.payouts[0].reason == "forward"
    assert 1 in rig3.arbiter.customers[c].finalized


# --- customer-collateral claims ------------------------------------------


def test_claim_uses_collateral_above_reserved_pending():
    rig = make_rig(k=3)
    c = rig.add_customer(100)
    m = rig.merchants[0]
    t1 = rig.pay(c, rig.merchants[1], 50, 1)
    t2 = rig.pay(c, rig.merchants[2], 30, 2)
    tp = rig.pay(c, m, 30, 3)
    res = rig.claim(m, SettlementClaim(tp, [t1, t2]))
    assert settlement_payouts(res, "customer") == 20
    assert brute_force_customer_payout(100, 80, 30) == 20
    assert events(res, "statekeeper_claim")[0]["residual"] == 10
    assert rig.arbiter.customers[c].collateral == 80


def test_claim_fully_covered():
    rig = make_rig(k=3)
    c = rig.add_customer(100)
    res = rig.claim(rig.merchants[0], SettlementClaim(rig.pay(c, rig.merchants[0], 30, 1)))
    assert settlement_payouts(res, "customer") == 30
    assert not events(res, "statekeeper_claim")
    assert rig.arbiter.customers[c].collateral == 70


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 400),
    st.lists(st.integers(1, 120), max_size=3),
    st.integers(1, 200),
)
def test_customer_payout_matches_enumeration(collateral, pending_values, value):
    rig = make_rig(k=3)
    c = rig.add_customer(collateral)
    m = rig.merchants[0]
    preceding = [rig.pay(c, rig.merchants[1], v, i + 1) for i, v in enumerate(pending_values)]
    tp = rig.pay(c, m, value, len(preceding) + 1)
    res = rig.claim(m, SettlementClaim(tp, preceding))
    expected = brute_force_customer_payout(collateral, sum(pending_values), value)
    assert settlement_payouts(res, "customer") == expected
    # the reserved part of the collateral is left intact
    assert rig.arbiter.customers[c].collateral >= min(collateral, sum(pending_values))


def test_repeat_claim_is_rejected():
    rig = make_rig(k=3)
    c = rig.add_customer(100)
    claim = SettlementClaim(rig.pay(c, rig.merchants[0], 30, 1))
    rig.claim(rig.merchants[0], claim)
    with pytest.raises(ArbiterError, match="processed"):
        rig.claim(rig.merchants[0], claim)


def test_claim_for_tx_already_on_chain_is_rejected(rig3):
    c = rig3.add_customer(100)
    tx = rig3.pay(c, rig3.merchants[0], 30, 1)
    rig3.call(tx)
    with pytest.raises(ArbiterError, match="recorded"):
        rig3.claim(rig3.merchants[0], SettlementClaim(tx))


def test_claim_with_forged_quorum_is_rejected(rig3):
    c = rig3.add_customer(100)
    tx = rig3.pay(c, rig3.merchants[0], 30, 1)
    forged = Transaction(
        tx.to, tx.frm, tx.value, tx.nonce, Op.PAY, tx.merchant, tx.index, tx.agg_sig,
        QuorumBitvector.from_indices([1, 2], 3),
    )
    before = dumps(rig3.arbiter.snapshot())
    with pytest.raises(ArbiterError, match="approval"):
        rig3.claim(rig3.merchants[0], SettlementClaim(forged))
    minority = rig3.pay(c, rig3.merchants[0], 30, 1, signers=[0])
    with pytest.raises(ArbiterError, match="approval"):
        rig3.claim(rig3.merchants[0], SettlementClaim(minority))
    assert dumps(rig3.arbiter.snapshot()) == before


def test_claim_missing_preceding_index_is_rejected(rig3):
    c = rig3.add_customer(100)
    t1 = rig3.pay(c, rig3.merchants[1], 10, 1)
    tp = rig3.pay(c, rig3.merchants[0], 30, 3)
    with pytest.raises(ArbiterError, match="missing"):
        rig3.claim(rig3.merchants[0], SettlementClaim(tp, [t1]))


def test_claim_rejects_preceding_without_approval(rig3):
    c = rig3.add_customer(100)
    bad = rig3.pay(c, rig3.merchants[1], 10, 1, signers=[2])
    tp = rig3.pay(c, rig3.merchants[0], 30, 2)
    with pytest.raises(ArbiterError, match="lacks approval"):
        rig3.claim(rig3.merchants[0], SettlementClaim(tp, [bad]))


def test_lazy_verification_deletes_unapproved_entries(rig3):
    c = rig3.add_customer(100)
    rig3.call(rig3.pay(c, rig3.merchants[1], 10, 1, signers=[0]))
    tp = rig3.pay(c, rig3.merchants[0], 30, 2)
    # the forged entry is dropped, so index 1 must come from the claimant
    with pytest.raises(ArbiterError, match="missing"):
        rig3.claim(rig3.merchants[0], SettlementClaim(tp))
    assert 1 not in rig3.arbiter.customers[c].finalized
    valid_1 = rig3.pay(c, rig3.merchants[1], 10, 1, nonce=77)
    res = rig3.claim(rig3.merchants[0], SettlementClaim(tp, [valid_1]))
    assert settlement_payouts(res, "customer") == 30


def test_lazy_verification_promotes_valid_entries(rig3):
    c = rig3.add_customer(100)
    rig3.call(rig3.pay(c, rig3.merchants[1], 10, 1))
    rig3.claim(rig3.merchants[0], SettlementClaim(rig3.pay(c, rig3.merchants[0], 30, 2)))
    assert rig3.arbiter.customers[c].finalized[1].verified


def test_two_claims_in_one_block_do_not_double_reserve():
    rig = make_rig(k=3)
    c = rig.add_customer(100)
    t1 = rig.pay(c, rig.merchants[0], 40, 1)
    t2 = rig.pay(c, rig.merchants[1], 50, 2)
    first = rig.claim(rig.merchants[0], SettlementClaim(t1), block=7)
    # built before the first claim landed, so it still lists t1 as pending
    second = rig.claim(rig.merchants[1], SettlementClaim(t2, [t1]), block=7)
    assert settlement_payouts(first, "customer") == 40
    assert settlement_payouts(second, "customer") == 50
    assert rig.arbiter.customers[c].collateral == 10


def test_claim_encoding_round_trip(rig3):
    c = rig3.add_customer(100)
    a, b = rig3.pay(c, rig3.merchants[0], 5, 1), rig3.pay(c, rig3.merchants[1], 6, 1)
    claim = SettlementClaim(rig3.pay(c, rig3.merchants[0], 7, 2), [a], [(a, b)])
    assert decode_claim(encode_claim(claim), 3) == claim


# --- statekeeper claims --------------------------------------------------


def equivocation_setup(rule, deposit=30_000, victim_value=50, other_value=30):
    """Index 1 approved twice by overlapping quorums; the other intent lands on chain."""
    rig = make_rig(k=5, merchants=3, deposit=deposit, penalty_rule=rule)
    c = rig.add_customer(10)
    victim, other = rig.merchants[0], rig.merchants[1]
    tp = rig.pay(c, victim, victim_value, 1, signers=[0, 1, 2])
    rival = rig.pay(c, other, other_value, 1, signers=[2, 3, 4], nonce=99)
    rig.call(rival)
    return rig, c, victim, tp, rival


def test_find_overlap_examples():
    k = 101
    q1 = QuorumBitvector.from_indices(range(0, 51), k)
    q2 = QuorumBitvector.from_indices(range(50, 101), k)
    assert find_overlap(q1, q2) == [50]
    assert find_overlap(q1, q1) == list(range(51))


def test_equivocation_difference_rule_deducts_value_gap():
    rig, c, victim, tp, rival = equivocation_setup("difference")
    before = rig.arbiter.allocation(2, victim)
    res = rig.claim(victim, SettlementClaim(tp, [], [(tp, rival)]))
    assert events(res, "equivocation_detected")
    assert rig.arbiter.allocation(2, victim) == before - 20
    assert settlement_payouts(res, "customer") == 0
    assert settlement_payouts(res, "statekeeper") == 20
    assert rig.arbiter.customers[c].collateral == 10


def test_equivocation_residual_rule_covers_full_value():
    rig, c, victim, tp, rival = equivocation_setup("residual")
    before = rig.arbiter.allocation(2, victim)
    res = rig.claim(victim, SettlementClaim(tp, [], [(tp, rival)]))
    assert rig.arbiter.allocation(2, victim) == before - 50
    assert settlement_payouts(res, "statekeeper") == 50


def test_difference_rule_can_leave_victim_short():
    # the gap between the two values exceeds the allocation although the
    # victim's own value would fit: the literal rule recovers nothing
    rig, c, victim, tp, rival = equivocation_setup("difference", deposit=10_000, victim_value=1_500, other_value=5_054)
    assert rig.arbiter.allocation(2, victim) == 2_000
    res = rig.claim(victim, SettlementClaim(tp, [], [(tp, rival)]))
    assert settlement_payouts(res, "statekeeper") == 0
    rig2, _, victim2, tp2, rival2 = equivocation_setup("residual", deposit=10_000, victim_value=1_500, other_value=5_054)
    res2 = rig2.claim(victim2, SettlementClaim(tp2, [], [(tp2, rival2)]))
    assert settlement_payouts(res2, "statekeeper") == 1_500


def test_deduction_only_touches_victims_allocation():
    rig, c, victim, tp, rival = equivocation_setup("residual")
    others = {m: rig.arbiter.allocation(2, m) for m in rig.merchants[1:]}
    rig.claim(victim, SettlementClaim(tp, [], [(tp, rival)]))
    assert {m: rig.arbiter.allocation(2, m) for m in rig.merchants[1:]} == others


def test_deduction_picks_lowest_index_equivocator():
    rig = make_rig(k=5, penalty_rule="residual")
    c = rig.add_customer(10)
    victim = rig.merchants[0]
    tp = rig.pay(c, victim, 40, 1, signers=[0, 1, 2, 3])
    rival = rig.pay(c, rig.merchants[1], 30, 1, signers=[1, 2, 3], nonce=99)
    rig.call(rival)
    rig.claim(victim, SettlementClaim(tp, [], [(tp, rival)]))
    assert rig.arbiter.allocation(1, victim) == 6_000 - 40
    assert rig.arbiter.allocation(2, victim) == 6_000


def test_identical_tuple_is_skipped():
    rig, c, victim, tp, rival = equivocation_setup("residual")
    res = rig.claim(victim, SettlementClaim(tp, [], [(tp, tp)]))
    assert settlement_payouts(res, "statekeeper") == 0
    assert not events(res, "statekeeper_deducted")


def test_tuple_with_invalid_approval_is_skipped():
    rig, c, victim, tp, rival = equivocation_setup("residual")
    bogus = rig.pay(c, rig.merchants[2], 10, 1, signers=[4], nonce=5)
    res = rig.claim(victim, SettlementClaim(tp, [], [(tp, bogus), (tp, rival)]))
    assert settlement_payouts(res, "statekeeper") == 50
    assert len(events(res, "statekeeper_deducted")) == 1


# --- costs ---------------------------------------------------------------


def test_settlement_pairings_grow_with_quorum_and_pending():
    rig = make_rig(k=9)
    c = rig.add_customer(10_000)
    costs = []
    for members in (5, 7, 9):
        tp = rig.pay(c, rig.merchants[0], 10, members, signers=range(members))
        pre = [rig.pay(c, rig.merchants[1], 1, i) for i in range(1, members)]
        costs.append(rig.claim(rig.merchants[0], SettlementClaim(tp, pre)).cost["pairings"])
    assert costs[0] < costs[1] < costs[2]


def test_aggregate_mode_uses_constant_pairings():
    rig = make_rig(k=9, verify_mode="aggregate")
    c = rig.add_customer(10_000)
    small = rig.claim(rig.merchants[0], SettlementClaim(rig.pay(c, rig.merchants[0], 10, 1, signers=range(5))))
    big = rig.claim(rig.merchants[1], SettlementClaim(rig.pay(c, rig.merchants[1], 10, 2, signers=range(9)), []), block=2)
    assert small.cost["pairings"] == big.cost["pairings"] == 2
    assert big.cost["group_adds"] > small.cost["group_adds"]


@pytest.mark.parametrize("strategy", ["per_message", "per_signer"])
def test_batched_preceding_verification_agrees(strategy):
    rig = make_rig(k=5, batch_strategy=strategy)
    c = rig.add_customer(100)
    pre = [rig.pay(c, rig.merchants[1], 10, i) for i in (1, 2, 3)]
    res = rig.claim(rig.merchants[0], SettlementClaim(rig.pay(c, rig.merchants[0], 20, 4), pre))
    assert settlement_payouts(res, "customer") == 20
    bad = pre[:2] + [rig.pay(c, rig.merchants[1], 10, 3, signers=[0])]
    with pytest.raises(ArbiterError, match="lacks approval"):
        rig.claim(rig.merchants[2], SettlementClaim(rig.pay(c, rig.merchants[2], 20, 4, nonce=8), bad))


# --- clearance and expiry ------------------------------------------------


def test_clearance_boundary():
    rig = make_rig(k=3, clearance_period=240)
    c = rig.add_customer(500)
    rig.call(Transaction(rig.arbiter.address, c, 0, 50, Op.CLEAR), block=100)
    with pytest.raises(ArbiterError, match="elapsed"):
        rig.call(Transaction(rig.arbiter.address, c, 0, 51, Op.WITHDRAW), block=339)
    res = rig.call(Transaction(rig.arbiter.address, c, 0, 52, Op.WITHDRAW), block=340)
    assert [(p.to, p.amount, p.reason) for p in res.payouts] == [(c, 500, "withdraw")]
    assert c not in rig.arbiter.customers


def test_withdraw_without_clearance_and_double_clear():
    rig = make_rig(k=3)
    c = rig.add_customer(500)
    with pytest.raises(ArbiterError):
        rig.call(Transaction(rig.arbiter.address, c, 0, 50, Op.WITHDRAW))
    rig.call(Transaction(rig.arbiter.address, c, 0, 51, Op.CLEAR), block=3)
    with pytest.raises(ArbiterError, match="already"):
        rig.call(Transaction(rig.arbiter.address, c, 0, 52, Op.CLEAR), block=4)


def test_settlement_during_clearance_still_pays():
    rig = make_rig(k=3, clearance_period=240)
    c = rig.add_customer(500)
    rig.call(Transaction(rig.arbiter.address, c, 0, 50, Op.CLEAR), block=100)
    res = rig.claim(rig.merchants[0], SettlementClaim(rig.pay(c, rig.merchants[0], 120, 1)), block=150)
    assert settlement_payouts(res, "customer") == 120
    out = rig.call(Transaction(rig.arbiter.address, c, 0, 51, Op.WITHDRAW), block=340)
    assert out.payouts[0].amount == 380


def test_expired_entries_are_pruned_and_old_claims_rejected():
    rig = make_rig(k=3, expiration_window=10)
    c = rig.add_customer(500)
    rig.call(rig.pay(c, rig.merchants[0], 10, 1), block=1)
    old = rig.pay(c, rig.merchants[1], 10, 1, nonce=3)
    with pytest.raises(ArbiterError, match="window"):
        rig.claim(rig.merchants[1], SettlementClaim(old), block=30)
    # index 2 no longer needs index 1 to be listed
    res = rig.claim(rig.merchants[1], SettlementClaim(rig.pay(c, rig.merchants[1], 10, 2)), block=30)
    assert settlement_payouts(res, "customer") == 10


# --- snapshots -----------------------------------------------------------


def test_snapshot_round_trip_is_canonical():
    rig, c, victim, tp, rival = equivocation_setup("residual")
    rig.claim(victim, SettlementClaim(tp, [], [(tp, rival)]))
    text = rig.arbiter.export_json()
    assert text == dumps(rig.arbiter.snapshot())
    assert text == json.dumps(json.loads(text), sort_keys=True, separators=(",", ":"))
    restored = Arbiter.import_json(text)
    assert restored.export_json() == text
    assert restored.held_funds() == rig.arbiter.held_funds()


def test_restored_arbiter_behaves_identically(rig3):
    c = rig3.add_customer(100)
    rig3.call(rig3.pay(c, rig3.merchants[0], 30, 1))
    restored = Arbiter.import_json(rig3.arbiter.export_json())
    claim = SettlementClaim(rig3.pay(c, rig3.merchants[1], 40, 2))
    a = rig3.claim(rig3.merchants[1], claim)
    rig3.arbiter = restored
    b = rig3.claim(rig3.merchants[1], claim)
    assert a.payouts == b.payouts and a.events == b.events
