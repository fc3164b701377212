"""BLS layer checked against py_ecc as an independent oracle."""

import json
import random
from hashlib import sha256
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from py_ecc.bls.hash_to_curve import hash_to_G1
from py_ecc.bls.point_compression import compress_G1, compress_G2
from py_ecc.optimized_bls12_381 import G2, multiply, pairing

from snappy_sim import bls
from snappy_sim.vectors import dumps_vectors, generate_vectors

FIXTURE = Path(__file__).parent / "fixtures" / "crypto_vectors.json"


def oracle_g1(point) -> bytes:
    return compress_G1(point).to_bytes(48, "big")


def oracle_g2(point) -> bytes:
    z1, z2 = compress_G2(point)
    return z1.to_bytes(48, "big") + z2.to_bytes(48, "big")


@pytest.mark.parametrize("msg", [b"abc", b"", b"snappy payment", bytes(range(64))])
def test_hash_to_g1_matches_oracle(msg):
    expected = oracle_g1(hash_to_G1(msg, bls.DST, sha256))
    assert bytes(bls.G1Point.to_compressed_bytes(bls.hash_to_g1(msg))) == expected


def test_public_key_and_signature_match_oracle():
    key = bls.keygen(b"oracle-key")
    assert key.public == oracle_g2(multiply(G2, key.secret))
    msg = b"intent digest"
    expected = oracle_g1(multiply(hash_to_G1(msg, bls.DST, sha256), key.secret))
    assert bls.sign(key, msg).point == expected


def test_verify_agrees_with_oracle_pairing():
    key = bls.keygen(b"pairing-key")
    msg = b"pairing check"
    h = hash_to_G1(msg, bls.DST, sha256)
    sig_point = multiply(h, key.secret)
    pk_point = multiply(G2, key.secret)
    assert pairing(G2, sig_point) == pairing(pk_point, h)
    assert bls.verify(bls.BlsSignature(oracle_g1(sig_point)), msg, key.public)


def test_keygen_is_deterministic_and_seed_separated():
    assert bls.keygen(b"a") == bls.keygen(b"a")
    assert bls.keygen(b"a").public != bls.keygen(b"b").public
    with pytest.raises(bls.BlsError):
        bls.keygen(b"")


def test_sign_verify_round_trip(key_pool):
    sig = bls.sign(key_pool[0], b"m")
    assert bls.verify(sig, b"m", key_pool[0].public)
    assert not bls.verify(sig, b"m2", key_pool[0].public)
    assert not bls.verify(sig, b"m", key_pool[1].public)


def test_malformed_points_do_not_verify(key_pool):
    sig = bls.sign(key_pool[0], b"m")
    bad = bytes([sig.point[0] ^ 0x01]) + sig.point[1:]
    assert not bls.verify(bls.BlsSignature(bad), b"m", key_pool[0].public)
    assert not bls.verify(sig, b"m", b"\x00" * 96)
    with pytest.raises(bls.BlsError):
        bls.decode_g1(b"\x01" * 10)


# --- possession proofs ---------------------------------------------------


def test_possession_proof_binds_to_its_key(key_pool):
    a, b = key_pool[0], key_pool[1]
    proof = bls.prove_possession(a)
    assert bls.verify_possession(a.public, proof)
    assert not bls.verify_possession(b.public, proof)


def test_possession_proof_uses_separate_domain(key_pool):
    key = key_pool[2]
    # an ordinary signature over the key bytes is not a possession proof
    plain = bls.sign(key, key.public)
    assert not bls.verify_possession(key.public, bls.PossessionProof(plain.point))


def test_identity_key_has_no_possession():
    assert not bls.verify_possession(bls.G2_IDENTITY, bls.PossessionProof(bls.G1_IDENTITY))


def test_rogue_key_attack_needs_possession_check(key_pool):
    victim = key_pool[3]
    x = 123456789
    rogue = bls.rogue_public_key(victim.public, x)
    msg = b"forged approval"
    # without possession checks the attacker alone "co-signs" with the victim
    forged = bls.AggregateSignature(bls.forge_with_secret(x, msg))
    assert bls.verify_aggregate(msg, forged, [victim.public, rogue])
    # but cannot produce a possession proof for the rogue key
    attempt = bls.PossessionProof(bls.forge_with_secret(x, rogue, bls.POP_DST))
    assert not bls.verify_possession(rogue, attempt)


# --- aggregation ---------------------------------------------------------


def test_aggregate_singleton_and_commutative(key_pool):
    s1, s2 = bls.sign(key_pool[0], b"m"), bls.sign(key_pool[1], b"m")
    assert bls.aggregate([s1]).point == s1.point
    assert bls.aggregate([s1, s2]) == bls.aggregate([s2, s1])
    with pytest.raises(bls.BlsError):
        bls.aggregate([])


def test_aggregate_matches_individual_verification(key_pool):
    msg = b"quorum intent"
    keys = key_pool[:3]
    sigs = [bls.sign(k, msg) for k in keys]
    assert all(bls.verify(s, msg, k.public) for s, k in zip(sigs, keys))
    agg = bls.aggregate(sigs)
    pks = [k.public for k in keys]
    assert bls.verify_aggregate(msg, agg, pks)
    assert bls.verify_aggregate_per_signer(msg, agg, tuple(pks))


def test_aggregate_rejects_wrong_message_or_key_set(key_pool):
    msg = b"intent"
    keys = key_pool[:4]
    sigs = [bls.sign(k, msg) for k in keys]
    pks = [k.public for k in keys]
    swapped = bls.aggregate(sigs[:3] + [bls.sign(keys[3], b"other")])
    assert not bls.verify_aggregate(msg, swapped, pks)
    agg = bls.aggregate(sigs)
    assert not bls.verify_aggregate(msg, agg, pks[:3])
    assert not bls.verify_aggregate_per_signer(msg, agg, tuple(pks[:3]))
    with pytest.raises(bls.BlsError):
        bls.verify_aggregate(msg, agg, [])


def test_aggregate_pubkeys_matches_oracle_sum(key_pool):
    keys = key_pool[:3]
    total = sum(k.secret for k in keys) % bls.CURVE_ORDER
    assert bls.aggregate_pubkeys([k.public for k in keys]) == oracle_g2(multiply(G2, total))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=8, unique=True), st.binary(min_size=1, max_size=40))
def test_aggregation_homomorphism(key_pool, members, msg):
    keys = [key_pool[i] for i in members]
    agg = bls.aggregate([bls.sign(k, msg) for k in keys])
    assert bls.verify_aggregate(msg, agg, [k.public for k in keys])


# --- batch verification --------------------------------------------------


def _items(key_pool, count, rng, forge_at=None):
    items = []
    for j in range(count):
        msg = f"batch-{rng.random()}".encode()
        members = rng.sample(range(len(key_pool)), rng.randint(1, 5))
        keys = [key_pool[i] for i in members]
        agg = bls.aggregate([bls.sign(k, msg) for k in keys])
        if j == forge_at:
            agg = bls.aggregate([bls.sign(k, msg + b"!") for k in keys])
        items.append((msg, agg, [k.public for k in keys]))
    return items


@pytest.mark.parametrize("strategy", bls.BATCH_STRATEGIES)
def test_batch_of_valid_aggregates_accepts(key_pool, strategy):
    items = _items(key_pool, 10, random.Random(1))
    assert bls.batch_verify(items, strategy=strategy, seed=5)


@pytest.mark.parametrize("strategy", bls.BATCH_STRATEGIES)
def test_batch_with_one_forgery_rejects(key_pool, strategy):
    rng = random.Random(2)
    for trial in range(20):
        items = _items(key_pool, 6, rng, forge_at=trial % 6)
        assert not bls.batch_verify(items, strategy=strategy, seed=trial)


def test_batch_rejects_two_forgeries_that_cancel_without_randomizers(key_pool):
    # sigma1 * X and sigma2 / X pass an unrandomized product check
    msg1, msg2 = b"one", b"two"
    k1, k2 = key_pool[0], key_pool[1]
    s1 = bls.decode_g1(bls.sign(k1, msg1).point)
    s2 = bls.decode_g1(bls.sign(k2, msg2).point)
    shift = bls.hash_to_g1(b"shift")
    bad1 = bls.AggregateSignature(bytes(bls.G1Point.to_compressed_bytes(s1 + shift)))
    bad2 = bls.AggregateSignature(bytes(bls.G1Point.to_compressed_bytes(s2 + (-shift))))
    items = [(msg1, bad1, [k1.public]), (msg2, bad2, [k2.public])]
    assert not bls.verify_aggregate(msg1, bad1, [k1.public])
    for strategy in bls.BATCH_STRATEGIES:
        assert not bls.batch_verify(items, strategy=strategy, seed=3)


def test_batch_pairing_counts(key_pool):
    items = _items(key_pool, 5, random.Random(3))
    assert bls.batch_pairing_count(items, bls.PER_MESSAGE) == 6
    signers = {pk for _, _, pks in items for pk in pks}
    assert bls.batch_pairing_count(items, bls.PER_SIGNER) == len(signers) + 1


def test_batch_rejects_empty_and_unknown_strategy(key_pool):
    with pytest.raises(bls.BlsError):
        bls.batch_verify([])
    items = _items(key_pool, 1, random.Random(4))
    with pytest.raises(bls.BlsError):
        bls.batch_verify(items, strategy="nope")


def test_batch_randomizers_are_seeded_128_bit():
    a = bls.batch_randomizers(50, 9)
    assert a == bls.batch_randomizers(50, 9)
    assert a != bls.batch_randomizers(50, 10)
    assert all(0 < g < 2**128 for g in a)


# --- vectors fixture -----------------------------------------------------


def test_vectors_fixture_matches_generator():
    assert FIXTURE.read_text() == dumps_vectors(generate_vectors())


def test_vectors_fixture_checked_against_oracle():
    vec = json.loads(FIXTURE.read_text())
    assert vec["dst"] == "SNAPPY-SIM-V1"
    for entry in vec["hash_to_g1"]:
        msg = bytes.fromhex(entry["msg"])
        assert entry["point"] == oracle_g1(hash_to_G1(msg, bls.DST, sha256)).hex()
    for key in vec["keys"]:
        assert key["public"] == oracle_g2(multiply(G2, int(key["secret"], 16))).hex()
    secrets = [int(k["secret"], 16) for k in vec["keys"]]
    for s in vec["signatures"]:
        msg = bytes.fromhex(s["msg"])
        assert s["sig"] == oracle_g1(multiply(hash_to_G1(msg, bls.DST, sha256), secrets[s["key"]])).hex()
    for p in vec["possession"]:
        pub = bytes.fromhex(vec["keys"][p["key"]]["public"])
        expected = multiply(hash_to_G1(pub, bls.POP_DST, sha256), secrets[p["key"]])
        assert p["proof"] == oracle_g1(expected).hex()
    assert vec["aggregate"]["valid"] is True
    assert vec["aggregate"]["valid_with_wrong_set"] is False
