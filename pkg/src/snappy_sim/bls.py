"""BLS signatures over BLS12-381 in the minimal-signature-size setting.

Signatures and message hashes live in G1 (48-byte compressed), public keys in
G2 (96-byte compressed). Hash-to-curve is the standard SSWU random-oracle
construction with the domain tag ``SNAPPY-SIM-V1``. Group arithmetic and
pairings come from the arkworks binding; hashing comes from blspy.

Every value that crosses a module boundary is a compressed byte string, so the
dataclasses below are immutable, hashable and cheap to compare.
"""

from __future__ import annotations

import hashlib
import random
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import blspy
from py_arkworks_bls12381 import G1Point, G2Point, GT, Scalar

DST = b"SNAPPY-SIM-V1"
POP_DST = b"SNAPPY-SIM-V1-POP"
KEYGEN_TAG = b"SNAPPY-SIM-V1-KEYGEN"

# order of G1, G2 and GT
CURVE_ORDER = 0x73EDA753299D7D483339D80809A1D80553BDA402FFFE5BFEFFFFFFFF00000001

G1_SIZE = 48
G2_SIZE = 96

PER_MESSAGE = "per_message"
PER_SIGNER = "per_signer"
BATCH_STRATEGIES = (PER_MESSAGE, PER_SIGNER)


class BlsError(ValueError):
    """Malformed group element or invalid call (e.g. empty aggregate)."""


@dataclass(frozen=True)
class BlsKeypair:
    secret: int
    public: bytes

    def __repr__(self) -> str:
        return f"BlsKeypair(public={self.public[:6].hex()}..)"


@dataclass(frozen=True)
class BlsSignature:
    point: bytes


@dataclass(frozen=True)
class AggregateSignature:
    point: bytes


@dataclass(frozen=True)
class PossessionProof:
    proof: bytes


def _scalar(x: int) -> Scalar:
    return Scalar.from_le_bytes((x % CURVE_ORDER).to_bytes(32, "little"))


def _g1_bytes(p: G1Point) -> bytes:
    return bytes(p.to_compressed_bytes())


def _g2_bytes(p: G2Point) -> bytes:
    return bytes(p.to_compressed_bytes())


@lru_cache(maxsize=65536)
def decode_g1(data: bytes) -> G1Point:
    """Deserialize with on-curve and subgroup checks."""
    if len(data) != G1_SIZE:
        raise BlsError(f"G1 element must be {G1_SIZE} bytes, got {len(data)}")
    try:
        return G1Point.from_compressed_bytes(data)
    except ValueError as exc:
        raise BlsError(f"invalid G1 element: {exc}") from None


@lru_cache(maxsize=65536)
def decode_g2(data: bytes) -> G2Point:
    """Deserialize with on-curve and subgroup checks."""
    if len(data) != G2_SIZE:
        raise BlsError(f"G2 element must be {G2_SIZE} bytes, got {len(data)}")
    try:
        return G2Point.from_compressed_bytes(data)
    except ValueError as exc:
        raise BlsError(f"invalid G2 element: {exc}") from None


@lru_cache(maxsize=65536)
def hash_to_g1(msg: bytes, dst: bytes = DST) -> G1Point:
    return G1Point.from_compressed_bytes(bytes(blspy.G1Element.from_message(msg, dst)))


G2_GENERATOR = G2Point()
G1_IDENTITY = _g1_bytes(G1Point.identity())
G2_IDENTITY = _g2_bytes(G2Point.identity())


@lru_cache(maxsize=4096)
def keygen(seed: bytes) -> BlsKeypair:
    """Derive a keypair deterministically from ``seed``.

    The secret is a wide hash of the seed reduced into [1, p-1].
    """
    if not seed:
        raise BlsError("seed must be nonempty")
    wide = hashlib.sha512(KEYGEN_TAG + seed).digest()
    secret = int.from_bytes(wide, "big") % (CURVE_ORDER - 1) + 1
    return BlsKeypair(secret, _g2_bytes(G2_GENERATOR * _scalar(secret)))


def public_from_secret(secret: int) -> bytes:
    return _g2_bytes(G2_GENERATOR * _scalar(secret))


def _sign_point(secret: int, msg: bytes, dst: bytes) -> bytes:
    return _g1_bytes(hash_to_g1(msg, dst) * _scalar(secret))


def sign(key: BlsKeypair, msg: bytes) -> BlsSignature:
    if not msg:
        raise BlsError("message must be nonempty")
    return BlsSignature(_sign_point(key.secret, msg, DST))


def _pairing_check(g1s: list[G1Point], g2s: list[G2Point]) -> bool:
    return GT.multi_pairing(g1s, g2s) == GT.one()


@lru_cache(maxsize=16384)
def _verify_cached(msg: bytes, point: bytes, pubkeys: tuple[bytes, ...], dst: bytes) -> bool:
    try:
        sig = decode_g1(point)
        pks = [decode_g2(pk) for pk in pubkeys]
    except BlsError:
        return False
    apk = pks[0]
    for pk in pks[1:]:
        apk = apk + pk
    return _pairing_check([sig, -hash_to_g1(msg, dst)], [G2_GENERATOR, apk])


def verify(sig: BlsSignature, msg: bytes, public: bytes) -> bool:
    return _verify_cached(msg, sig.point, (public,), DST)


def prove_possession(key: BlsKeypair) -> PossessionProof:
    """Self-signature over the encoded public key under a separate domain tag."""
    return PossessionProof(_sign_point(key.secret, key.public, POP_DST))


def verify_possession(public: bytes, proof: PossessionProof) -> bool:
    try:
        if decode_g2(public) == G2Point.identity():
            return False
    except BlsError:
        return False
    return _verify_cached(public, proof.proof, (public,), POP_DST)


def aggregate(sigs: Sequence[BlsSignature]) -> AggregateSignature:
    if not sigs:
        raise BlsError("cannot aggregate an empty signature list")
    acc = decode_g1(sigs[0].point)
    for s in sigs[1:]:
        acc = acc + decode_g1(s.point)
    return AggregateSignature(_g1_bytes(acc))


def aggregate_pubkeys(pubkeys: Sequence[bytes]) -> bytes:
    if not pubkeys:
        raise BlsError("cannot aggregate an empty key list")
    acc = decode_g2(pubkeys[0])
    for pk in pubkeys[1:]:
        acc = acc + decode_g2(pk)
    return _g2_bytes(acc)


def verify_aggregate(msg: bytes, agg: AggregateSignature, pubkeys: Sequence[bytes]) -> bool:
    """Check e(A, h) == e(H(m), prod v_j) with the keys aggregated in G2."""
    if not pubkeys:
        raise BlsError("pubkey list must be nonempty")
    return _verify_cached(msg, agg.point, tuple(pubkeys), DST)


@lru_cache(maxsize=16384)
def verify_aggregate_per_signer(msg: bytes, agg: AggregateSignature, pubkeys: tuple[bytes, ...]) -> bool:
    """Same predicate without G2 additions: e(A, h) == prod_j e(H(m), v_j).

    Costs one pairing per signer plus one; no arithmetic in G2.
    """
    if not pubkeys:
        raise BlsError("pubkey list must be nonempty")
    try:
        sig = decode_g1(agg.point)
        pks = [decode_g2(pk) for pk in pubkeys]
    except BlsError:
        return False
    neg_h = -hash_to_g1(msg)
    return _pairing_check([sig] + [neg_h] * len(pks), [G2_GENERATOR] + pks)


def batch_randomizers(count: int, seed: int) -> list[int]:
    """128-bit nonzero scalars from a seeded RNG."""
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        g = 0
        while g == 0:
            g = rng.getrandbits(128)
        out.append(g)
    return out


BatchItem = tuple[bytes, AggregateSignature, Sequence[bytes]]


def batch_verify(
    items: Sequence[BatchItem],
    *,
    strategy: str = PER_MESSAGE,
    seed: int = 0,
) -> bool:
    """Verify several aggregates with one randomized pairing equation.

    ``per_message`` pairs each hashed message against its quorum's key product
    (l + 1 pairings). ``per_signer`` groups the hashed messages by signer and
    pairs each group against that signer's key (n + 1 pairings), which wins
    when there are many more messages than signers.
    """
    if not items:
        raise BlsError("batch must contain at least one item")
    if strategy not in BATCH_STRATEGIES:
        raise BlsError(f"unknown batch strategy {strategy!r}")
    gammas = [_scalar(g) for g in batch_randomizers(len(items), seed)]
    try:
        lhs = None
        for (_, agg, _), gamma in zip(items, gammas):
            term = decode_g1(agg.point) * gamma
            lhs = term if lhs is None else lhs + term
        if strategy == PER_MESSAGE:
            g1s = [lhs]
            g2s = [G2_GENERATOR]
            for (msg, _, pks), gamma in zip(items, gammas):
                if not pks:
                    raise BlsError("pubkey list must be nonempty")
                g1s.append(-(hash_to_g1(msg) * gamma))
                g2s.append(decode_g2(aggregate_pubkeys(list(pks))))
            return _pairing_check(g1s, g2s)
        per_key: dict[bytes, G1Point] = {}
        for (msg, _, pks), gamma in zip(items, gammas):
            if not pks:
                raise BlsError("pubkey list must be nonempty")
            hm = hash_to_g1(msg) * gamma
            for pk, mult in Counter(pks).items():
                term = hm if mult == 1 else hm * _scalar(mult)
                per_key[pk] = term if pk not in per_key else per_key[pk] + term
        g1s = [lhs] + [-p for p in per_key.values()]
        g2s = [G2_GENERATOR] + [decode_g2(pk) for pk in per_key]
        return _pairing_check(g1s, g2s)
    except BlsError:
        return False


def batch_pairing_count(items: Iterable[BatchItem], strategy: str) -> int:
    items = list(items)
    if strategy == PER_MESSAGE:
        return len(items) + 1
    return len({pk for _, _, pks in items for pk in pks}) + 1


def rogue_public_key(target_public: bytes, chosen_secret: int) -> bytes:
    """v' = h^x / v_target: the attacker knows the discrete log of v' * v_target only."""
    return _g2_bytes(G2_GENERATOR * _scalar(chosen_secret) + (-decode_g2(target_public)))


def forge_with_secret(secret: int, msg: bytes, dst: bytes = DST) -> bytes:
    """Raw H(m)^x under an arbitrary secret; used by attack fixtures."""
    return _sign_point(secret, msg, dst)
