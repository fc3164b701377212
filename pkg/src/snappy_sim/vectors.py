"""Deterministic test vectors for cross-implementation checks.

Everything here is derived from fixed seeds, so regenerating the file must
reproduce it byte for byte.
"""

from __future__ import annotations

import json
from typing import Any

from . import bls
from .accounts import STUB, account_keygen, address_of
from .core import (
    Op,
    PaymentIntent,
    QuorumBitvector,
    Transaction,
    encode_tx,
    intent_digest,
    signing_bytes,
    tx_hash,
)

SEEDS = [b"vector-0", b"vector-1", b"vector-2", b"vector-3"]
MESSAGES = [b"abc", b"snappy payment", bytes(range(32))]


def _hex(b: bytes) -> str:
    return bytes(b).hex()


def generate_vectors() -> dict[str, Any]:
    keys = [bls.keygen(s) for s in SEEDS]
    out: dict[str, Any] = {
        "curve": "BLS12-381",
        "mode": "signatures in G1 (48 bytes), public keys in G2 (96 bytes)",
        "dst": bls.DST.decode(),
        "pop_dst": bls.POP_DST.decode(),
        "keys": [
            {"seed": s.decode(), "secret": format(k.secret, "064x"), "public": _hex(k.public)}
            for s, k in zip(SEEDS, keys)
        ],
        "hash_to_g1": [
            {"msg": _hex(m), "point": _hex(bls.G1Point.to_compressed_bytes(bls.hash_to_g1(m)))} for m in MESSAGES
        ],
        "signatures": [
            {"key": i, "msg": _hex(m), "sig": bls.sign(keys[i], m).point.hex()}
            for i in range(len(keys))
            for m in MESSAGES[:2]
        ],
        "possession": [
            {"key": i, "proof": bls.prove_possession(k).proof.hex()} for i, k in enumerate(keys)
        ],
    }
    msg = MESSAGES[1]
    agg = bls.aggregate([bls.sign(k, msg) for k in keys[:3]])
    out["aggregate"] = {
        "keys": [0, 1, 2],
        "msg": _hex(msg),
        "agg": agg.point.hex(),
        "apk": _hex(bls.aggregate_pubkeys([k.public for k in keys[:3]])),
        "valid": bls.verify_aggregate(msg, agg, [k.public for k in keys[:3]]),
        "valid_with_wrong_set": bls.verify_aggregate(msg, agg, [k.public for k in keys[1:4]]),
    }
    out["batch_randomizers"] = {"seed": 42, "values": [format(g, "032x") for g in bls.batch_randomizers(4, 42)]}

    customer = account_keygen(b"vector-customer", STUB)
    merchant = address_of(b"vector-merchant")
    arbiter = address_of(b"snappy-arbiter")
    intent = PaymentIntent(customer.address, merchant, 1_234, 7, 9)
    digest = intent_digest(intent)
    quorum = QuorumBitvector.from_indices([0, 1, 2], 4)
    pay_agg = bls.aggregate([bls.sign(k, digest) for k in keys[:3]])
    tx = Transaction(arbiter, customer.address, 1_234, 9, Op.PAY, merchant, 7, pay_agg, quorum)
    tx = tx.with_sig(customer.sign(signing_bytes(tx)))
    out["transaction"] = {
        "account_scheme": STUB,
        "intent_digest": digest.hex(),
        "quorum": quorum.to_bytes().hex(),
        "encoded": encode_tx(tx).hex(),
        "tx_hash": tx_hash(tx).hex(),
    }
    return out


def dumps_vectors(vectors: dict[str, Any]) -> str:
    return json.dumps(vectors, indent=2, sort_keys=True) + "\n"
