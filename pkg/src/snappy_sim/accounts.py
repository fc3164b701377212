"""Account (transaction-level) signature schemes.

Protocol code only touches :class:`AccountKey` and :func:`verify_account_sig`;
which scheme backs a key is a deployment choice. ``ecdsa`` is real secp256k1
ECDSA with RFC 6979 deterministic nonces, ``stub`` is a keyed hash that is fast
and deterministic but offers no unforgeability. The simulator never forges
account signatures, so the stub is safe to use for large fuzz campaigns.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

ADDRESS_SIZE = 20
SECP256K1_N = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141

ECDSA = "ecdsa"
STUB = "stub"
SCHEMES = (ECDSA, STUB)


class AccountId(bytes):
    """160-bit account address."""

    def __new__(cls, value: bytes) -> "AccountId":
        if len(value) != ADDRESS_SIZE:
            raise ValueError(f"account id must be {ADDRESS_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "AccountId":
        return cls(bytes.fromhex(text.removeprefix("0x")))

    def __repr__(self) -> str:
        return f"0x{self.hex()[:8]}"

    def __str__(self) -> str:
        return "0x" + self.hex()


def address_of(public: bytes) -> AccountId:
    return AccountId(hashlib.sha3_256(public).digest()[-ADDRESS_SIZE:])


@dataclass(frozen=True)
class AccountSig:
    """The (v, r, s) triplet. The stub scheme stores its MAC in ``r``."""

    v: int
    r: int
    s: int

    @classmethod
    def empty(cls) -> "AccountSig":
        return cls(0, 0, 0)


@dataclass(frozen=True)
class AccountKey:
    scheme: str
    secret: int
    public: bytes
    address: AccountId = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "address", address_of(self.public))

    def sign(self, msg: bytes) -> AccountSig:
        if self.scheme == STUB:
            mac = hashlib.sha256(b"stub-sig" + self.public + msg).digest()
            return AccountSig(0, int.from_bytes(mac, "big"), 0)
        key = _private_key(self.secret)
        der = key.sign(msg, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))
        r, s = decode_dss_signature(der)
        return AccountSig(27, r, s)


_PRIVATE_CACHE: dict[int, ec.EllipticCurvePrivateKey] = {}
_PUBLIC_CACHE: dict[bytes, ec.EllipticCurvePublicKey] = {}


def _private_key(secret: int) -> ec.EllipticCurvePrivateKey:
    key = _PRIVATE_CACHE.get(secret)
    if key is None:
        key = _PRIVATE_CACHE[secret] = ec.derive_private_key(secret, ec.SECP256K1())
    return key


def account_keygen(seed: bytes, scheme: str = ECDSA) -> AccountKey:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown account scheme {scheme!r}")
    digest = hashlib.sha512(b"snappy-account" + seed).digest()
    secret = int.from_bytes(digest, "big") % (SECP256K1_N - 1) + 1
    if scheme == STUB:
        # 33 bytes like a compressed point so addresses look alike across schemes
        public = b"\x05" + hashlib.sha256(b"stub-pub" + secret.to_bytes(32, "big")).digest()
    else:
        public = _private_key(secret).public_key().public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
        )
    return AccountKey(scheme, secret, public)


def verify_account_sig(public: bytes, msg: bytes, sig: AccountSig) -> bool:
    if public[:1] == b"\x05":
        mac = hashlib.sha256(b"stub-sig" + public + msg).digest()
        return sig.r == int.from_bytes(mac, "big")
    if not (0 < sig.r < SECP256K1_N and 0 < sig.s < SECP256K1_N):
        return False
    pub = _PUBLIC_CACHE.get(public)
    if pub is None:
        try:
            pub = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256K1(), public)
        except ValueError:
            return False
        _PUBLIC_CACHE[public] = pub
    try:
        pub.verify(encode_dss_signature(sig.r, sig.s), msg, ec.ECDSA(hashes.SHA256()))
    except InvalidSignature:
        return False
    return True
