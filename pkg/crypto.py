"""
Hash, Merkle-tree and signature schemes.

Scheme ids are fixed:
    hash      0 = SHA-256, 1 = keyed BLAKE2b test double (fast, 32-byte output)
    signature 0 = MAC-33, a 33-byte keyed MAC standing in for a compressed ECC signature

Keys are derived from seeds so simulation runs are reproducible. The MAC secret of a key pair is
recoverable from its public key plus the scheme's master key, which models the pre-shared keys the
data engine distributes; verification therefore needs only the public key.
"""
from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field
from typing import Callable, Sequence

from errors import EmptyLeavesError, UnknownSchemeError

DIGEST_WIDTH = 32
SIGNATURE_WIDTH = 33
PUBLIC_KEY_WIDTH = 20

HASH_SHA256 = 0
HASH_TEST_DOUBLE = 1
SIG_MAC33 = 0

TEST_DOUBLE_KEY = b"chainsplitter-accounting-prf"
MAC33_MASTER_KEY = b"chainsplitter-data-engine-master"


def _sha256(msg: bytes) -> bytes:
    return hashlib.sha256(msg).digest()


def _keyed_prf(msg: bytes, key: bytes = TEST_DOUBLE_KEY) -> bytes:
    return hashlib.blake2b(msg, digest_size=DIGEST_WIDTH, key=key).digest()


@dataclass(frozen=True)
class HashScheme:
    id: int
    name: str
    digest_width: int
    fn: Callable[[bytes], bytes] = field(repr=False, compare=False)

    def digest(self, msg: bytes) -> bytes:
        return self.fn(bytes(msg))


@dataclass(frozen=True)
class SignatureScheme:
    id: int
    name: str
    signature_width: int = SIGNATURE_WIDTH
    public_key_width: int = PUBLIC_KEY_WIDTH
    master_key: bytes = field(default=MAC33_MASTER_KEY, repr=False)


@dataclass(frozen=True)
class KeyPair:
    secret: bytes = field(repr=False)
    public: bytes


SHA256 = HashScheme(HASH_SHA256, "sha256", DIGEST_WIDTH, _sha256)
TEST_DOUBLE = HashScheme(HASH_TEST_DOUBLE, "keyed-blake2b", DIGEST_WIDTH, _keyed_prf)
MAC33 = SignatureScheme(SIG_MAC33, "mac-33")

HASH_SCHEMES = {SHA256.id: SHA256, TEST_DOUBLE.id: TEST_DOUBLE}
SIGNATURE_SCHEMES = {MAC33.id: MAC33}


def get_hash_scheme(scheme) -> HashScheme:
    """Accept a HashScheme or its numeric id."""
    if isinstance(scheme, HashScheme):
        return scheme
    try:
        return HASH_SCHEMES[int(scheme)]
    except (KeyError, TypeError, ValueError):
        raise UnknownSchemeError(f"unknown hash scheme id {scheme!r}") from None


def get_signature_scheme(scheme) -> SignatureScheme:
    if isinstance(scheme, SignatureScheme):
        return scheme
    try:
        return SIGNATURE_SCHEMES[int(scheme)]
    except (KeyError, TypeError, ValueError):
        raise UnknownSchemeError(f"unknown signature scheme id {scheme!r}") from None


def hash_bytes(scheme, msg: bytes) -> bytes:
    return get_hash_scheme(scheme).digest(msg)


def merkle_root(scheme, leaves: Sequence[bytes]) -> bytes:
    """
    Binary Merkle root over ``leaves``.

    A single leaf hashes to hash(leaf). On every level with an odd node count the last node is
    duplicated before pairing.

    Raises:
        EmptyLeavesError: no leaves given
    """
    hs = get_hash_scheme(scheme)
    level = [bytes(leaf) for leaf in leaves]
    if not level:
        raise EmptyLeavesError("merkle_root needs at least one leaf")
    if len(level) == 1:
        return hs.digest(level[0])
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [hs.digest(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


# ---- Keys and signatures ----

def _seed_bytes(seed) -> bytes:
    if isinstance(seed, bytes):
        return seed
    return str(seed).encode("utf-8")


def _mac_secret(scheme: SignatureScheme, public: bytes) -> bytes:
    return hmac.new(scheme.master_key, public, hashlib.sha256).digest()


def derive_keypair(seed, scheme=MAC33) -> KeyPair:
    """Deterministic key pair for a node or device seed (str, int or bytes)."""
    ss = get_signature_scheme(scheme)
    public = hashlib.sha256(b"pk" + _seed_bytes(seed)).digest()[: ss.public_key_width]
    return KeyPair(secret=_mac_secret(ss, public), public=public)


def sign(scheme, keypair: KeyPair, msg: bytes) -> bytes:
    ss = get_signature_scheme(scheme)
    tag = hmac.new(keypair.secret, bytes(msg), hashlib.sha256).digest()
    return (b"\x02" + tag)[: ss.signature_width]


def verify(scheme, public: bytes, msg: bytes, sig: bytes) -> bool:
    ss = get_signature_scheme(scheme)
    if len(public) != ss.public_key_width or len(sig) != ss.signature_width:
        return False
    expected = (b"\x02" + hmac.new(_mac_secret(ss, public), bytes(msg), hashlib.sha256).digest())
    return hmac.compare_digest(expected[: ss.signature_width], bytes(sig))
