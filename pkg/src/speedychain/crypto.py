"""Hashing, signatures and the Merkle tree of active public keys.

The protocol uses a single suite: SHA-256 digests and Ed25519 signatures.
Neither digests nor signatures carry an algorithm tag, so swapping the suite
means changing the constants and the three primitives below, nothing else.
"""

from __future__ import annotations

import hashlib
import os
import random
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from typing import Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

HASH_NAME = "sha256"
SIGNATURE_SCHEME = "ed25519"

DIGEST_SIZE = 32
PUBLIC_KEY_SIZE = 32
PRIVATE_KEY_SIZE = 32
SIGNATURE_SIZE = 64

ZERO_DIGEST = bytes(DIGEST_SIZE)

# Running totals of primitive invocations. The deterministic stopwatch in
# ``metrics`` turns these into a reproducible cost figure.
WORK = {"sign": 0, "verify": 0, "hash": 0, "hashed_bytes": 0}


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    private: bytes = b""

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}...)"


def generate_keypair(rng: random.Random | None = None) -> KeyPair:
    """Create a fresh Ed25519 key pair.

    Key material comes from the OS CSPRNG unless ``rng`` is given. The
    simulator passes its seeded generator so that whole runs replay
    byte-for-byte; that mode is for simulation only.
    """
    seed = os.urandom(PRIVATE_KEY_SIZE) if rng is None else rng.randbytes(PRIVATE_KEY_SIZE)
    return keypair_from_seed(seed)


def keypair_from_seed(seed: bytes) -> KeyPair:
    if len(seed) != PRIVATE_KEY_SIZE:
        raise ValueError(f"seed must be {PRIVATE_KEY_SIZE} bytes")
    public = (
        _private_key(seed).public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    )
    return KeyPair(public=public, private=seed)


@lru_cache(maxsize=4096)
def _private_key(seed: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(seed)


@lru_cache(maxsize=4096)
def _public_key(public: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public)


def sign(private: bytes, message: bytes) -> bytes:
    if not isinstance(private, (bytes, bytearray)) or len(private) != PRIVATE_KEY_SIZE:
        raise ValueError("malformed private key")
    WORK["sign"] += 1
    return _private_key(bytes(private)).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is ``public``'s signature over ``message``.

    Malformed keys or signatures are reported as ``False``, never raised.
    """
    WORK["verify"] += 1
    if len(public) != PUBLIC_KEY_SIZE or len(signature) != SIGNATURE_SIZE:
        return False
    try:
        _public_key(bytes(public)).verify(bytes(signature), message)
    except (InvalidSignature, ValueError):
        return False
    return True


def digest(data: bytes) -> bytes:
    WORK["hash"] += 1
    WORK["hashed_bytes"] += len(data)
    return hashlib.sha256(data).digest()


# -- Merkle tree --------------------------------------------------------------


class Side(IntEnum):
    """Which side of the running hash the sibling sits on."""

    LEFT = 0
    RIGHT = 1


@dataclass(frozen=True)
class MembershipProof:
    leaf_index: int
    path: tuple[tuple[bytes, Side], ...] = ()


@dataclass(frozen=True)
class MerkleTree:
    leaves: tuple[bytes, ...]
    levels: tuple[tuple[bytes, ...], ...]

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    def __len__(self) -> int:
        return len(self.leaves)


def merkle_build(public_keys: Sequence[bytes]) -> MerkleTree:
    """Tree over ``digest(pk)`` for each key, in the order given.

    Callers that need roots comparable across nodes sort the keys first
    (see ``canonical_key_order``).
    """
    if not public_keys:
        raise ValueError("cannot build a Merkle tree over an empty key set")
    return merkle_from_leaves([digest(pk) for pk in public_keys])


def merkle_from_leaves(leaves: Sequence[bytes]) -> MerkleTree:
    if not leaves:
        raise ValueError("cannot build a Merkle tree with no leaves")
    level = tuple(leaves)
    levels = [level]
    while len(level) > 1:
        if len(level) % 2:
            # odd width: the last node is paired with itself
            level = level + (level[-1],)
        level = tuple(
            digest(level[i] + level[i + 1]) for i in range(0, len(level), 2)
        )
        levels.append(level)
    return MerkleTree(leaves=tuple(leaves), levels=tuple(levels))


def canonical_key_order(public_keys: Sequence[bytes]) -> list[bytes]:
    return sorted(public_keys)


def merkle_prove(tree: MerkleTree, leaf_index: int) -> MembershipProof:
    if not 0 <= leaf_index < len(tree.leaves):
        raise IndexError(f"leaf index {leaf_index} out of range for {len(tree)} leaves")
    path = []
    index = leaf_index
    for level in tree.levels[:-1]:
        if index % 2:
            path.append((level[index - 1], Side.LEFT))
        else:
            sibling = level[index + 1] if index + 1 < len(level) else level[index]
            path.append((sibling, Side.RIGHT))
        index //= 2
    return MembershipProof(leaf_index=leaf_index, path=tuple(path))


def merkle_fold(leaf: bytes, proof: MembershipProof) -> bytes:
    node = leaf
    for sibling, side in proof.path:
        node = digest(sibling + node) if side == Side.LEFT else digest(node + sibling)
    return node


def merkle_verify(root: bytes, leaf: bytes, proof: MembershipProof) -> bool:
    return merkle_fold(leaf, proof) == root
