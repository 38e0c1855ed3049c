"""Header-linked device blocks with appendable, hash-chained ledgers.

A block is one immutable header (hashed into the next header) plus a
ledger that keeps growing until the header's expiration. Appending to a
ledger never touches the header, so ``header_hash`` is stable for the life
of the block.

Byte layouts (all integers big-endian)::

    header  = device_pk[32] prev_header_hash[32] expiration:u64
              created_at:u64 access_level:u8
    tx body = prev_tx_hash[32] payload:var latitude:f64 longitude:f64
              access_level:u8 timestamp:u64
    tx      = tx body || signature[64]
    block   = header count:u32 tx*
    genesis payload = device_pk[32] latitude:f64 longitude:f64
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import IO, Iterator

from . import crypto
from .codec import DecodeError, Reader, Writer
from .crypto import (
    DIGEST_SIZE,
    PUBLIC_KEY_SIZE,
    SIGNATURE_SIZE,
    ZERO_DIGEST,
    KeyPair,
)

# The authority block never expires.
NEVER = 2**63 - 1


class AccessLevel(IntEnum):
    PUBLIC = 0
    OWNER = 1
    SERVICE_PROVIDER = 2


class Reason(IntEnum):
    BAD_SIGNATURE = 1
    BROKEN_CHAIN_LINK = 2
    BLOCK_EXPIRED = 3
    UNKNOWN_DEVICE = 4
    DUPLICATE_KEY = 5
    MALFORMED = 6


class Rejected(Exception):
    reason: Reason = Reason.MALFORMED


class BadSignature(Rejected):
    reason = Reason.BAD_SIGNATURE


class BrokenChainLink(Rejected):
    reason = Reason.BROKEN_CHAIN_LINK


class BlockExpired(Rejected):
    reason = Reason.BLOCK_EXPIRED


class UnknownDevice(Rejected):
    reason = Reason.UNKNOWN_DEVICE


class DuplicateKey(Rejected):
    reason = Reason.DUPLICATE_KEY


REJECTIONS = {cls.reason: cls for cls in (BadSignature, BrokenChainLink, BlockExpired, UnknownDevice, DuplicateKey)}


@dataclass(frozen=True)
class Geotag:
    latitude: float
    longitude: float


@dataclass(frozen=True)
class BlockHeader:
    device_pk: bytes
    prev_header_hash: bytes
    expiration: int
    created_at: int
    access_level: int = AccessLevel.PUBLIC

    def write(self, w: Writer) -> Writer:
        return (
            w.fixed(self.device_pk, PUBLIC_KEY_SIZE)
            .fixed(self.prev_header_hash, DIGEST_SIZE)
            .u64(self.expiration)
            .u64(self.created_at)
            .u8(self.access_level)
        )

    def encode(self) -> bytes:
        return self.write(Writer()).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "BlockHeader":
        return cls(
            device_pk=r.fixed(PUBLIC_KEY_SIZE),
            prev_header_hash=r.fixed(DIGEST_SIZE),
            expiration=r.u64(),
            created_at=r.u64(),
            access_level=_access_level(r.u8()),
        )


@dataclass(frozen=True)
class Transaction:
    prev_tx_hash: bytes
    payload: bytes
    geotag: Geotag
    access_level: int
    timestamp: int
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return (
            Writer()
            .fixed(self.prev_tx_hash, DIGEST_SIZE)
            .var(self.payload)
            .f64(self.geotag.latitude)
            .f64(self.geotag.longitude)
            .u8(self.access_level)
            .u64(self.timestamp)
            .getvalue()
        )

    def write(self, w: Writer) -> Writer:
        return w.raw(self.signing_bytes()).fixed(self.signature, SIGNATURE_SIZE)

    def encode(self) -> bytes:
        return self.write(Writer()).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "Transaction":
        return cls(
            prev_tx_hash=r.fixed(DIGEST_SIZE),
            payload=r.var(),
            geotag=Geotag(r.f64(), r.f64()),
            access_level=_access_level(r.u8()),
            timestamp=r.u64(),
            signature=r.fixed(SIGNATURE_SIZE),
        )


@dataclass(eq=True)
class DeviceBlock:
    header: BlockHeader
    ledger: list[Transaction] = field(default_factory=list)

    @property
    def device_pk(self) -> bytes:
        return self.header.device_pk

    @property
    def tail_hash(self) -> bytes:
        return tx_digest(self.ledger[-1]) if self.ledger else header_hash(self.header)

    @property
    def is_bound(self) -> bool:
        return bool(self.ledger) and self.ledger[0].prev_tx_hash == header_hash(self.header)

    def __len__(self) -> int:
        return len(self.ledger)

    def write(self, w: Writer) -> Writer:
        self.header.write(w).u32(len(self.ledger))
        for tx in self.ledger:
            tx.write(w)
        return w

    def encode(self) -> bytes:
        return self.write(Writer()).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "DeviceBlock":
        header = BlockHeader.read(r)
        count = r.u32()
        if count > r.remaining:
            raise DecodeError("ledger count exceeds input")
        return cls(header, [Transaction.read(r) for _ in range(count)])

    @classmethod
    def decode(cls, data: bytes) -> "DeviceBlock":
        r = Reader(data)
        block = cls.read(r)
        r.finish()
        return block

    def snapshot(self) -> "DeviceBlock":
        return DeviceBlock(self.header, list(self.ledger))


def _access_level(value: int) -> int:
    try:
        return AccessLevel(value)
    except ValueError:
        raise DecodeError(f"unknown access level {value}") from None


def header_hash(h: BlockHeader) -> bytes:
    return crypto.digest(h.encode())


def tx_digest(tx: Transaction) -> bytes:
    return crypto.digest(tx.encode())


# -- transactions ---------------------------------------------------------------


def make_transaction(
    kp: KeyPair,
    prev_tx_hash: bytes,
    payload: bytes,
    geotag: Geotag,
    now: int,
    access_level: int = AccessLevel.PUBLIC,
) -> Transaction:
    unsigned = Transaction(prev_tx_hash, bytes(payload), geotag, AccessLevel(access_level), now)
    return replace(unsigned, signature=crypto.sign(kp.private, unsigned.signing_bytes()))


def genesis_payload(device_pk: bytes, geotag: Geotag) -> bytes:
    return (
        Writer()
        .fixed(device_pk, PUBLIC_KEY_SIZE)
        .f64(geotag.latitude)
        .f64(geotag.longitude)
        .getvalue()
    )


def parse_genesis_payload(payload: bytes) -> tuple[bytes, Geotag]:
    r = Reader(payload)
    pk = r.fixed(PUBLIC_KEY_SIZE)
    geotag = Geotag(r.f64(), r.f64())
    r.finish()
    return pk, geotag


def make_genesis_tx(kp: KeyPair, geotag: Geotag, now: int) -> Transaction:
    """Unbound genesis: ``prev_tx_hash`` is zero until a header exists."""
    return make_transaction(kp, ZERO_DIGEST, genesis_payload(kp.public, geotag), geotag, now)


def bind_genesis(kp: KeyPair, genesis: Transaction, bound_header_hash: bytes) -> Transaction:
    unsigned = replace(genesis, prev_tx_hash=bound_header_hash, signature=b"")
    return replace(unsigned, signature=crypto.sign(kp.private, unsigned.signing_bytes()))


def genesis_public_key(tx: Transaction) -> bytes | None:
    try:
        return parse_genesis_payload(tx.payload)[0]
    except DecodeError:
        return None


def signature_ok(pk: bytes, tx: Transaction) -> bool:
    return crypto.verify(pk, tx.signing_bytes(), tx.signature)


def genesis_signature_ok(tx: Transaction) -> bool:
    pk = genesis_public_key(tx)
    return pk is not None and signature_ok(pk, tx)


# -- blocks ---------------------------------------------------------------------


def allocate_header(
    prev: BlockHeader,
    device_pk: bytes,
    expiration_window: int,
    now: int,
    access_level: int = AccessLevel.PUBLIC,
) -> BlockHeader:
    if expiration_window <= 0:
        raise ValueError("expiration window must be positive")
    return BlockHeader(
        device_pk=device_pk,
        prev_header_hash=header_hash(prev),
        expiration=now + expiration_window,
        created_at=now,
        access_level=AccessLevel(access_level),
    )


def create_block(
    prev: BlockHeader,
    genesis: Transaction,
    expiration_window: int,
    now: int,
    access_level: int = AccessLevel.PUBLIC,
) -> DeviceBlock:
    """New block for the device named in ``genesis``.

    ``genesis`` may be unbound (zero link) or already bound to the header
    this call produces. An unbound block is not valid until the device
    re-signs its genesis against ``header_hash(block.header)``.
    """
    if not genesis_signature_ok(genesis):
        raise BadSignature("genesis signature does not verify")
    header = allocate_header(prev, genesis_public_key(genesis), expiration_window, now, access_level)
    if genesis.prev_tx_hash not in (ZERO_DIGEST, header_hash(header)):
        raise BrokenChainLink("genesis is bound to a different header")
    return DeviceBlock(header, [genesis])


def finalize_block(header: BlockHeader, bound_genesis: Transaction) -> DeviceBlock:
    if genesis_public_key(bound_genesis) != header.device_pk:
        raise BadSignature("genesis names a different key")
    if not signature_ok(header.device_pk, bound_genesis):
        raise BadSignature("bound genesis signature does not verify")
    if bound_genesis.prev_tx_hash != header_hash(header):
        raise BrokenChainLink("genesis not bound to this header")
    return DeviceBlock(header, [bound_genesis])


def build_block(
    prev: BlockHeader,
    kp: KeyPair,
    geotag: Geotag,
    expiration_window: int,
    now: int,
    access_level: int = AccessLevel.PUBLIC,
) -> DeviceBlock:
    """Both binding phases in one place, for callers holding the device key."""
    unbound = create_block(prev, make_genesis_tx(kp, geotag, now), expiration_window, now, access_level)
    bound = bind_genesis(kp, unbound.ledger[0], header_hash(unbound.header))
    return finalize_block(unbound.header, bound)


def check_transaction(block: DeviceBlock, tx: Transaction, now: int | None = None) -> None:
    """Raise the first failed append check; ``now=None`` skips the clock test."""
    if not signature_ok(block.header.device_pk, tx):
        raise BadSignature("signature does not verify under the block key")
    if tx.prev_tx_hash != block.tail_hash:
        raise BrokenChainLink("prev_tx_hash does not match the ledger tail")
    expiration = block.header.expiration
    if (now is not None and now > expiration) or tx.timestamp > expiration:
        raise BlockExpired(f"block expired at {expiration}")


def append_transaction(block: DeviceBlock, tx: Transaction, now: int) -> DeviceBlock:
    check_transaction(block, tx, now)
    block.ledger.append(tx)
    return block


def verify_ledger_links(block: DeviceBlock) -> bool:
    """Recompute every hash link from the header to the tail."""
    expected = header_hash(block.header)
    for tx in block.ledger:
        if tx.prev_tx_hash != expected:
            return False
        expected = tx_digest(tx)
    return True


def validate_block(block: DeviceBlock) -> bool:
    header = block.header
    if header.expiration <= header.created_at or not block.ledger:
        return False
    if genesis_public_key(block.ledger[0]) != header.device_pk:
        return False
    expected = header_hash(header)
    for tx in block.ledger:
        if tx.prev_tx_hash != expected or tx.timestamp > header.expiration:
            return False
        if not signature_ok(header.device_pk, tx):
            return False
        expected = tx_digest(tx)
    return True


def make_authority_block(kp: KeyPair, geotag: Geotag, now: int = 0) -> DeviceBlock:
    """Root block of a city's chain; its key signs RSI credentials."""
    header = BlockHeader(kp.public, ZERO_DIGEST, NEVER, now, AccessLevel.PUBLIC)
    genesis = bind_genesis(kp, make_genesis_tx(kp, geotag, now), header_hash(header))
    return DeviceBlock(header, [genesis])


# -- chain ----------------------------------------------------------------------


class Blockchain:
    """Header-linked sequence of device blocks, indexed by device key."""

    def __init__(self, authority_block: DeviceBlock) -> None:
        self.blocks: list[DeviceBlock] = [authority_block]
        self.index: dict[bytes, int] = {authority_block.device_pk: 0}
        self._tip_hash = header_hash(authority_block.header)

    @classmethod
    def from_blocks(cls, blocks: list[DeviceBlock]) -> "Blockchain":
        """Rebuild without validation; pair with ``validate_chain``."""
        chain = cls(blocks[0])
        chain.blocks = list(blocks)
        chain.index = {}
        for i, block in enumerate(blocks):
            chain.index.setdefault(block.device_pk, i)
        chain._tip_hash = header_hash(blocks[-1].header)
        return chain

    @property
    def authority(self) -> DeviceBlock:
        return self.blocks[0]

    @property
    def tip(self) -> BlockHeader:
        return self.blocks[-1].header

    @property
    def tip_hash(self) -> bytes:
        return self._tip_hash

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self) -> Iterator[DeviceBlock]:
        return iter(self.blocks)

    def __contains__(self, pk: bytes) -> bool:
        return pk in self.index

    def add_block(self, block: DeviceBlock) -> None:
        if block.header.prev_header_hash != self._tip_hash:
            raise BrokenChainLink("block does not extend the chain tip")
        if block.device_pk in self.index:
            raise DuplicateKey("device key already has a block")
        if not validate_block(block):
            raise BadSignature("block failed validation")
        self.index[block.device_pk] = len(self.blocks)
        self.blocks.append(block)
        self._tip_hash = header_hash(block.header)

    def find_block(self, pk: bytes, now: int | None = None) -> DeviceBlock | None:
        position = self.index.get(pk)
        if position is None:
            return None
        block = self.blocks[position]
        if now is not None and now > block.header.expiration:
            return None
        return block

    def position(self, pk: bytes) -> int | None:
        return self.index.get(pk)

    def header_hashes(self) -> set[bytes]:
        return {header_hash(b.header) for b in self.blocks}

    def verify_anchor(self, position: int) -> bool:
        """Recompute header links from ``position`` up to the tip."""
        expected = header_hash(self.blocks[position].header)
        for block in self.blocks[position + 1:]:
            if block.header.prev_header_hash != expected:
                return False
            expected = header_hash(block.header)
        return expected == self._tip_hash

    def active_keys(self, now: int) -> list[bytes]:
        """Device keys of non-expired blocks, excluding the authority."""
        return [b.device_pk for b in self.blocks[1:] if b.header.expiration >= now]

    def encode(self) -> bytes:
        w = Writer().u32(len(self.blocks))
        for block in self.blocks:
            block.write(w)
        return w.getvalue()

    def digest(self) -> bytes:
        return crypto.digest(self.encode())


def validate_chain(chain: Blockchain) -> bool:
    blocks = chain.blocks
    if not blocks or blocks[0].header.prev_header_hash != ZERO_DIGEST:
        return False
    seen: dict[bytes, int] = {}
    prev_hash = None
    for i, block in enumerate(blocks):
        if prev_hash is not None and block.header.prev_header_hash != prev_hash:
            return False
        if block.device_pk in seen or not validate_block(block):
            return False
        seen[block.device_pk] = i
        prev_hash = header_hash(block.header)
    return seen == chain.index


def find_block(chain: Blockchain, pk: bytes, now: int | None = None) -> DeviceBlock | None:
    return chain.find_block(pk, now)


def dump_chain(chain: Blockchain, fp: IO[str]) -> None:
    """One hex-encoded canonical block per line."""
    for block in chain.blocks:
        fp.write(block.encode().hex())
        fp.write("\n")


def load_chain(fp: IO[str]) -> Blockchain:
    blocks = [DeviceBlock.decode(bytes.fromhex(line)) for line in fp if line.strip()]
    if not blocks:
        raise DecodeError("empty chain file")
    return Blockchain.from_blocks(blocks)
