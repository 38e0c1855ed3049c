"""Message vocabulary and its canonical wire encoding.

Every message is ``tag:u8`` followed by the variant body. The same bytes
are used for storage, hashing, signing and the simulated wire. Decoding
rejects unknown tags, truncation and trailing bytes. The per-variant byte
layout is documented in ``docs/protocol.md``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Union

from . import crypto
from .codec import DecodeError, Reader, Writer
from .crypto import DIGEST_SIZE, PUBLIC_KEY_SIZE, SIGNATURE_SIZE, MembershipProof, Side
from .ledger import BlockHeader, DeviceBlock, Geotag, Reason, Transaction, header_hash

__all__ = [
    "Ack",
    "BlockBroadcast",
    "DecodeError",
    "HeaderOffer",
    "JoinRequest",
    "KuiRoot",
    "Message",
    "Reject",
    "RsiCredential",
    "Tag",
    "TxBroadcast",
    "TxForward",
    "TxSubmit",
    "WitnessQuery",
    "WitnessReport",
    "decode",
    "encode",
]


class Tag(IntEnum):
    JOIN_REQUEST = 1
    RSI_CREDENTIAL = 2
    WITNESS_QUERY = 3
    WITNESS_REPORT = 4
    HEADER_OFFER = 5
    BLOCK_BROADCAST = 6
    TX_SUBMIT = 7
    TX_BROADCAST = 8
    TX_FORWARD = 9
    KUI_ROOT = 10
    ACK = 11
    REJECT = 12


@dataclass(frozen=True)
class JoinRequest:
    """Genesis transaction; unbound on first contact, bound in reply to an offer."""

    genesis: Transaction


@dataclass(frozen=True)
class RsiCredential:
    rsi_pk: bytes
    authority_signature: bytes

    @staticmethod
    def signing_bytes(rsi_pk: bytes) -> bytes:
        return b"speedychain/rsi-credential" + rsi_pk


@dataclass(frozen=True)
class WitnessQuery:
    pk: bytes
    geotag: Geotag


@dataclass(frozen=True)
class WitnessReport:
    pk: bytes
    observed: bool
    witness_pk: bytes
    witness_signature: bytes

    @staticmethod
    def signing_bytes(pk: bytes, observed: bool) -> bytes:
        return b"speedychain/witness" + pk + bytes([observed])

    def signature_ok(self) -> bool:
        return crypto.verify(
            self.witness_pk, self.signing_bytes(self.pk, self.observed), self.witness_signature
        )


@dataclass(frozen=True)
class HeaderOffer:
    """Header allocated for a joining device, signed by the allocating RSI."""

    header: BlockHeader
    rsi_pk: bytes
    rsi_signature: bytes

    @property
    def header_hash(self) -> bytes:
        return header_hash(self.header)

    @staticmethod
    def signing_bytes(h: bytes) -> bytes:
        return b"speedychain/header-offer" + h

    def signature_ok(self) -> bool:
        return crypto.verify(self.rsi_pk, self.signing_bytes(self.header_hash), self.rsi_signature)


@dataclass(frozen=True)
class BlockBroadcast:
    block: DeviceBlock


@dataclass(frozen=True)
class TxSubmit:
    pk: bytes
    tx: Transaction


@dataclass(frozen=True)
class TxBroadcast:
    pk: bytes
    tx: Transaction


@dataclass(frozen=True)
class TxForward:
    pk: bytes
    tx: Transaction


@dataclass(frozen=True)
class KuiRoot:
    root: bytes
    epoch: int
    proof: MembershipProof | None = None


@dataclass(frozen=True)
class Ack:
    ref: bytes


@dataclass(frozen=True)
class Reject:
    reason: Reason
    ref: bytes


Message = Union[
    JoinRequest,
    RsiCredential,
    WitnessQuery,
    WitnessReport,
    HeaderOffer,
    BlockBroadcast,
    TxSubmit,
    TxBroadcast,
    TxForward,
    KuiRoot,
    Ack,
    Reject,
]

_TAGS: dict[type, Tag] = {
    JoinRequest: Tag.JOIN_REQUEST,
    RsiCredential: Tag.RSI_CREDENTIAL,
    WitnessQuery: Tag.WITNESS_QUERY,
    WitnessReport: Tag.WITNESS_REPORT,
    HeaderOffer: Tag.HEADER_OFFER,
    BlockBroadcast: Tag.BLOCK_BROADCAST,
    TxSubmit: Tag.TX_SUBMIT,
    TxBroadcast: Tag.TX_BROADCAST,
    TxForward: Tag.TX_FORWARD,
    KuiRoot: Tag.KUI_ROOT,
    Ack: Tag.ACK,
    Reject: Tag.REJECT,
}


def tag_of(m: Message) -> Tag:
    return _TAGS[type(m)]


def _write_proof(w: Writer, proof: MembershipProof | None) -> None:
    if proof is None:
        w.u8(0)
        return
    w.u8(1).u32(proof.leaf_index).u16(len(proof.path))
    for sibling, side in proof.path:
        w.fixed(sibling, DIGEST_SIZE).u8(side)


def _read_proof(r: Reader) -> MembershipProof | None:
    flag = r.u8()
    if flag == 0:
        return None
    if flag != 1:
        raise DecodeError(f"bad proof flag {flag}")
    leaf_index = r.u32()
    path = []
    for _ in range(r.u16()):
        sibling = r.fixed(DIGEST_SIZE)
        side = r.u8()
        if side not in (Side.LEFT, Side.RIGHT):
            raise DecodeError(f"bad proof side {side}")
        path.append((sibling, Side(side)))
    return MembershipProof(leaf_index, tuple(path))


def _read_bool(r: Reader) -> bool:
    value = r.u8()
    if value > 1:
        raise DecodeError(f"bad boolean {value}")
    return bool(value)


def encode(m: Message) -> bytes:
    w = Writer().u8(tag_of(m))
    if isinstance(m, JoinRequest):
        m.genesis.write(w)
    elif isinstance(m, RsiCredential):
        w.fixed(m.rsi_pk, PUBLIC_KEY_SIZE).fixed(m.authority_signature, SIGNATURE_SIZE)
    elif isinstance(m, WitnessQuery):
        w.fixed(m.pk, PUBLIC_KEY_SIZE).f64(m.geotag.latitude).f64(m.geotag.longitude)
    elif isinstance(m, WitnessReport):
        w.fixed(m.pk, PUBLIC_KEY_SIZE).u8(int(m.observed))
        w.fixed(m.witness_pk, PUBLIC_KEY_SIZE).fixed(m.witness_signature, SIGNATURE_SIZE)
    elif isinstance(m, HeaderOffer):
        m.header.write(w)
        w.fixed(m.rsi_pk, PUBLIC_KEY_SIZE).fixed(m.rsi_signature, SIGNATURE_SIZE)
    elif isinstance(m, BlockBroadcast):
        m.block.write(w)
    elif isinstance(m, (TxSubmit, TxBroadcast, TxForward)):
        w.fixed(m.pk, PUBLIC_KEY_SIZE)
        m.tx.write(w)
    elif isinstance(m, KuiRoot):
        w.fixed(m.root, DIGEST_SIZE).u64(m.epoch)
        _write_proof(w, m.proof)
    elif isinstance(m, Ack):
        w.fixed(m.ref, DIGEST_SIZE)
    elif isinstance(m, Reject):
        w.u8(m.reason).fixed(m.ref, DIGEST_SIZE)
    else:  # pragma: no cover - Message is closed
        raise TypeError(f"not a message: {type(m).__name__}")
    return w.getvalue()


def decode(data: bytes) -> Message:
    r = Reader(data)
    raw_tag = r.u8()
    try:
        tag = Tag(raw_tag)
    except ValueError:
        raise DecodeError(f"unknown message tag {raw_tag}") from None

    m: Message
    if tag is Tag.JOIN_REQUEST:
        m = JoinRequest(Transaction.read(r))
    elif tag is Tag.RSI_CREDENTIAL:
        m = RsiCredential(r.fixed(PUBLIC_KEY_SIZE), r.fixed(SIGNATURE_SIZE))
    elif tag is Tag.WITNESS_QUERY:
        m = WitnessQuery(r.fixed(PUBLIC_KEY_SIZE), Geotag(r.f64(), r.f64()))
    elif tag is Tag.WITNESS_REPORT:
        m = WitnessReport(
            r.fixed(PUBLIC_KEY_SIZE), _read_bool(r), r.fixed(PUBLIC_KEY_SIZE), r.fixed(SIGNATURE_SIZE)
        )
    elif tag is Tag.HEADER_OFFER:
        m = HeaderOffer(BlockHeader.read(r), r.fixed(PUBLIC_KEY_SIZE), r.fixed(SIGNATURE_SIZE))
    elif tag is Tag.BLOCK_BROADCAST:
        m = BlockBroadcast(DeviceBlock.read(r))
    elif tag in (Tag.TX_SUBMIT, Tag.TX_BROADCAST, Tag.TX_FORWARD):
        cls = {Tag.TX_SUBMIT: TxSubmit, Tag.TX_BROADCAST: TxBroadcast, Tag.TX_FORWARD: TxForward}[tag]
        m = cls(r.fixed(PUBLIC_KEY_SIZE), Transaction.read(r))
    elif tag is Tag.KUI_ROOT:
        m = KuiRoot(r.fixed(DIGEST_SIZE), r.u64(), _read_proof(r))
    elif tag is Tag.ACK:
        m = Ack(r.fixed(DIGEST_SIZE))
    else:
        raw_reason = r.u8()
        try:
            reason = Reason(raw_reason)
        except ValueError:
            raise DecodeError(f"unknown reject reason {raw_reason}") from None
        m = Reject(reason, r.fixed(DIGEST_SIZE))
    r.finish()
    return m
