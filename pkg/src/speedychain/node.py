"""RSI and vehicle state machines.

Each node reacts to ``on_message(src, msg, now)`` and ``on_wake(what, data,
now)`` and returns ``Send``/``Wake`` outputs; nothing else leaves a node.
The node reads the outside world (positions, ground-truth beacons) through
a ``World`` object, which the simulator implements.

Block creation is serialised across RSIs with round-robin time slots: only
the slot owner may allocate a header, and it must finish binding before the
slot ends. Every header therefore extends the tip all RSIs agree on.
"""

from __future__ import annotations

import dataclasses
import math
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Protocol

from . import crypto
from .crypto import KeyPair, MembershipProof
from .ledger import (
    AccessLevel,
    BlockHeader,
    Blockchain,
    BrokenChainLink,
    DeviceBlock,
    Geotag,
    Reason,
    Rejected,
    Transaction,
    UnknownDevice,
    allocate_header,
    bind_genesis,
    check_transaction,
    finalize_block,
    genesis_public_key,
    genesis_signature_ok,
    header_hash,
    make_genesis_tx,
    make_transaction,
    parse_genesis_payload,
    tx_digest,
)
from .metrics import MetricsSink, WallStopwatch
from .protocol import (
    Ack,
    BlockBroadcast,
    HeaderOffer,
    JoinRequest,
    KuiRoot,
    Reject,
    RsiCredential,
    TxBroadcast,
    TxForward,
    TxSubmit,
    WitnessQuery,
    WitnessReport,
)
from .simnet import Send, Wake, broadcast


class World(Protocol):
    def nearest_rsi(self, node_id: str, now: float) -> str | None: ...
    def nearest_vehicle(self, node_id: str, now: float) -> str | None: ...
    def nodes_within(self, geotag: Geotag, radius: float, now: float) -> list[str]: ...
    def vehicles_in_range(self, rsi: str, now: float) -> list[str]: ...
    def geotag_of(self, node_id: str) -> Geotag: ...
    def set_beacon(self, node_id: str, pk: bytes | None) -> None: ...
    def beacon_pk(self, node_id: str) -> bytes | None: ...
    def observes(self, witness: str, pk: bytes, geotag: Geotag, now: float) -> bool: ...


@dataclass(frozen=True)
class WitnessPolicy:
    required_reports: int = 1
    query_radius: float = 250.0
    pool_timeout: float = 5_000.0

    def __post_init__(self) -> None:
        if self.required_reports < 1:
            raise ValueError("required_reports must be at least 1")
        if self.query_radius < 0 or self.pool_timeout <= 0:
            raise ValueError("query_radius must be non-negative and pool_timeout positive")


@dataclass(frozen=True)
class NodeConfig:
    expiration_window: int = 60_000
    kui_period: float = 30_000.0  # 0 disables periodic KUI ticks
    slot_ms: float = 50.0
    slot_guard_ms: float = 5.0
    offer_budget_ms: float = 15.0
    reorder_limit: int = 64
    audit_depth: int = 64
    join_retry_ms: float = 20_000.0
    join_retries: int = 3
    offer_attempts: int = 3

    def __post_init__(self) -> None:
        if self.expiration_window <= 0:
            raise ValueError("expiration_window must be positive")
        if self.slot_guard_ms + self.offer_budget_ms > self.slot_ms:
            raise ValueError("slot_ms must fit the guard and one offer round trip")


def credential_for(authority: KeyPair, rsi_pk: bytes) -> RsiCredential:
    return RsiCredential(rsi_pk, crypto.sign(authority.private, RsiCredential.signing_bytes(rsi_pk)))


def _flip_first_byte(tx: Transaction) -> Transaction:
    payload = bytearray(tx.payload or b"\x00")
    payload[0] ^= 0x01
    return dataclasses.replace(tx, payload=bytes(payload))


# -- RSI --------------------------------------------------------------------------


@dataclass
class PoolEntry:
    pk: bytes
    genesis: Transaction
    requester: str
    received_at: float
    reports: dict[bytes, bool] = field(default_factory=dict)
    cost_us: float = 0.0
    attempts: int = 0


@dataclass
class Allocation:
    entry: PoolEntry
    header: BlockHeader
    header_hash: bytes
    deadline: float


class RsiNode:
    """Validates joins and transactions, keeps a replica, gossips to peers.

    ``behaviour="mutate"`` turns the node into the malicious RSI of the
    attack suite: it alters the payload of every transaction it forwards.
    """

    def __init__(
        self,
        node_id: str,
        index: int,
        keypair: KeyPair,
        credential: RsiCredential,
        chain: Blockchain,
        peers: list[str],
        rsi_count: int,
        world: World,
        policy: WitnessPolicy | None = None,
        config: NodeConfig | None = None,
        metrics: MetricsSink | None = None,
        stopwatch=None,
        relay: bool = False,
        behaviour: str = "honest",
    ) -> None:
        if behaviour not in ("honest", "mutate"):
            raise ValueError(f"unknown RSI behaviour {behaviour!r}")
        self.id = node_id
        self.index = index
        self.keypair = keypair
        self.credential = credential
        self.chain = chain
        self.peers = list(peers)
        self.rsi_count = rsi_count
        self.world = world
        self.policy = policy or WitnessPolicy()
        self.config = config or NodeConfig()
        self.metrics = metrics if metrics is not None else MetricsSink()
        self.clock = stopwatch or WallStopwatch()
        self.relay = relay
        self.behaviour = behaviour
        self.authority_pk = chain.authority.device_pk
        # Keys of credentialed RSIs; their witness reports are accepted too.
        self.rsi_keys: set[bytes] = {keypair.public}
        self.pending_pool: dict[bytes, PoolEntry] = {}
        self.ready: deque[PoolEntry] = deque()
        self.in_flight: Allocation | None = None
        self.slot_wake: float | None = None
        self.tx_seen: set[bytes] = set()
        self.known_headers: set[bytes] = {chain.tip_hash}
        self.tx_holds: dict[bytes, dict[bytes, tuple[Transaction, str, bool]]] = {}
        self.block_holds: dict[bytes, DeviceBlock] = {}
        self.kui_epoch = 0
        self.kui_next: float | None = None
        self.last_kui: KuiRoot | None = None
        self.introduced: set[str] = set()
        self.counters: Counter = Counter()
        for block in chain:
            self._remember(block)

    @property
    def public(self) -> bytes:
        return self.keypair.public

    def _remember(self, block: DeviceBlock) -> None:
        self.known_headers.add(header_hash(block.header))
        for tx in block.ledger:
            self.tx_seen.add(tx_digest(tx))

    # -- dispatch -------------------------------------------------------------------

    def on_message(self, src: str, msg, now: float) -> list:
        if isinstance(msg, JoinRequest):
            if msg.genesis.prev_tx_hash == crypto.ZERO_DIGEST:
                return self.handle_join(msg, src, now)
            return self.handle_binding(msg, src, now)
        if isinstance(msg, WitnessReport):
            return self.handle_witness_report(msg, now)
        if isinstance(msg, WitnessQuery):
            return self.answer_witness(msg, src, now)
        if isinstance(msg, TxSubmit):
            return self.handle_tx(msg, src, now)
        if isinstance(msg, (BlockBroadcast, TxBroadcast)):
            return self.handle_peer_update(msg, src, now)
        self.counters["rsi_ignored_message"] += 1
        return []

    def on_wake(self, what: str, data, now: float) -> list:
        if what == "slot":
            if self.slot_wake is not None and self.slot_wake <= now:
                self.slot_wake = None
            return self._try_allocate(now)
        if what == "offer_deadline":
            return self._offer_deadline(data, now)
        if what == "pool_timeout":
            return self._pool_timeout(data, now)
        if what == "kui":
            self.kui_next = None
            return self.kui_tick(now)
        raise ValueError(f"unknown wake {what!r}")

    def on_contact(self, vehicle: str, now: float) -> list:
        """Introduce this RSI to a vehicle it has not talked to yet."""
        if vehicle in self.introduced:
            return []
        self.introduced.add(vehicle)
        return [Send.of(vehicle, self.credential)]

    def _reject(self, dst: str, reason: Reason, ref: bytes) -> list:
        self.counters[f"reject_{reason.name.lower()}"] += 1
        return [Send.of(dst, Reject(reason, ref))]

    # -- join --------------------------------------------------------------------

    def handle_join(self, req: JoinRequest, src: str, now: float) -> list:
        """Park an unbound genesis in the pool and ask nearby nodes to vouch for it."""
        mark = self.clock.mark()
        genesis = req.genesis
        ref = tx_digest(genesis)
        if not genesis_signature_ok(genesis):
            return self._reject(src, Reason.BAD_SIGNATURE, ref)
        pk, geotag = parse_genesis_payload(genesis.payload)
        if pk in self.chain:
            return self._reject(src, Reason.DUPLICATE_KEY, ref)
        if pk in self.pending_pool or self._queued(pk):
            self.counters["join_duplicate"] += 1
            return []
        entry = PoolEntry(pk, genesis, src, now)
        self.pending_pool[pk] = entry
        targets = [n for n in self.world.nodes_within(geotag, self.policy.query_radius, now) if n not in (self.id, src)]
        out: list = broadcast(targets, WitnessQuery(pk, geotag))
        entry.cost_us += self.clock.since(mark)
        self.counters["witness_queries"] += len(targets)
        out.append(Wake(now + self.policy.pool_timeout, "pool_timeout", pk))
        return out

    def _queued(self, pk: bytes) -> bool:
        if self.in_flight is not None and self.in_flight.entry.pk == pk:
            return True
        return any(e.pk == pk for e in self.ready)

    def answer_witness(self, q: WitnessQuery, src: str, now: float) -> list:
        observed = self.world.observes(self.id, q.pk, q.geotag, now)
        sig = crypto.sign(self.keypair.private, WitnessReport.signing_bytes(q.pk, observed))
        return [Send.of(src, WitnessReport(q.pk, observed, self.public, sig))]

    def _witness_known(self, witness_pk: bytes, now: float) -> bool:
        if witness_pk in self.chain.index:
            return self.chain.find_block(witness_pk, int(now)) is not None
        return witness_pk in self.rsi_keys

    def handle_witness_report(self, report: WitnessReport, now: float) -> list:
        entry = self.pending_pool.get(report.pk)
        if entry is None:
            self.counters["witness_unknown_pk"] += 1
            return []
        mark = self.clock.mark()
        if not self._witness_known(report.witness_pk, now):
            self.counters["witness_unknown_key"] += 1
            return []
        if not report.signature_ok():
            self.counters["witness_bad_signature"] += 1
            return []
        entry.reports[report.witness_pk] = report.observed
        entry.cost_us += self.clock.since(mark)
        if sum(entry.reports.values()) < self.policy.required_reports:
            return []
        del self.pending_pool[report.pk]
        self.ready.append(entry)
        self.counters["joins_confirmed"] += 1
        return self._try_allocate(now)

    def _pool_timeout(self, pk: bytes, now: float) -> list:
        entry = self.pending_pool.get(pk)
        if entry is not None and entry.received_at + self.policy.pool_timeout <= now:
            del self.pending_pool[pk]
            self.counters["pool_expired"] += 1
        return []

    # -- slots and header allocation ---------------------------------------------

    def slot_owner(self, t: float) -> int:
        return int(t // self.config.slot_ms) % self.rsi_count

    def _next_slot_start(self, t: float) -> float:
        slot = self.config.slot_ms
        k = int(t // slot)
        ahead = (self.index - k) % self.rsi_count
        return (k + ahead) * slot

    def _try_allocate(self, now: float) -> list:
        if self.in_flight is not None or not self.ready:
            return []
        cfg = self.config
        start = self._next_slot_start(now)
        if start <= now:
            earliest, end = start + cfg.slot_guard_ms, start + cfg.slot_ms
            if earliest <= now and now + cfg.offer_budget_ms <= end:
                return self._allocate(now, end)
            if now < earliest:
                return self._wake_slot(earliest)
            start = self._next_slot_start(end)
        return self._wake_slot(start + cfg.slot_guard_ms)

    def _wake_slot(self, at: float) -> list:
        if self.slot_wake is not None and self.slot_wake <= at:
            return []
        self.slot_wake = at
        return [Wake(at, "slot")]

    def _allocate(self, now: float, slot_end: float) -> list:
        while self.ready:
            entry = self.ready.popleft()
            if entry.pk in self.chain:
                self.counters["join_superseded"] += 1
                continue
            mark = self.clock.mark()
            try:
                self._audit_chain(0)
            except BrokenChainLink:
                self.ready.appendleft(entry)
                return []
            header = allocate_header(
                self.chain.tip, entry.pk, self.config.expiration_window, int(now), AccessLevel.PUBLIC
            )
            h = header_hash(header)
            sig = crypto.sign(self.keypair.private, HeaderOffer.signing_bytes(h))
            offer = Send.of(entry.requester, HeaderOffer(header, self.public, sig))
            entry.cost_us += self.clock.since(mark)
            self.in_flight = Allocation(entry, header, h, slot_end)
            return [offer, Wake(slot_end, "offer_deadline", h)]
        return []

    def _offer_deadline(self, h: bytes, now: float) -> list:
        alloc = self.in_flight
        if alloc is None or alloc.header_hash != h:
            return []
        self.in_flight = None
        entry = alloc.entry
        entry.attempts += 1
        self.counters["offers_abandoned"] += 1
        if entry.attempts < self.config.offer_attempts:
            self.ready.appendleft(entry)
        return self._try_allocate(now)

    def handle_binding(self, req: JoinRequest, src: str, now: float) -> list:
        """Second join phase: the vehicle re-signed its genesis against our header."""
        alloc = self.in_flight
        bound = req.genesis
        if alloc is None or bound.prev_tx_hash != alloc.header_hash:
            self.counters["stale_binding"] += 1
            return []
        mark = self.clock.mark()
        entry = alloc.entry
        self.in_flight = None
        if alloc.header.prev_header_hash != self.chain.tip_hash or now > alloc.deadline:
            self.counters["offers_abandoned"] += 1
            self.ready.appendleft(entry)
            return self._try_allocate(now)
        try:
            block = finalize_block(alloc.header, bound)
            self._audit_chain(0)
            self.chain.add_block(block)
        except Rejected as exc:
            return self._reject(src, exc.reason, tx_digest(bound)) + self._try_allocate(now)
        self._remember(block)
        out = broadcast(self.peers, BlockBroadcast(block))
        out.append(Send.of(entry.requester, Ack(alloc.header_hash)))
        self.metrics.record("block_add", self.id, len(self.chain), entry.cost_us + self.clock.since(mark), now)
        out += self._schedule_kui(now)
        out += self._release_holds(block.device_pk, now)
        out += self._try_allocate(now)
        return out

    def _audit_chain(self, position: int) -> None:
        """Recheck stored header links from ``position`` to the tip."""
        if not self.chain.verify_anchor(position):
            self.counters["audit_failed"] += 1
            raise BrokenChainLink("stored header chain fails its own audit")

    def _audit_ledger(self, block: DeviceBlock) -> None:
        """Recheck the newest ``audit_depth`` ledger links before extending them."""
        ledger = block.ledger
        start = max(0, len(ledger) - self.config.audit_depth)
        expected = header_hash(block.header) if start == 0 else ledger[start].prev_tx_hash
        for tx in ledger[start:]:
            if tx.prev_tx_hash != expected:
                self.counters["audit_failed"] += 1
                raise BrokenChainLink("stored ledger fails its own audit")
            expected = tx_digest(tx)

    # -- transactions --------------------------------------------------------------

    def handle_tx(self, sub: TxSubmit, src: str, now: float) -> list:
        mark = self.clock.mark()
        tx = sub.tx
        d = tx_digest(tx)
        if d in self.tx_seen:
            self.counters["tx_duplicate"] += 1
            return [Send.of(src, Ack(d))]
        position = self.chain.position(sub.pk)
        if position is None:
            return self._reject(src, UnknownDevice.reason, d)
        block = self.chain.blocks[position]
        try:
            self._audit_chain(position)
            self._audit_ledger(block)
        except BrokenChainLink:
            return self._reject(src, Reason.MALFORMED, d)
        try:
            check_transaction(block, tx, int(now))
        except BrokenChainLink:
            if tx.prev_tx_hash not in self.tx_seen and self._hold(sub.pk, tx, src, origin=True):
                return []
            return self._reject(src, Reason.BROKEN_CHAIN_LINK, d)
        except Rejected as exc:
            return self._reject(src, exc.reason, d)
        out = self._apply_tx(block, sub.pk, tx, d, "tx_add", mark, now, exclude=None)
        out.append(Send.of(src, Ack(d)))
        return out + self._release_holds(sub.pk, now)

    def _apply_tx(self, block, pk, tx, d, kind, mark, now, exclude) -> list:
        block.ledger.append(tx)
        self.tx_seen.add(d)
        out: list = []
        if kind == "tx_add" or self.relay or self.behaviour == "mutate":
            sent = self._outgoing(tx)
            out = broadcast([p for p in self.peers if p != exclude], TxBroadcast(pk, sent))
        self.metrics.record(kind, self.id, len(self.chain), self.clock.since(mark), now)
        return out

    def _outgoing(self, tx: Transaction) -> Transaction:
        if self.behaviour == "mutate":
            self.counters["mutations_sent"] += 1
            return _flip_first_byte(tx)
        return tx

    def _hold(self, pk: bytes, tx: Transaction, src: str, origin: bool) -> bool:
        holds = self.tx_holds.setdefault(pk, {})
        if tx.prev_tx_hash in holds or len(holds) >= self.config.reorder_limit:
            self.counters["reorder_overflow"] += 1
            return False
        holds[tx.prev_tx_hash] = (tx, src, origin)
        self.counters["tx_held"] += 1
        return True

    def _release_holds(self, pk: bytes, now: float) -> list:
        holds = self.tx_holds.get(pk)
        block = self.chain.find_block(pk)
        out: list = []
        while holds and block is not None and block.tail_hash in holds:
            tx, src, origin = holds.pop(block.tail_hash)
            if origin:
                out += self.handle_tx(TxSubmit(pk, tx), src, now)
            else:
                out += self.handle_peer_update(TxBroadcast(pk, tx), src, now)
        if pk in self.tx_holds and not self.tx_holds[pk]:
            del self.tx_holds[pk]
        return out

    # -- gossip from peers ---------------------------------------------------------

    def handle_peer_update(self, msg, src: str, now: float) -> list:
        if isinstance(msg, BlockBroadcast):
            return self._peer_block(msg.block, src, now)
        return self._peer_tx(msg.pk, msg.tx, src, now)

    def _peer_tx(self, pk: bytes, tx: Transaction, src: str, now: float) -> list:
        mark = self.clock.mark()
        d = tx_digest(tx)
        if d in self.tx_seen:
            self.counters["peer_duplicate"] += 1
            return []
        block = self.chain.find_block(pk)
        if block is None:
            if not self._hold(pk, tx, src, origin=False):
                self.counters["peer_tx_ignored"] += 1
            return []
        try:
            check_transaction(block, tx)
        except BrokenChainLink:
            if tx.prev_tx_hash not in self.tx_seen and self._hold(pk, tx, src, origin=False):
                return []
            self.counters["peer_tx_ignored"] += 1
            return []
        except Rejected as exc:
            self.counters[f"peer_{exc.reason.name.lower()}"] += 1
            return []
        out = self._apply_tx(block, pk, tx, d, "peer_tx_update", mark, now, exclude=src)
        return out + self._release_holds(pk, now)

    def _peer_block(self, block: DeviceBlock, src: str, now: float) -> list:
        mark = self.clock.mark()
        h = header_hash(block.header)
        if h in self.known_headers:
            self.counters["peer_duplicate"] += 1
            return []
        prev = block.header.prev_header_hash
        if prev != self.chain.tip_hash:
            if prev not in self.known_headers and len(self.block_holds) < self.config.reorder_limit:
                self.block_holds[prev] = block
                self.counters["block_held"] += 1
            else:
                self.counters["peer_block_ignored"] += 1
            return []
        try:
            self._audit_chain(0)
            self.chain.add_block(block)
        except Rejected:
            self.counters["peer_block_ignored"] += 1
            return []
        self._remember(block)
        out: list = []
        if self.relay:
            out = broadcast([p for p in self.peers if p != src], BlockBroadcast(block))
        self.metrics.record("peer_block_update", self.id, len(self.chain), self.clock.since(mark), now)
        out += self._schedule_kui(now)
        child = self.block_holds.pop(h, None)
        if child is not None:
            out += self._peer_block(child, src, now)
        out += self._release_holds(block.device_pk, now)
        if self.ready:
            out += self._try_allocate(now)
        return out

    # -- key update interval ---------------------------------------------------------

    def _schedule_kui(self, now: float) -> list:
        period = self.config.kui_period
        if period <= 0 or self.kui_next is not None:
            return []
        self.kui_next = (math.floor(now / period) + 1) * period
        return [Wake(self.kui_next, "kui")]

    def kui_tick(self, now: float) -> list:
        """Build the Merkle tree of active keys and hand each vehicle in range the root."""
        keys = sorted(self.chain.active_keys(int(now)))
        if not keys:
            self.counters["kui_skipped"] += 1
            return []
        mark = self.clock.mark()
        tree = crypto.merkle_build(keys)
        self.metrics.record("merkle_build", self.id, len(keys), self.clock.since(mark), now)
        period = self.config.kui_period
        self.kui_epoch = int(now // period) if period > 0 else self.kui_epoch + 1
        self.last_kui = KuiRoot(tree.root, self.kui_epoch)
        positions = {pk: i for i, pk in enumerate(keys)}
        out = []
        for v in self.world.vehicles_in_range(self.id, now):
            i = positions.get(self.world.beacon_pk(v))
            proof = crypto.merkle_prove(tree, i) if i is not None else None
            out.append(Send.of(v, KuiRoot(tree.root, self.kui_epoch, proof)))
        return out


# -- vehicle ------------------------------------------------------------------------


IDLE, JOINING, BINDING, ACTIVE = "idle", "joining", "binding", "active"


class VehicleNode:
    """Light client: keeps its own tail hash, the latest Merkle root and its proof.

    ``lies=True`` makes the vehicle confirm every witness query.
    """

    def __init__(
        self,
        node_id: str,
        authority_pk: bytes,
        world: World,
        rng: random.Random,
        config: NodeConfig | None = None,
        lies: bool = False,
        access_level: int = AccessLevel.PUBLIC,
    ) -> None:
        self.id = node_id
        self.authority_pk = authority_pk
        self.world = world
        self.rng = rng
        self.config = config or NodeConfig()
        self.lies = lies
        self.access_level = access_level
        self.keypair: KeyPair | None = None
        self.key_expiry: float | None = None
        self.header: BlockHeader | None = None
        self.state = IDLE
        self.pending_join: JoinRequest | None = None
        self.join_sent = False
        self.join_attempts = 0
        self.bound_genesis: Transaction | None = None
        self.ledger_tail_hash: bytes | None = None
        self.outbox: list[tuple[bytes, Transaction]] = []
        self.carried: list[tuple[bytes, Transaction]] = []
        self.merkle_root: bytes | None = None
        self.membership_proof: MembershipProof | None = None
        self.kui_epoch = -1
        self.trusted_rsis: set[bytes] = set()
        self.trusted_nodes: dict[str, bytes] = {}
        self.rotation_pending = False
        self.past_keys: list[bytes] = []
        self.emitted: list[tuple[bytes, bytes]] = []
        self.counters: Counter = Counter()

    @property
    def geotag(self) -> Geotag:
        return self.world.geotag_of(self.id)

    @property
    def active(self) -> bool:
        return self.state == ACTIVE

    # -- dispatch -------------------------------------------------------------------

    def on_message(self, src: str, msg, now: float) -> list:
        if isinstance(msg, RsiCredential):
            if not self.verify_rsi(msg, src):
                self.counters["credential_rejected"] += 1
                return []
            return self._send_join(now) + self._flush(now)
        if isinstance(msg, HeaderOffer):
            return self.handle_offer(msg, src, now)
        if isinstance(msg, Ack):
            return self.handle_ack(msg, src, now)
        if isinstance(msg, Reject):
            self.counters[f"rejected_{msg.reason.name.lower()}"] += 1
            return []
        if isinstance(msg, WitnessQuery):
            return self.answer_witness(msg, src, now)
        if isinstance(msg, KuiRoot):
            self.handle_kui(msg, src)
            return []
        if isinstance(msg, TxForward):
            self.carried.append((msg.pk, msg.tx))
            self.counters["mule_carried"] += 1
            return self._flush(now)
        self.counters["vehicle_ignored_message"] += 1
        return []

    def on_wake(self, what: str, data, now: float) -> list:
        if what == "contact":
            return self._send_join(now) + self._flush(now)
        if what == "bootstrap":
            return self.bootstrap(now)
        if what == "emit":
            return self.emit_tx(data, now)
        if what == "rotate":
            return self.rotate_key(now)
        if what == "join_retry":
            return self._join_retry(data, now)
        raise ValueError(f"unknown wake {what!r}")

    # -- join ------------------------------------------------------------------------

    def bootstrap(self, now: float) -> list:
        """Fresh key pair and unbound genesis, sent once a trusted RSI is in range."""
        if self.state != IDLE:
            raise RuntimeError(f"{self.id} cannot bootstrap while {self.state}")
        if self.keypair is not None:
            self.past_keys.append(self.keypair.public)
        self.keypair = crypto.generate_keypair(self.rng)
        self.world.set_beacon(self.id, self.keypair.public)
        self.key_expiry = now + self.config.expiration_window
        self.header = None
        self.membership_proof = None
        self.pending_join = None
        self.state = JOINING
        self.join_sent = False
        self.join_attempts = 0
        out = self._send_join(now)
        out.append(Wake(now + self.config.join_retry_ms, "join_retry", self.keypair.public))
        return out

    def _trusted_rsi_nearby(self, now: float) -> str | None:
        rsi = self.world.nearest_rsi(self.id, now)
        return rsi if rsi is not None and rsi in self.trusted_nodes else None

    def _send_join(self, now: float) -> list:
        if self.state != JOINING or self.join_sent:
            return []
        rsi = self._trusted_rsi_nearby(now)
        if rsi is None:
            return []
        if self.pending_join is None:
            # Claim where the vehicle is when it first reaches an RSI, so witnesses can see it.
            # Retries resend the same genesis because an RSI may still hold it.
            self.pending_join = JoinRequest(make_genesis_tx(self.keypair, self.geotag, int(now)))
        self.join_sent = True
        self.join_attempts += 1
        return [Send.of(rsi, self.pending_join)]

    def _join_retry(self, pk: bytes, now: float) -> list:
        if self.keypair is None or self.keypair.public != pk or self.state not in (JOINING, BINDING):
            return []
        if self.join_attempts >= self.config.join_retries:
            self.counters["join_gave_up"] += 1
            return []
        self.state = JOINING
        self.join_sent = False
        return self._send_join(now) + [Wake(now + self.config.join_retry_ms, "join_retry", pk)]

    def verify_rsi(self, cred: RsiCredential, src: str | None = None) -> bool:
        ok = crypto.verify(self.authority_pk, RsiCredential.signing_bytes(cred.rsi_pk), cred.authority_signature)
        if ok:
            self.trusted_rsis.add(cred.rsi_pk)
            if src is not None:
                self.trusted_nodes[src] = cred.rsi_pk
        return ok

    def handle_offer(self, offer: HeaderOffer, src: str, now: float) -> list:
        kp = self.keypair
        if (
            self.state != JOINING
            or kp is None
            or self.trusted_nodes.get(src) != offer.rsi_pk
            or offer.header.device_pk != kp.public
            or offer.header.expiration < now
            or not offer.signature_ok()
        ):
            self.counters["offer_ignored"] += 1
            return []
        self.header = offer.header
        self.bound_genesis = bind_genesis(kp, self.pending_join.genesis, offer.header_hash)
        self.state = BINDING
        return [Send.of(src, JoinRequest(self.bound_genesis))]

    def handle_ack(self, ack: Ack, src: str, now: float) -> list:
        if self.state == BINDING and self.header is not None and ack.ref == header_hash(self.header):
            self.state = ACTIVE
            self.key_expiry = self.header.expiration
            self.ledger_tail_hash = tx_digest(self.bound_genesis)
            self.pending_join = None
            self.counters["joins_completed"] += 1
            return self._flush(now)
        return []

    # -- witnessing --------------------------------------------------------------

    def answer_witness(self, q: WitnessQuery, src: str, now: float) -> list:
        if not self.active or self.key_expiry < now:
            return []
        observed = True if self.lies else self.world.observes(self.id, q.pk, q.geotag, now)
        sig = crypto.sign(self.keypair.private, WitnessReport.signing_bytes(q.pk, observed))
        return [Send.of(src, WitnessReport(q.pk, observed, self.keypair.public, sig))]

    # -- key update interval -----------------------------------------------------

    def handle_kui(self, k: KuiRoot, src: str) -> None:
        if src not in self.trusted_nodes or k.epoch < self.kui_epoch:
            return
        self.kui_epoch = k.epoch
        self.merkle_root = k.root
        proof = k.proof
        if proof is not None and self.keypair is not None:
            if not crypto.merkle_verify(k.root, crypto.digest(self.keypair.public), proof):
                proof = None
        self.membership_proof = proof

    def rotate_key(self, now: float) -> list:
        """Start a fresh join; waits for the current key to expire first."""
        if self.state == ACTIVE and self.key_expiry is not None and now <= self.key_expiry:
            if self.rotation_pending:
                return []
            self.rotation_pending = True
            return [Wake(self.key_expiry + 1, "rotate")]
        if self.state in (JOINING, BINDING):
            return []
        self.rotation_pending = False
        self.state = IDLE
        return self.bootstrap(now)

    # -- data upload ---------------------------------------------------------------

    def emit_tx(self, payload: bytes, now: float) -> list:
        """Sign one reading and send it toward an RSI, a neighbour, or the outbox."""
        if self.state != ACTIVE:
            self.counters["emit_not_active"] += 1
            return []
        if now > self.key_expiry:
            self.counters["emit_expired"] += 1
            return self.rotate_key(now)
        tx = make_transaction(
            self.keypair, self.ledger_tail_hash, payload, self.geotag, int(now), self.access_level
        )
        self.ledger_tail_hash = tx_digest(tx)
        self.outbox.append((self.keypair.public, tx))
        self.emitted.append((self.keypair.public, self.ledger_tail_hash))
        return self._flush(now)

    def _flush(self, now: float) -> list:
        if not self.outbox and not self.carried:
            return []
        rsi = self.world.nearest_rsi(self.id, now)
        if rsi is not None:
            if rsi not in self.trusted_nodes:
                return []
            out = [Send.of(rsi, TxSubmit(pk, tx)) for pk, tx in self.outbox + self.carried]
            self.counters["tx_submitted"] += len(self.outbox)
            self.counters["mule_delivered"] += len(self.carried)
            self.outbox.clear()
            self.carried.clear()
            return out
        neighbour = self.world.nearest_vehicle(self.id, now)
        if neighbour is None or not self.outbox:
            return []
        out = [Send.of(neighbour, TxForward(pk, tx)) for pk, tx in self.outbox]
        self.counters["tx_forwarded"] += len(self.outbox)
        self.outbox.clear()
        return out
