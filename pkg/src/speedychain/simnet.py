"""Deterministic discrete-event network simulator.

Nodes are state machines with two entry points, ``on_message(src, msg, now)``
and ``on_wake(what, data, now)``; both return a list of ``Send``/``Wake``
outputs. Messages travel as canonical bytes and are decoded per delivery, so
no two nodes ever share a mutable object. Events are processed in
``(time, sequence)`` order and all randomness comes from one seeded
``random.Random``.

Simulation time is in milliseconds (float). Positions are metres on a
local plane; ``Geo`` converts them to latitude/longitude for geotags.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import protocol
from .ledger import Geotag

RSI = "rsi"
VEHICLE = "vehicle"
OTHER = "other"


# -- outputs returned by node handlers -------------------------------------------


@dataclass(frozen=True)
class Send:
    dst: str
    data: bytes

    @classmethod
    def of(cls, dst: str, msg: protocol.Message) -> "Send":
        return cls(dst, protocol.encode(msg))

    @property
    def message(self) -> protocol.Message:
        return protocol.decode(self.data)


@dataclass(frozen=True)
class Wake:
    at: float
    what: str
    data: object = None


def broadcast(dsts: Iterable[str], msg: protocol.Message) -> list[Send]:
    data = protocol.encode(msg)
    return [Send(d, data) for d in dsts]


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class Geo:
    """Equirectangular projection around an origin; fine at city scale."""

    origin: Geotag = Geotag(-30.0346, -51.2177)
    metres_per_degree: float = 111_320.0

    def to_geotag(self, x: float, y: float) -> Geotag:
        lat = self.origin.latitude + y / self.metres_per_degree
        scale = self.metres_per_degree * math.cos(math.radians(self.origin.latitude))
        return Geotag(lat, self.origin.longitude + x / scale)

    def to_xy(self, g: Geotag) -> tuple[float, float]:
        scale = self.metres_per_degree * math.cos(math.radians(self.origin.latitude))
        return (
            (g.longitude - self.origin.longitude) * scale,
            (g.latitude - self.origin.latitude) * self.metres_per_degree,
        )


@dataclass(frozen=True)
class Latency:
    """Uniform latency ``base * (1 ± jitter)`` in milliseconds."""

    base: float
    jitter: float = 0.2

    def __post_init__(self) -> None:
        if self.base < 0 or not 0 <= self.jitter <= 1:
            raise ValueError("latency must be non-negative with jitter in [0, 1]")

    @property
    def worst(self) -> float:
        return self.base * (1 + self.jitter)

    def sample(self, rng: random.Random) -> float:
        if self.base == 0:
            return 0.0
        if self.jitter == 0:
            return self.base
        return self.base * rng.uniform(1 - self.jitter, 1 + self.jitter)


@dataclass(frozen=True)
class Partition:
    """Cuts ``nodes`` off from everyone else during ``[start, end)``."""

    start: float
    end: float
    nodes: frozenset

    def active(self, t: float) -> bool:
        return self.start <= t < self.end

    def crosses(self, a: str, b: str) -> bool:
        return (a in self.nodes) != (b in self.nodes)


@dataclass(frozen=True)
class LinkModel:
    rsi_rsi: Latency = Latency(1.0)
    vehicle_rsi: Latency = Latency(5.0)
    vehicle_vehicle: Latency = Latency(5.0)
    drop_probability: float = 0.0
    partitions: tuple[Partition, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must be in [0, 1]")

    def latency(self, a_kind: str, b_kind: str) -> Latency:
        if a_kind == RSI and b_kind == RSI:
            return self.rsi_rsi
        if VEHICLE in (a_kind, b_kind) and RSI in (a_kind, b_kind):
            return self.vehicle_rsi
        return self.vehicle_vehicle

    def cut(self, a: str, b: str, t: float) -> bool:
        return any(p.active(t) and p.crosses(a, b) for p in self.partitions)


@dataclass
class Topology:
    rsi_count: int = 15
    rsi_adjacency: list[tuple[str, str]] | None = None  # None = full mesh
    rsi_range: float = 200.0
    vehicle_range: float = 100.0
    sensing_range: float = 300.0
    geotag_tolerance: float = 30.0

    def rsi_ids(self) -> list[str]:
        return [rsi_id(i) for i in range(self.rsi_count)]

    def peers(self) -> dict[str, list[str]]:
        ids = self.rsi_ids()
        if self.rsi_adjacency is None:
            return {a: [b for b in ids if b != a] for a in ids}
        out: dict[str, list[str]] = {a: [] for a in ids}
        for a, b in self.rsi_adjacency:
            if a not in out or b not in out:
                raise ValueError(f"edge ({a}, {b}) names an unknown RSI")
            if b not in out[a]:
                out[a].append(b)
                out[b].append(a)
        if not _connected(out):
            raise ValueError("RSI peer graph must be connected")
        return {a: sorted(v) for a, v in out.items()}


def _connected(adj: dict[str, list[str]]) -> bool:
    if not adj:
        return True
    start = next(iter(adj))
    seen, stack = {start}, [start]
    while stack:
        for n in adj[stack.pop()]:
            if n not in seen:
                seen.add(n)
                stack.append(n)
    return len(seen) == len(adj)


def rsi_id(i: int) -> str:
    return f"rsi-{i:02d}"


def vehicle_id(i: int) -> str:
    return f"veh-{i:04d}"


@dataclass
class MobilityTrace:
    """Piecewise-constant positions: ``node -> [(t, x, y), ...]`` sorted by t."""

    waypoints: dict[str, list[tuple[float, float, float]]] = field(default_factory=dict)

    def add(self, node: str, t: float, x: float, y: float) -> "MobilityTrace":
        points = self.waypoints.setdefault(node, [])
        points.append((t, x, y))
        points.sort(key=lambda p: p[0])
        return self

    def position(self, node: str, t: float) -> tuple[float, float] | None:
        points = self.waypoints.get(node)
        if not points:
            return None
        current = points[0]
        for p in points:
            if p[0] > t:
                break
            current = p
        return current[1], current[2]


# -- report -----------------------------------------------------------------------


@dataclass
class SimulationReport:
    quiescent: bool
    end_time: float
    events_processed: int
    messages: dict[str, dict[str, int]]
    chain_digests: dict[str, str]
    chain_lengths: dict[str, int]
    ledger_sizes: dict[str, int]
    counters: dict[str, int]
    event_log_digest: str

    def to_dict(self) -> dict:
        return {
            "quiescent": self.quiescent,
            "end_time": self.end_time,
            "events_processed": self.events_processed,
            "messages": self.messages,
            "chain_digests": self.chain_digests,
            "chain_lengths": self.chain_lengths,
            "ledger_sizes": self.ledger_sizes,
            "counters": self.counters,
            "event_log_digest": self.event_log_digest,
        }

    @property
    def converged(self) -> bool:
        return len(set(self.chain_digests.values())) <= 1


# -- simulator --------------------------------------------------------------------

# Heap entry kinds.
_MESSAGE, _WAKE, _MOVE, _CONTACT = 0, 1, 2, 3

Interceptor = Callable[["Simulator", str, str, bytes, float], list[tuple[str, str, bytes]] | None]


class Simulator:
    def __init__(
        self,
        topology: Topology | None = None,
        links: LinkModel | None = None,
        mobility: MobilityTrace | None = None,
        seed: int = 0,
        geo: Geo | None = None,
    ) -> None:
        self.topology = topology or Topology()
        self.links = links or LinkModel()
        self.mobility = mobility or MobilityTrace()
        self.geo = geo or Geo()
        self.rng = random.Random(seed)
        self.now = 0.0
        self.nodes: dict[str, object] = {}
        self.kinds: dict[str, str] = {}
        self._index: dict[str, int] = {}
        self._ids: list[str] = []
        self._pos = np.zeros((0, 2))
        self._queue: list[tuple] = []
        self._seq = 0
        self._log = hashlib.sha256()
        self.events_processed = 0
        self.sent: Counter = Counter()
        self.delivered: Counter = Counter()
        self.dropped: Counter = Counter()
        self.malformed = 0
        self.interceptors: list[Interceptor] = []
        self.beacons: dict[str, bytes] = {}
        self._beacon_owner: dict[bytes, str] = {}
        self._started = False

    # -- population ---------------------------------------------------------------

    def add_node(self, node_id: str, node: object, kind: str, position: tuple[float, float] | None = None) -> None:
        if node_id in self.nodes:
            raise ValueError(f"duplicate node id {node_id!r}")
        if position is None:
            position = self.mobility.position(node_id, 0.0)
        if position is None:
            raise ValueError(f"node {node_id!r} has no position")
        self.nodes[node_id] = node
        self.kinds[node_id] = kind
        self._index[node_id] = len(self._ids)
        self._ids.append(node_id)
        self._pos = np.vstack([self._pos, np.asarray(position, dtype=float)])

    def ids_of(self, kind: str) -> list[str]:
        return [n for n in self._ids if self.kinds[n] == kind]

    # -- geometry and ground truth ------------------------------------------------

    def position(self, node_id: str) -> tuple[float, float]:
        x, y = self._pos[self._index[node_id]]
        return float(x), float(y)

    def geotag_of(self, node_id: str) -> Geotag:
        return self.geo.to_geotag(*self.position(node_id))

    def _distances(self, point: Iterable[float]) -> np.ndarray:
        return np.hypot(*(self._pos - np.asarray(point, dtype=float)).T) if self._ids else np.zeros(0)

    def _closest(self, node_id: str, kind: str, radius: float) -> str | None:
        d = self._distances(self.position(node_id))
        best = None
        for i in np.argsort(d, kind="stable"):
            if d[i] > radius:
                break
            other = self._ids[i]
            if other == node_id or self.kinds[other] != kind:
                continue
            if self.links.cut(node_id, other, self.now):
                continue
            if best is not None and d[i] > best[0]:
                break
            if best is None or other < best[1]:
                best = (d[i], other)
        return None if best is None else best[1]

    def nearest_rsi(self, node_id: str, now: float | None = None) -> str | None:
        """Closest reachable RSI within range; equal distances go to the lower id."""
        return self._closest(node_id, RSI, self.topology.rsi_range)

    def nearest_vehicle(self, node_id: str, now: float | None = None) -> str | None:
        return self._closest(node_id, VEHICLE, self.topology.vehicle_range)

    def nodes_within(self, geotag: Geotag, radius: float, now: float | None = None) -> list[str]:
        d = self._distances(self.geo.to_xy(geotag))
        return sorted(self._ids[i] for i in np.flatnonzero(d <= radius) if self.kinds[self._ids[i]] != OTHER)

    def vehicles_in_range(self, rsi: str, now: float | None = None) -> list[str]:
        d = self._distances(self.position(rsi))
        return [
            n
            for i, n in enumerate(self._ids)
            if self.kinds[n] == VEHICLE and d[i] <= self.topology.rsi_range and not self.links.cut(rsi, n, self.now)
        ]

    def set_beacon(self, node_id: str, pk: bytes | None) -> None:
        """Record which key a node currently advertises over the air."""
        old = self.beacons.pop(node_id, None)
        if old is not None:
            self._beacon_owner.pop(old, None)
        if pk is not None:
            self.beacons[node_id] = pk
            self._beacon_owner[pk] = node_id

    def beacon_pk(self, node_id: str) -> bytes | None:
        return self.beacons.get(node_id)

    def observes(self, witness: str, pk: bytes, geotag: Geotag, now: float | None = None) -> bool:
        """Ground truth: is ``pk``'s owner near the claimed spot and near ``witness``?"""
        owner = self._beacon_owner.get(pk)
        if owner is None or owner == witness:
            return False
        ox, oy = self.position(owner)
        cx, cy = self.geo.to_xy(geotag)
        wx, wy = self.position(witness)
        return (
            math.hypot(ox - cx, oy - cy) <= self.topology.geotag_tolerance
            and math.hypot(ox - wx, oy - wy) <= self.topology.sensing_range
        )

    # -- scheduling ---------------------------------------------------------------

    def _push(self, at: float, kind: int, dst: str, src: str, payload) -> None:
        heapq.heappush(self._queue, (at, self._seq, kind, dst, src, payload))
        self._seq += 1

    def send(self, src: str, dst: str, data: bytes, now: float | None = None) -> bool:
        """Enqueue ``data`` for ``dst``; returns False when dropped at send time."""
        now = self.now if now is None else now
        if self.interceptors:
            for hook in self.interceptors:
                replaced = hook(self, src, dst, data, now)
                if replaced is not None:
                    for s, d, payload in replaced:
                        self._enqueue(s, d, payload, now)
                    return True
        return self._enqueue(src, dst, data, now)

    def _enqueue(self, src: str, dst: str, data: bytes, now: float) -> bool:
        name = _type_name(data)
        self.sent[name] += 1
        if dst not in self.nodes or self.links.cut(src, dst, now):
            self.dropped[name] += 1
            return False
        if self.links.drop_probability and self.rng.random() < self.links.drop_probability:
            self.dropped[name] += 1
            return False
        delay = self.links.latency(self.kinds.get(src, OTHER), self.kinds[dst]).sample(self.rng)
        self._push(now + delay, _MESSAGE, dst, src, data)
        return True

    schedule = send

    def wake(self, node_id: str, at: float, what: str, data: object = None) -> None:
        self._push(max(at, self.now), _WAKE, node_id, "", (what, data))

    def _apply(self, node_id: str, outputs: Iterable) -> None:
        for out in outputs or ():
            if isinstance(out, Send):
                self.send(node_id, out.dst, out.data, self.now)
            elif isinstance(out, Wake):
                self.wake(node_id, out.at, out.what, out.data)
            else:
                raise TypeError(f"unexpected handler output {out!r}")

    def _start(self) -> None:
        self._started = True
        for node_id, points in self.mobility.waypoints.items():
            if node_id in self._index:
                for t, x, y in points:
                    if t > 0:
                        self._push(t, _MOVE, node_id, "", (x, y))
        for p in self.links.partitions:
            self._push(p.end, _CONTACT, "*", "", None)
        self._push(0.0, _CONTACT, "*", "", None)

    def contact(self, vehicle: str) -> None:
        """Let the nearest RSI introduce itself, then tell the vehicle."""
        rsi = self.nearest_rsi(vehicle)
        if rsi is not None:
            on_contact = getattr(self.nodes[rsi], "on_contact", None)
            if on_contact is not None:
                self._apply(rsi, on_contact(vehicle, self.now))
        self._apply(vehicle, self.nodes[vehicle].on_wake("contact", rsi, self.now))

    def run_until_quiescent(self, max_time: float = math.inf) -> SimulationReport:
        if not self._started:
            self._start()
        while self._queue and self._queue[0][0] <= max_time:
            at, seq, kind, dst, src, payload = heapq.heappop(self._queue)
            self.now = at
            self.events_processed += 1
            if kind == _MESSAGE:
                self._log.update(f"{at!r}|{src}|{dst}|".encode())
                self._log.update(payload)
                self._deliver(src, dst, payload)
            elif kind == _WAKE:
                what, data = payload
                self._log.update(f"{at!r}|wake|{dst}|{what}".encode())
                self._apply(dst, self.nodes[dst].on_wake(what, data, at))
            elif kind == _MOVE:
                self._log.update(f"{at!r}|move|{dst}".encode())
                self._pos[self._index[dst]] = payload
                if self.kinds[dst] == VEHICLE:
                    self.contact(dst)
            else:
                self._log.update(f"{at!r}|contact".encode())
                for v in self.ids_of(VEHICLE):
                    self.contact(v)
        return self.report(quiescent=not self._queue)

    def _deliver(self, src: str, dst: str, data: bytes) -> None:
        name = _type_name(data)
        if self.links.cut(src, dst, self.now):
            self.dropped[name] += 1
            return
        self.delivered[name] += 1
        try:
            msg = protocol.decode(data)
        except protocol.DecodeError:
            self.malformed += 1
            return
        self._apply(dst, self.nodes[dst].on_message(src, msg, self.now))

    def in_flight(self) -> Counter:
        c: Counter = Counter()
        for entry in self._queue:
            if entry[2] == _MESSAGE:
                c[_type_name(entry[5])] += 1
        return c

    def report(self, quiescent: bool | None = None) -> SimulationReport:
        flight = self.in_flight()
        names = sorted(set(self.sent) | set(self.delivered) | set(self.dropped))
        messages = {
            n: {"sent": self.sent[n], "delivered": self.delivered[n], "dropped": self.dropped[n], "in_flight": flight[n]}
            for n in names
        }
        digests, lengths, sizes = {}, {}, {}
        counters: Counter = Counter()
        for node_id in self._ids:
            node = self.nodes[node_id]
            chain = getattr(node, "chain", None)
            if chain is not None:
                digests[node_id] = chain.digest().hex()
                lengths[node_id] = len(chain)
                sizes[node_id] = sum(len(b) for b in chain)
            for key, value in getattr(node, "counters", {}).items():
                counters[key] += value
        counters["malformed"] = self.malformed
        return SimulationReport(
            quiescent=not self._queue if quiescent is None else quiescent,
            end_time=self.now,
            events_processed=self.events_processed,
            messages=messages,
            chain_digests=digests,
            chain_lengths=lengths,
            ledger_sizes=sizes,
            counters=dict(sorted(counters.items())),
            event_log_digest=self._log.hexdigest(),
        )


def _type_name(data: bytes) -> str:
    if data:
        try:
            return protocol.Tag(data[0]).name
        except ValueError:
            pass
    return "UNKNOWN"
