"""Scenario runner, 3x3 scaling grid and attack drills.

A scenario first pre-populates the chain: ``blockchain_size`` vehicles join
through the full witnessed join flow. Then ``reporting_vehicles`` of them,
spread evenly along the chain, each emit ``tx_per_vehicle`` transactions.
Every RSI records one metric per accepted operation; the run ends at
message quiescence and the replicas are compared.
"""

from __future__ import annotations

import csv
import dataclasses
import gc
import json
import math
import random
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import stats

from . import crypto, protocol
from .ledger import Blockchain, make_authority_block, make_genesis_tx, tx_digest, validate_chain
from .metrics import KINDS, MetricRecord, MetricsSink, make_stopwatch
from .node import NodeConfig, RsiNode, VehicleNode, WitnessPolicy, _flip_first_byte, credential_for
from .simnet import (
    OTHER,
    RSI,
    VEHICLE,
    Latency,
    LinkModel,
    MobilityTrace,
    Partition,
    Send,
    SimulationReport,
    Simulator,
    Topology,
    rsi_id,
    vehicle_id,
)

GRID_SIZES = (50, 100, 650)
GRID_TX = (10, 100, 1000)
ATTACKS = ("sybil", "tamper", "malicious_rsi")
CSV_COLUMNS = ("kind", "blockchain_size", "tx_count", "node", "sim_time", "elapsed_us")
MIN_CI_SAMPLES = 30


@dataclass
class Scenario:
    name: str = "scenario"
    blockchain_size: int = 50
    tx_per_vehicle: int = 10
    reporting_vehicles: int = 10
    rsi_count: int = 15
    rsi_columns: int = 5
    rsi_spacing: float = 150.0
    rsi_adjacency: list | None = None
    rsi_range: float = 200.0
    vehicle_range: float = 100.0
    sensing_range: float = 300.0
    geotag_tolerance: float = 30.0
    required_reports: int = 1
    query_radius: float = 250.0
    pool_timeout: float = 5_000.0
    kui_period: float = 30_000.0
    expiration_window: int = 60_000
    latency_rsi_rsi: float = 1.0
    latency_vehicle_rsi: float = 5.0
    latency_vehicle_vehicle: float = 5.0
    jitter: float = 0.2
    drop_probability: float = 0.0
    tx_interval: float = 20.0
    payload_size: int = 32
    merkle_repetitions: int = 30
    timer: str = "wall"
    seed: int = 0
    max_time: float = 3_600_000.0
    adversary: str | None = None
    adversary_count: int = 5
    malicious_rsi: int = 0
    lying_witnesses: int = 0

    def __post_init__(self) -> None:
        if self.blockchain_size < 1 or self.tx_per_vehicle < 0 or self.rsi_count < 1:
            raise ValueError("blockchain_size and rsi_count must be positive, tx_per_vehicle non-negative")
        if not 1 <= self.reporting_vehicles or self.reporting_vehicles > self.blockchain_size:
            self.reporting_vehicles = max(1, min(self.reporting_vehicles, self.blockchain_size))
        if self.adversary == "tamperer":
            self.adversary = "tamper"
        if self.adversary is not None and self.adversary not in ATTACKS:
            raise ValueError(f"adversary must be one of {ATTACKS}")
        make_stopwatch(self.timer)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def override(self, **changes) -> "Scenario":
        fields = {f.name: f.type for f in dataclasses.fields(self)}
        for key in changes:
            if key not in fields:
                raise ValueError(f"unknown scenario field {key!r}")
        return dataclasses.replace(self, **changes)

    def node_config(self) -> NodeConfig:
        # Slots must fit one offer round trip and let the previous block reach every peer.
        hop = max(self.latency_vehicle_rsi, 0.0) * (1 + self.jitter)
        backbone = max(self.latency_rsi_rsi, 0.0) * (1 + self.jitter)
        if self.rsi_adjacency is not None:
            backbone *= self.rsi_count
        guard = max(5.0, 2 * backbone + 1.0)
        budget = max(15.0, 2 * hop + 3.0)
        slot = max(50.0, guard + 3 * budget)
        return NodeConfig(
            expiration_window=self.expiration_window,
            kui_period=self.kui_period,
            slot_ms=slot,
            slot_guard_ms=guard,
            offer_budget_ms=budget,
        )

    def policy(self) -> WitnessPolicy:
        return WitnessPolicy(self.required_reports, self.query_radius, self.pool_timeout)

    def topology(self) -> Topology:
        return Topology(
            rsi_count=self.rsi_count,
            rsi_adjacency=[tuple(e) for e in self.rsi_adjacency] if self.rsi_adjacency is not None else None,
            rsi_range=self.rsi_range,
            vehicle_range=self.vehicle_range,
            sensing_range=self.sensing_range,
            geotag_tolerance=self.geotag_tolerance,
        )

    def links(self, partitions: Iterable[Partition] = ()) -> LinkModel:
        return LinkModel(
            rsi_rsi=Latency(self.latency_rsi_rsi, self.jitter),
            vehicle_rsi=Latency(self.latency_vehicle_rsi, self.jitter),
            vehicle_vehicle=Latency(self.latency_vehicle_vehicle, self.jitter),
            drop_probability=self.drop_probability,
            partitions=tuple(partitions),
        )


# -- network construction -----------------------------------------------------------


@dataclass
class Network:
    scenario: Scenario
    sim: Simulator
    authority: crypto.KeyPair
    rsis: dict[str, RsiNode]
    vehicles: dict[str, VehicleNode]
    metrics: MetricsSink
    rng: random.Random

    def honest_rsis(self) -> list[RsiNode]:
        return [r for r in self.rsis.values() if r.behaviour == "honest"]

    def run(self) -> SimulationReport:
        return self.sim.run_until_quiescent(self.scenario.max_time)

    def chains_identical(self, rsis: Iterable[RsiNode] | None = None) -> bool:
        digests = {r.chain.digest() for r in (rsis if rsis is not None else self.rsis.values())}
        return len(digests) == 1

    def add_vehicle(self, node_id: str, position: tuple[float, float], lies: bool = False, cls=None) -> VehicleNode:
        cls = cls or VehicleNode
        v = cls(node_id, self.authority.public, self.sim, self.rng, self.sim_config, lies=lies)
        self.sim.add_node(node_id, v, VEHICLE, position)
        self.vehicles[node_id] = v
        return v

    @property
    def sim_config(self) -> NodeConfig:
        return self.scenario.node_config()


def rsi_position(s: Scenario, i: int) -> tuple[float, float]:
    return (i % s.rsi_columns) * s.rsi_spacing, (i // s.rsi_columns) * s.rsi_spacing


def build_network(
    s: Scenario,
    vehicles: int | None = None,
    homes: list[int] | None = None,
    mobility: MobilityTrace | None = None,
    partitions: Iterable[Partition] = (),
) -> Network:
    """RSIs on a grid and ``vehicles`` parked near their home RSIs (``i % rsi_count``)."""
    rng = random.Random(s.seed)
    sim = Simulator(s.topology(), s.links(partitions), mobility, seed=rng.randrange(2**63))
    key_rng = random.Random(rng.randrange(2**63))
    authority = crypto.generate_keypair(key_rng)
    genesis_block = make_authority_block(authority, sim.geo.origin)
    metrics = MetricsSink()
    stopwatch = make_stopwatch(s.timer)
    config = s.node_config()
    peers = s.topology().peers()
    relay = s.rsi_adjacency is not None
    rsis: dict[str, RsiNode] = {}
    for i in range(s.rsi_count):
        kp = crypto.generate_keypair(key_rng)
        rid = rsi_id(i)
        behaviour = "mutate" if s.adversary == "malicious_rsi" and i == s.malicious_rsi else "honest"
        node = RsiNode(
            rid,
            i,
            kp,
            credential_for(authority, kp.public),
            Blockchain(genesis_block.snapshot()),
            peers[rid],
            s.rsi_count,
            sim,
            s.policy(),
            config,
            metrics,
            stopwatch,
            relay=relay,
            behaviour=behaviour,
        )
        sim.add_node(rid, node, RSI, rsi_position(s, i))
        rsis[rid] = node
    rsi_keys = {r.public for r in rsis.values()}
    for r in rsis.values():
        r.rsi_keys = set(rsi_keys)
    net = Network(s, sim, authority, rsis, {}, metrics, key_rng)
    count = s.blockchain_size if vehicles is None else vehicles
    placement = random.Random(rng.randrange(2**63))
    for j in range(count):
        home = homes[j % len(homes)] if homes else j % s.rsi_count
        hx, hy = rsi_position(s, home)
        radius = placement.uniform(5.0, min(40.0, s.rsi_spacing / 3))
        angle = placement.uniform(0.0, 2 * math.pi)
        vid = vehicle_id(j)
        pos = mobility.position(vid, 0.0) if mobility and vid in mobility.waypoints else None
        net.add_vehicle(vid, pos or (hx + radius * math.cos(angle), hy + radius * math.sin(angle)), lies=j < s.lying_witnesses)
    return net


def bootstrap_all(net: Network, at: float = 0.0, ids: Iterable[str] | None = None) -> None:
    for vid in ids if ids is not None else net.vehicles:
        net.sim.wake(vid, at, "bootstrap")


def reporters_by_position(net: Network, count: int) -> list[str]:
    """``count`` active vehicles spread evenly along the header chain."""
    chain = next(iter(net.rsis.values())).chain
    owner = {v.keypair.public: vid for vid, v in net.vehicles.items() if v.active}
    ordered = [owner[b.device_pk] for b in chain.blocks[1:] if b.device_pk in owner]
    if not ordered:
        return []
    count = min(count, len(ordered))
    picks = np.linspace(0, len(ordered) - 1, count).round().astype(int)
    return [ordered[i] for i in sorted(set(picks.tolist()))]


def schedule_traffic(net: Network, reporters: list[str], start: float) -> None:
    s = net.scenario
    payload_rng = random.Random(s.seed ^ 0x5EED)
    spread = s.tx_interval / max(1, len(reporters))
    for j, vid in enumerate(reporters):
        for k in range(s.tx_per_vehicle):
            payload = payload_rng.randbytes(s.payload_size)
            net.sim.wake(vid, start + k * s.tx_interval + j * spread, "emit", payload)


@contextmanager
def quiet_gc():
    """Keep the collector out of timed sections."""
    gc.collect()
    enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


# -- summaries ----------------------------------------------------------------------


@dataclass
class KindSummary:
    n: int
    mean_us: float | None
    std_us: float | None
    ci95_low_us: float | None
    ci95_high_us: float | None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def summarize(values: list[float]) -> KindSummary:
    """Mean with a Student-t 95% interval; the interval needs at least 30 samples."""
    n = len(values)
    if n == 0:
        return KindSummary(0, None, None, None, None)
    a = np.asarray(values, dtype=float)
    mean = float(a.mean())
    std = float(a.std(ddof=1)) if n > 1 else 0.0
    if n < MIN_CI_SAMPLES:
        return KindSummary(n, mean, std, None, None)
    half = float(stats.t.ppf(0.975, n - 1) * std / math.sqrt(n))
    return KindSummary(n, mean, std, mean - half, mean + half)


@dataclass
class SummaryTable:
    blockchain_size: int
    tx_count: int
    kinds: dict[str, KindSummary]

    @classmethod
    def from_records(cls, records: list[MetricRecord], blockchain_size: int, tx_count: int) -> "SummaryTable":
        return cls(
            blockchain_size,
            tx_count,
            {k: summarize([r.elapsed_us for r in records if r.kind == k]) for k in KINDS},
        )

    def mean(self, kind: str) -> float | None:
        return self.kinds[kind].mean_us

    def to_dict(self) -> dict:
        return {
            "blockchain_size": self.blockchain_size,
            "tx_count": self.tx_count,
            "kinds": {k: v.to_dict() for k, v in self.kinds.items()},
        }


def write_metrics_csv(path: Path, records: list[MetricRecord], blockchain_size: int, tx_count: int) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow((r.kind, blockchain_size, tx_count, r.node, f"{r.sim_time:.3f}", f"{r.elapsed_us:.3f}"))


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# -- single scenario ------------------------------------------------------------------


@dataclass
class RunResult:
    scenario: Scenario
    report: SimulationReport
    summary: SummaryTable
    records: list[MetricRecord]
    checks: dict[str, bool]
    details: dict = field(default_factory=dict)
    network: Network | None = None

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def report_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "simulation": self.report.to_dict(),
            "checks": self.checks,
            "details": self.details,
            "passed": self.passed,
        }

    def write(self, out: Path) -> None:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", self.records, self.scenario.blockchain_size, self.scenario.tx_per_vehicle)
        _dump_json(out / "summary.json", self.summary.to_dict())
        _dump_json(out / "report.json", self.report_dict())


def merkle_benchmark(net: Network, leaves: list[bytes], now: float) -> None:
    """Time root computation over ``leaves`` on the first RSI, repeatedly."""
    if not leaves:
        return
    node = next(iter(net.rsis.values()))
    clock = node.clock
    for _ in range(net.scenario.merkle_repetitions):
        mark = clock.mark()
        crypto.merkle_from_leaves(leaves)
        net.metrics.record("merkle_build", node.id, len(leaves), clock.since(mark), now)


def run_scenario(s: Scenario, keep_network: bool = False) -> RunResult:
    """Pre-populate ``blockchain_size`` blocks, then drive the reporting traffic."""
    if s.adversary is not None:
        return run_attack(s.adversary, s)
    with quiet_gc():
        net = build_network(s)
        bootstrap_all(net)
        join_report = net.run()
        joined = sum(v.active for v in net.vehicles.values())
        reporters = reporters_by_position(net, s.reporting_vehicles)
        schedule_traffic(net, reporters, net.sim.now + s.tx_interval)
        report = net.run()
        leaves = _reporter_leaves(net, reporters[:1])
        merkle_benchmark(net, leaves, net.sim.now)
    honest = net.honest_rsis()
    expected_tx = len(reporters) * s.tx_per_vehicle
    first = honest[0].chain
    accepted = sum(len(first.blocks[first.position(net.vehicles[v].keypair.public)]) - 1 for v in reporters)
    checks = {
        "quiescent": join_report.quiescent and report.quiescent,
        "all_joined": joined == s.blockchain_size,
        "chains_identical": net.chains_identical(honest),
        # identical digests mean byte-identical replicas, so one full validation covers all
        "chains_valid": validate_chain(first),
        "all_tx_accepted": accepted == expected_tx,
    }
    details = {
        "joined": joined,
        "reporters": reporters,
        "tx_expected": expected_tx,
        "tx_accepted": accepted,
        "join_phase_end": join_report.end_time,
    }
    records = list(net.metrics.records)
    summary = SummaryTable.from_records(records, s.blockchain_size, s.tx_per_vehicle)
    return RunResult(s, report, summary, records, checks, details, net if keep_network else None)


def _reporter_leaves(net: Network, reporters: list[str]) -> list[bytes]:
    chain = net.honest_rsis()[0].chain
    leaves: list[bytes] = []
    for vid in reporters:
        block = chain.find_block(net.vehicles[vid].keypair.public)
        if block is not None:
            leaves += [tx_digest(tx) for tx in block.ledger[1:]]
    return leaves


# -- grid -------------------------------------------------------------------------------


@dataclass
class GridResult:
    cells: dict[tuple[int, int], RunResult]
    failures: dict[str, str]
    pass_seconds: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(c.passed for c in self.cells.values())

    def mean(self, kind: str, size: int, tx: int) -> float | None:
        cell = self.cells.get((size, tx))
        return None if cell is None else cell.summary.mean(kind)

    def growth(self) -> dict:
        """Ratios of each kind's mean between neighbouring cells along both axes."""
        out: dict = {}
        sizes = sorted({k[0] for k in self.cells})
        txs = sorted({k[1] for k in self.cells})
        for kind in KINDS:
            along_tx, along_size = {}, {}
            for n in sizes:
                for a, b in zip(txs, txs[1:]):
                    along_tx[f"{n}:{a}->{b}"] = _ratio(self.mean(kind, n, b), self.mean(kind, n, a))
            for t in txs:
                for a, b in zip(sizes, sizes[1:]):
                    along_size[f"{t}:{a}->{b}"] = _ratio(self.mean(kind, b, t), self.mean(kind, a, t))
            out[kind] = {"along_tx": along_tx, "along_size": along_size}
        return out


def _ratio(a: float | None, b: float | None) -> float | None:
    if a is None or b is None or b == 0:
        return None
    return a / b


def run_grid(
    base: Scenario, sizes=GRID_SIZES, txs=GRID_TX, out: Path | None = None, repeats: int = 1
) -> GridResult:
    """Run every (size, tx) cell; with ``repeats > 1`` each cell is timed that many times.

    A pass runs all cells before the next pass starts, so repeats of one cell
    are minutes apart. Same-seed runs do identical simulated work, so each
    operation keeps its fastest timing; interference only ever adds time.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    passes: dict[tuple[int, int], list[RunResult]] = {}
    failures: dict[str, str] = {}
    pass_seconds: list[float] = []
    for _ in range(repeats):
        started = time.perf_counter()
        for n in sizes:
            for t in txs:
                name = _cell_name(n, t)
                if name in failures:
                    continue
                s = base.override(name=name, blockchain_size=n, tx_per_vehicle=t, kui_period=0)
                try:
                    passes.setdefault((n, t), []).append(run_scenario(s))
                except Exception as exc:  # keep partial results; the grid is marked failed
                    failures[name] = f"{type(exc).__name__}: {exc}"
        pass_seconds.append(time.perf_counter() - started)
    cells: dict[tuple[int, int], RunResult] = {}
    for (n, t), results in passes.items():
        cell = fastest_of(results)
        cells[(n, t)] = cell
        name = _cell_name(n, t)
        if not cell.passed and name not in failures:
            failures[name] = "checks failed: " + ", ".join(k for k, v in cell.checks.items() if not v)
        if out is not None:
            cell.write(Path(out) / name)
    grid = GridResult(cells, failures, pass_seconds)
    if out is not None:
        write_grid(grid, Path(out))
    return grid


def _cell_name(n: int, t: int) -> str:
    return f"n{n:03d}_t{t:04d}"


def fastest_of(results: list[RunResult]) -> RunResult:
    """Merge repeated runs of one scenario, keeping each operation's fastest timing."""
    first = results[0]
    if len(results) == 1:
        return first
    key = lambda r: (r.kind, r.node, r.chain_size, r.sim_time)  # noqa: E731
    same = all(
        [key(r) for r in other.records] == [key(r) for r in first.records]
        and other.report_dict() == first.report_dict()
        for other in results[1:]
    )
    checks = {**first.checks, "repeats_identical": same}
    for other in results[1:]:
        checks = {k: v and other.checks.get(k, v) for k, v in checks.items()}
    if not same:
        return dataclasses.replace(first, checks=checks)
    records = [
        dataclasses.replace(rec, elapsed_us=min(r.records[i].elapsed_us for r in results))
        for i, rec in enumerate(first.records)
    ]
    s = first.scenario
    summary = SummaryTable.from_records(records, s.blockchain_size, s.tx_per_vehicle)
    return dataclasses.replace(first, records=records, summary=summary, checks=checks)


def write_grid(grid: GridResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for kind in KINDS:
        with open(out / f"{kind}.csv", "w", newline="") as fp:
            w = csv.writer(fp, lineterminator="\n")
            w.writerow(("blockchain_size", "tx_count", "n", "mean_us", "std_us", "ci95_low_us", "ci95_high_us"))
            for (n, t), cell in sorted(grid.cells.items()):
                k = cell.summary.kinds[kind]
                w.writerow((n, t, k.n, *(_fmt(x) for x in (k.mean_us, k.std_us, k.ci95_low_us, k.ci95_high_us))))
    _dump_json(
        out / "grid.json",
        {
            "passed": grid.passed,
            "failures": grid.failures,
            "cells": {f"{n}x{t}": c.summary.to_dict() for (n, t), c in sorted(grid.cells.items())},
            "growth": grid.growth(),
        },
    )


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.3f}"


# -- attacks ------------------------------------------------------------------------------


class SybilVehicle(VehicleNode):
    """Joins honestly, then asks for blocks under invented identities."""

    def __init__(self, *args, fakes: int = 5, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.fakes = fakes
        self.fake_keys: list[bytes] = []

    def on_wake(self, what: str, data, now: float) -> list:
        if what != "sybil":
            return super().on_wake(what, data, now)
        rsi = self._trusted_rsi_nearby(now)
        out = []
        for _ in range(self.fakes):
            kp = crypto.generate_keypair(self.rng)
            self.fake_keys.append(kp.public)
            if rsi is not None:
                out.append(Send.of(rsi, protocol.JoinRequest(make_genesis_tx(kp, self.geotag, int(now)))))
        return out


class Tamperer:
    """Man in the middle: every vehicle upload also reaches every RSI with one payload byte flipped."""

    node_id = "mitm"

    def __init__(self, rsis: list[str]) -> None:
        self.rsis = rsis
        self.mutated: list[bytes] = []
        self.originals: list[bytes] = []
        self.counters: dict = {}

    def on_message(self, src, msg, now):
        return []

    def on_wake(self, what, data, now):
        return []

    def intercept(self, sim: Simulator, src: str, dst: str, data: bytes, now: float):
        if src == self.node_id or not data or data[0] != protocol.Tag.TX_SUBMIT:
            return None
        sub = protocol.decode(data)
        bad = protocol.TxSubmit(sub.pk, _flip_first_byte(sub.tx))
        self.originals.append(tx_digest(sub.tx))
        self.mutated.append(tx_digest(bad.tx))
        forged = protocol.encode(bad)
        return [(src, dst, data)] + [(self.node_id, r, forged) for r in self.rsis]


def run_attack(kind: str, base: Scenario) -> RunResult:
    if kind not in ATTACKS:
        raise ValueError(f"unknown attack {kind!r}; expected one of {ATTACKS}")
    s = base.override(adversary=kind)
    runner = {"sybil": _sybil, "tamper": _tamper, "malicious_rsi": _malicious_rsi}[kind]
    with quiet_gc():
        net, checks, details = runner(s)
    records = list(net.metrics.records)
    report = net.sim.report()
    checks = {"quiescent": report.quiescent, **checks}
    details["chain_digests"] = report.chain_digests
    summary = SummaryTable.from_records(records, s.blockchain_size, s.tx_per_vehicle)
    return RunResult(s, report, summary, records, checks, details)


def _present(net: Network, digests: Iterable[bytes], rsis: list[RsiNode]) -> dict[str, int]:
    wanted = list(digests)
    out = {}
    for r in rsis:
        stored = {tx_digest(tx) for b in r.chain for tx in b.ledger}
        out[r.id] = sum(d in stored for d in wanted)
    return out


def _sybil(s: Scenario):
    net = build_network(s)
    attacker_id = vehicle_id(s.blockchain_size)
    hx, hy = rsi_position(s, 0)
    attacker = net.add_vehicle(attacker_id, (hx + 10.0, hy + 10.0), cls=_sybil_factory(s.adversary_count))
    bootstrap_all(net)
    net.run()
    net.sim.wake(attacker_id, net.sim.now + 10.0, "sybil")
    net.run()
    honest = net.honest_rsis()
    fakes = attacker.fake_keys
    on_chain = {r.id: sum(pk in r.chain for pk in fakes) for r in honest}
    checks = {
        "fakes_requested": len(fakes) == s.adversary_count,
        "no_unwitnessed_block": all(v == 0 for v in on_chain.values()),
        "pool_drained": all(not r.pending_pool for r in honest),
        "honest_joins_unaffected": all(v.active for v in net.vehicles.values()),
        "chains_identical": net.chains_identical(honest),
    }
    details = {"fake_blocks_per_rsi": on_chain, "pool_expired": sum(r.counters["pool_expired"] for r in honest)}
    return net, checks, details


def _sybil_factory(fakes: int):
    def make(*args, **kwargs):
        return SybilVehicle(*args, fakes=fakes, **kwargs)

    return make


def _traffic_phase(net: Network) -> list[str]:
    bootstrap_all(net)
    net.run()
    reporters = reporters_by_position(net, net.scenario.reporting_vehicles)
    schedule_traffic(net, reporters, net.sim.now + net.scenario.tx_interval)
    net.run()
    return reporters


def _tamper(s: Scenario):
    net = build_network(s)
    mitm = Tamperer(list(net.rsis))
    net.sim.add_node(mitm.node_id, mitm, OTHER, (0.0, -500.0))
    net.sim.interceptors.append(mitm.intercept)
    _traffic_phase(net)
    honest = net.honest_rsis()
    rejected = {r.id: r.counters["reject_bad_signature"] for r in honest}
    checks = {
        "tampering_happened": len(mitm.mutated) > 0,
        "rejected_at_every_rsi": all(v == len(mitm.mutated) for v in rejected.values()),
        "mutated_absent": all(v == 0 for v in _present(net, mitm.mutated, honest).values()),
        "originals_present": all(v == len(mitm.originals) for v in _present(net, mitm.originals, honest).values()),
        "chains_identical": net.chains_identical(honest),
    }
    return net, checks, {"tampered": len(mitm.mutated), "bad_signature_rejects": rejected}


def _malicious_rsi(s: Scenario):
    homes = [i for i in range(s.rsi_count) if i != s.malicious_rsi]
    net = build_network(s, homes=homes)
    reporters = _traffic_phase(net)
    honest = net.honest_rsis()
    bad = net.rsis[rsi_id(s.malicious_rsi)]
    originals, mutated = [], []
    chain = honest[0].chain
    for vid in reporters:
        block = chain.find_block(net.vehicles[vid].keypair.public)
        for tx in block.ledger[1:]:
            originals.append(tx_digest(tx))
            mutated.append(tx_digest(_flip_first_byte(tx)))
    emitted = [d for vid in reporters for _, d in net.vehicles[vid].emitted]
    checks = {
        "mutations_sent": bad.counters["mutations_sent"] > 0,
        "chains_identical": net.chains_identical(honest),
        "mutated_absent": all(v == 0 for v in _present(net, mutated, honest).values()),
        "originals_present": all(v == len(emitted) for v in _present(net, emitted, honest).values()),
        "rejected_by_honest": all(r.counters["peer_bad_signature"] > 0 for r in honest),
    }
    return net, checks, {"mutations_sent": bad.counters["mutations_sent"], "emitted": len(emitted)}
