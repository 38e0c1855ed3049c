"""Metric records emitted by RSIs and the stopwatches that time them."""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

from . import crypto

KINDS = ("block_add", "tx_add", "peer_block_update", "peer_tx_update", "merkle_build")


@dataclass(frozen=True)
class MetricRecord:
    kind: str
    node: str
    chain_size: int
    elapsed_us: float
    sim_time: float


class WallStopwatch:
    """Wall-clock microseconds from ``perf_counter_ns``."""

    name = "wall"

    def mark(self) -> int:
        return time.perf_counter_ns()

    def since(self, mark: int) -> float:
        return (time.perf_counter_ns() - mark) / 1_000.0


class ModelStopwatch:
    """Deterministic cost figure built from counted crypto primitives.

    Rates are nominal microseconds per operation; only relative sizes matter.
    Useful when a run must reproduce byte-identical metric files.
    """

    name = "model"
    SIGN_US = 35.0
    VERIFY_US = 110.0
    HASH_US = 0.5
    BYTE_US = 0.002

    def _total(self) -> float:
        w = crypto.WORK
        return (
            w["sign"] * self.SIGN_US
            + w["verify"] * self.VERIFY_US
            + w["hash"] * self.HASH_US
            + w["hashed_bytes"] * self.BYTE_US
        )

    def mark(self) -> float:
        return self._total()

    def since(self, mark: float) -> float:
        return round(self._total() - mark, 6)


STOPWATCHES = {"wall": WallStopwatch, "model": ModelStopwatch}


def make_stopwatch(name: str):
    try:
        return STOPWATCHES[name]()
    except KeyError:
        raise ValueError(f"unknown timer {name!r}; expected one of {sorted(STOPWATCHES)}") from None


@dataclass
class MetricsSink:
    records: list[MetricRecord] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)

    def record(self, kind: str, node: str, chain_size: int, elapsed_us: float, sim_time: float) -> None:
        if kind not in KINDS:
            raise ValueError(f"unknown metric kind {kind!r}")
        self.records.append(MetricRecord(kind, node, chain_size, max(elapsed_us, 0.0), sim_time))

    def count(self, name: str, n: int = 1) -> None:
        self.counters[name] += n

    def of_kind(self, kind: str) -> list[MetricRecord]:
        return [r for r in self.records if r.kind == kind]
