"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import csv
import dataclasses
import time

import pytest

from builders import block_with_transactions, seeded_keys, tamper_variants
from conftest import record_criterion
from speedychain import crypto
from speedychain.harness import (
    ATTACKS,
    GRID_SIZES,
    GRID_TX,
    Scenario,
    bootstrap_all,
    build_network,
    rsi_position,
    run_attack,
    run_grid,
    run_scenario,
)
from speedychain.ledger import (
    BlockHeader,
    DeviceBlock,
    Geotag,
    append_transaction,
    header_hash,
    make_transaction,
    signature_ok,
    tx_digest,
    validate_block,
    validate_chain,
)
from speedychain.simnet import MobilityTrace, Partition

GRID_BUDGET_S = 600.0


def header_variants(h: BlockHeader) -> dict[str, BlockHeader]:
    flip = lambda b: bytes([b[0] ^ 1]) + b[1:]  # noqa: E731
    return {
        "device_pk": dataclasses.replace(h, device_pk=flip(h.device_pk)),
        "prev_header_hash": dataclasses.replace(h, prev_header_hash=flip(h.prev_header_hash)),
        "expiration": dataclasses.replace(h, expiration=h.expiration + 1),
        "created_at": dataclasses.replace(h, created_at=h.created_at + 1),
        "access_level": dataclasses.replace(h, access_level=(h.access_level + 1) % 3),
    }


def test_criterion_1_tamper_sweep():
    kp = seeded_keys(1, seed=100)[0]
    start = time.perf_counter()
    misses, checked = [], 0
    for n_tx in range(21):
        block = block_with_transactions(n_tx, kp)
        assert validate_block(block)
        for field, header in header_variants(block.header).items():
            checked += 1
            if validate_block(DeviceBlock(header, list(block.ledger))):
                misses.append((n_tx, "header", field))
        for pos, tx in enumerate(block.ledger):
            for field, mutated in tamper_variants(tx).items():
                copy = block.snapshot()
                copy.ledger[pos] = mutated
                checked += 1
                if validate_block(copy):
                    misses.append((n_tx, pos, field))
    elapsed = time.perf_counter() - start
    ok = not misses and elapsed < 10.0
    record_criterion(1, "ledger tamper sweep", ok, f"{checked} mutations, {len(misses)} missed, {elapsed:.2f}s")
    assert not misses
    assert elapsed < 10.0


def test_criterion_2_header_independent_of_ledger():
    kp = seeded_keys(1, seed=101)[0]
    block = block_with_transactions(0, kp, window=10_000_000)
    before = header_hash(block.header)
    for i in range(1_000):
        tx = make_transaction(kp, block.tail_hash, b"%d" % i, Geotag(1.0, 2.0), now=i + 1)
        append_transaction(block, tx, now=i + 1)
    stable = header_hash(block.header) == before and len(block) == 1_001 and validate_block(block)
    changed = {f: header_hash(h) != before for f, h in header_variants(block.header).items()}
    ok = stable and all(changed.values())
    record_criterion(2, "header hash independent of ledger", ok, f"stable={stable}, fields changing hash={sum(changed.values())}/5")
    assert stable
    assert all(changed.values()), changed


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    start = time.perf_counter()
    result = run_grid(Scenario(timer="wall"), out=out, repeats=2)
    return result, time.perf_counter() - start, out


@pytest.mark.slow
def test_criterion_3_grid_completes(grid):
    result, elapsed, _ = grid
    expected = {(n, t) for n in GRID_SIZES for t in GRID_TX}
    cells = {
        k: c.checks["quiescent"] and c.checks["chains_identical"] and len(set(c.report.chain_digests.values())) == 1
        for k, c in result.cells.items()
    }
    fifteen = all(len(c.report.chain_digests) == 15 for c in result.cells.values())
    # each timing pass is one full grid; the budget applies to a full grid
    in_budget = len(result.pass_seconds) == 2 and max(result.pass_seconds) < GRID_BUDGET_S
    ok = set(cells) == expected and all(cells.values()) and fifteen and result.passed and in_budget
    passes = " + ".join(f"{t:.0f}s" for t in result.pass_seconds)
    record_criterion(3, "9-cell grid converges", ok, f"{sum(cells.values())}/9 cells, passes {passes}, total {elapsed:.0f}s")
    assert set(cells) == expected, result.failures
    assert all(cells.values()) and fifteen
    assert result.passed, result.failures
    assert in_budget, result.pass_seconds


@pytest.mark.slow
def test_criterion_4_scaling_shape(grid):
    result, _, _ = grid
    m = result.mean
    tx_rows = all(m("tx_add", n, a) <= m("tx_add", n, b) for n in GRID_SIZES for a, b in zip(GRID_TX, GRID_TX[1:]))
    tx_cols = all(m("tx_add", a, t) <= m("tx_add", b, t) for t in GRID_TX for a, b in zip(GRID_SIZES, GRID_SIZES[1:]))
    ratios = {(n, t): m("block_add", n, t) / m("tx_add", n, t) for n in GRID_SIZES for t in GRID_TX}
    block_over_tx = all(r > 1 for r in ratios.values())
    merkle = all(
        m("merkle_build", n, a) < m("merkle_build", n, b) for n in GRID_SIZES for a, b in zip(GRID_TX, GRID_TX[1:])
    )
    ok = tx_rows and tx_cols and block_over_tx and merkle
    detail = f"tx_add by tx={tx_rows}, by size={tx_cols}, min block/tx={min(ratios.values()):.2f}, merkle increasing={merkle}"
    record_criterion(4, "scaling shape", ok, detail)
    assert tx_rows and tx_cols
    assert block_over_tx, ratios
    assert merkle


@pytest.mark.slow
def test_grid_writes_one_csv_per_kind(grid):
    _, _, out = grid
    for kind in ("block_add", "tx_add", "peer_block_update", "peer_tx_update", "merkle_build"):
        with open(out / f"{kind}.csv") as fp:
            assert len(list(csv.reader(fp))) == 10


SEEDS = range(1, 6)


def test_criterion_5_attacks():
    outcomes = {}
    for kind in ATTACKS:
        for seed in SEEDS:
            r = run_attack(kind, Scenario(seed=seed))
            outcomes[(kind, seed)] = r
    failed = [f"{k}/seed{s}: {[c for c, v in r.checks.items() if not v]}" for (k, s), r in outcomes.items() if not r.passed]
    record_criterion(5, "attack suite over 5 seeds", not failed, f"{len(outcomes) - len(failed)}/{len(outcomes)} runs pass")
    assert not failed, failed


def _structural(block: DeviceBlock) -> set[bytes]:
    out = {block.header.device_pk, block.header.prev_header_hash, header_hash(block.header)}
    for tx in block.ledger:
        out |= {tx.prev_tx_hash, tx.signature, tx_digest(tx)}
    return out


def test_criterion_6_key_rotation():
    s = Scenario(blockchain_size=5, expiration_window=3_000, kui_period=1_000)
    net = build_network(s)
    vehicles = list(net.vehicles.values())
    rotators, bystander = vehicles[:-1], vehicles[-1]
    bootstrap_all(net, ids=[v.id for v in rotators])
    bootstrap_all(net, at=500.0, ids=[bystander.id])  # joins last, so no rotator's old block is the tip
    net.sim.run_until_quiescent(max_time=1_500)
    old = {v.id: (v.keypair.public, v.merkle_root, v.membership_proof) for v in rotators}
    for v in rotators:
        net.sim.wake(v.id, 1_600, "rotate")

    owners = {pk: v.id for v in vehicles for pk in [*v.past_keys, v.keypair.public]}
    one_active = True
    t = 1_500.0
    while t < 5_500:
        t += 100
        net.sim.run_until_quiescent(max_time=t)
        for v in vehicles:
            owners[v.keypair.public] = v.id
        for r in net.rsis.values():
            live = [owners[b.device_pk] for b in r.chain.blocks[1:] if b.header.expiration >= t]
            one_active &= len(live) == len(set(live))
    per_vehicle = {
        v.id: sum(b.header.expiration >= t for b in net.rsis["rsi-00"].chain.blocks if owners.get(b.device_pk) == v.id)
        for v in rotators
    }
    one_active &= all(c == 1 for c in per_vehicle.values())

    old_fails, new_ok, unlinked, rotated = True, True, True, True
    for v in rotators:
        old_pk, old_root, old_proof = old[v.id]
        rotated &= v.keypair.public != old_pk and old_proof is not None
        rotated &= crypto.merkle_verify(old_root, crypto.digest(old_pk), old_proof)
        old_fails &= not crypto.merkle_verify(v.merkle_root, crypto.digest(old_pk), old_proof)
        new_ok &= v.membership_proof is not None and crypto.merkle_verify(
            v.merkle_root, crypto.digest(v.keypair.public), v.membership_proof
        )
        for r in net.rsis.values():
            a, b = r.chain.find_block(old_pk), r.chain.find_block(v.keypair.public)
            unlinked &= a is not None and b is not None and not (_structural(a) & _structural(b))
    valid = all(validate_chain(r.chain) for r in net.rsis.values()) and net.chains_identical()
    ok = rotated and old_fails and new_ok and one_active and unlinked and valid
    detail = f"old proof fails={old_fails}, new proof verifies={new_ok}, one active block={one_active}, unlinked={unlinked}"
    record_criterion(6, "key rotation", ok, detail)
    assert rotated and valid
    assert old_fails and new_ok
    assert one_active, per_vehicle
    assert unlinked


def _rows_without_elapsed(path):
    with open(path) as fp:
        return [row[:-1] for row in csv.reader(fp)]


def test_criterion_7_determinism(tmp_path):
    runs = {
        "scenario": lambda timer: run_scenario(Scenario(blockchain_size=20, tx_per_vehicle=20, seed=7, timer=timer)),
        "lossy": lambda timer: run_scenario(
            Scenario(blockchain_size=10, tx_per_vehicle=5, seed=8, drop_probability=0.05, timer=timer)
        ),
        "attack": lambda timer: run_attack("malicious_rsi", Scenario(blockchain_size=10, tx_per_vehicle=5, seed=9, timer=timer)),
    }
    mismatches = []
    for name, make in runs.items():
        for timer in ("model", "wall"):
            for rep in ("a", "b"):
                make(timer).write(tmp_path / name / timer / rep)
            a, b = tmp_path / name / timer / "a", tmp_path / name / timer / "b"
            if timer == "model":
                for f in ("metrics.csv", "summary.json", "report.json"):
                    if (a / f).read_bytes() != (b / f).read_bytes():
                        mismatches.append(f"{name}/{timer}/{f}")
            else:
                if (a / "report.json").read_bytes() != (b / "report.json").read_bytes():
                    mismatches.append(f"{name}/wall/report.json")
                if _rows_without_elapsed(a / "metrics.csv") != _rows_without_elapsed(b / "metrics.csv"):
                    mismatches.append(f"{name}/wall/metrics.csv columns")
    record_criterion(7, "determinism", not mismatches, ", ".join(mismatches) or "byte-identical re-runs")
    assert not mismatches


K = 10


def _partition_case():
    s = Scenario(blockchain_size=1, kui_period=0)
    net = build_network(s, partitions=[Partition(1_000, 3_000, frozenset({"veh-0000"}))])
    v = net.vehicles["veh-0000"]
    bootstrap_all(net)
    for k in range(K):
        net.sim.wake(v.id, 1_100 + 10 * k, "emit", b"buffered-%d" % k)
    net.sim.run_until_quiescent(max_time=2_000)
    buffered = len(v.outbox)
    net.run()
    return net, v, buffered == K and not v.outbox


def _mule_case():
    s = Scenario(blockchain_size=2, kui_period=0)
    hx, hy = rsi_position(s, 0)
    trace = (
        MobilityTrace()
        .add("veh-0000", 0, hx + 5, hy)
        .add("veh-0000", 500, hx - 260, hy)  # leaves every RSI's range
        .add("veh-0001", 0, hx - 180, hy)  # stays in range of rsi-00, 80 m from veh-0000
    )
    net = build_network(s, mobility=trace)
    v, mule = net.vehicles["veh-0000"], net.vehicles["veh-0001"]
    bootstrap_all(net)
    for k in range(K):
        net.sim.wake(v.id, 600 + 10 * k, "emit", b"mule-%d" % k)
    net.run()
    return net, v, v.counters["tx_forwarded"] == K and mule.counters["mule_delivered"] == K


def test_criterion_8_partition_and_mule():
    results = {}
    for name, case, prefix in (("flush", _partition_case, b"buffered-"), ("mule", _mule_case, b"mule-")):
        net, v, path_ok = case()
        in_order = True
        for r in net.rsis.values():
            block = r.chain.find_block(v.keypair.public)
            in_order &= [t.payload for t in block.ledger[1:]] == [prefix + b"%d" % k for k in range(K)]
            in_order &= all(signature_ok(v.keypair.public, t) for t in block.ledger)
        valid = all(validate_chain(r.chain) for r in net.rsis.values()) and net.chains_identical()
        results[name] = path_ok and in_order and valid
    record_criterion(8, "partition buffering and mule forwarding", all(results.values()), str(results))
    assert all(results.values()), results
