"""Command line entry point: ``speedychain run|grid|attack``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import ATTACKS, GRID_SIZES, GRID_TX, Scenario, run_attack, run_grid, run_scenario


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise argparse.ArgumentTypeError(f"--set expects key=value, got {pair!r}")
        out[key] = _value(value)
    return out


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _scenario(args) -> Scenario:
    base = Scenario.load(args.scenario) if args.scenario else Scenario()
    changes = _overrides(args.set)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.timer is not None:
        changes["timer"] = args.timer
    return base.override(**changes) if changes else base


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speedychain", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--timer", choices=("wall", "model"), help="stopwatch used for metrics")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a scenario field")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run one scenario file")
    run.add_argument("scenario", type=Path, help="scenario JSON file")

    grid = sub.add_parser("grid", parents=[common], help="run the 3x3 blockchain-size by transaction sweep")
    grid.add_argument("--scenario", type=Path, help="base scenario JSON file")
    grid.add_argument("--sizes", type=_ints, default=GRID_SIZES)
    grid.add_argument("--tx", type=_ints, default=GRID_TX)
    grid.add_argument("--repeats", type=int, default=2, help="timing passes; each operation keeps its fastest")

    attack = sub.add_parser("attack", parents=[common], help="run an attack drill over several seeds")
    attack.add_argument("kind", choices=ATTACKS)
    attack.add_argument("--scenario", type=Path, help="base scenario JSON file")
    attack.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        scenario = _scenario(args)
    except (ValueError, TypeError, OSError, argparse.ArgumentTypeError) as exc:
        parser.error(str(exc))

    if args.command == "run":
        result = run_scenario(scenario)
        if args.out:
            result.write(args.out)
        _line(scenario.name, result.passed, result.checks)
        return 0 if result.passed else 1

    if args.command == "grid":
        grid = run_grid(scenario, sizes=args.sizes, txs=args.tx, out=args.out, repeats=args.repeats)
        for (n, t), cell in sorted(grid.cells.items()):
            _line(f"blocks={n} tx={t}", cell.passed, cell.checks)
        for name, why in grid.failures.items():
            print(f"{name}: {why}")
        print("pass durations: " + ", ".join(f"{t:.0f}s" for t in grid.pass_seconds))
        return 0 if grid.passed else 1

    ok = True
    for i in range(args.seeds):
        s = scenario.override(seed=scenario.seed + i)
        result = run_attack(args.kind, s)
        if args.out:
            result.write(args.out / f"{args.kind}_seed{s.seed}")
        _line(f"{args.kind} seed={s.seed}", result.passed, result.checks)
        ok &= result.passed
    return 0 if ok else 1


def _line(label: str, passed: bool, checks: dict[str, bool]) -> None:
    failed = [k for k, v in checks.items() if not v]
    print(f"{'PASS' if passed else 'FAIL'} {label}" + (f" (failed: {', '.join(failed)})" if failed else ""))


if __name__ == "__main__":
    sys.exit(main())
