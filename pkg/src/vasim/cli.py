"""Command-line entry point.

Exit codes: 0 success, 1 semantic finding (violations, failed verification),
2 usage or config error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from . import dfd, matching, sim
from .sweep import sweep, sweep_csv

EXIT_OK, EXIT_FINDING, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SEED_ENV = "VAS_SIM_SEED"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _say(args, *lines: str) -> None:
    if not args.quiet:
        for line in lines:
            print(line)


def _write(out_dir: Path, name: str, text: str) -> Path:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / name
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out_dir / name}: {exc.strerror or exc}") from None
    return path


def _resolve_seed(args) -> Optional[int]:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise CliError(EXIT_USAGE, f"{SEED_ENV} must be an integer, got {env!r}") from None


def _load_config(args) -> sim.SimConfig:
    if args.config is None:
        cfg = sim.SimConfig()
    else:
        try:
            cfg = sim.load_config(args.config)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc.strerror or exc}") from None
        except sim.ConfigError as exc:
            raise CliError(EXIT_USAGE, f"{args.config}: {exc}") from None
    seed = _resolve_seed(args)
    if seed is not None:
        try:
            cfg = sim.SimConfig.from_dict({**cfg.to_dict(), "seed": seed})
        except sim.ConfigError as exc:
            raise CliError(EXIT_USAGE, str(exc)) from None
    return cfg


def _load_diagram(path: str) -> dfd.Diagram:
    try:
        return dfd.load_diagram(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from None
    except dfd.DiagramError as exc:
        raise CliError(EXIT_USAGE, f"{path}: {exc}") from None


def _parse_seeds(text: str) -> List[int]:
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("empty seed list")
    return seeds


# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = _load_config(args)
    result = sim.run_simulation(cfg)
    out = Path(args.out_dir)
    _write(out, "trace.csv", sim.trace_csv(result))
    _write(out, "metrics.csv", sim.metrics_csv(result))
    _write(out, "config_echo.json", sim.config_json(cfg))
    _say(args, f"{cfg.rounds} rounds, {len(result.trace)} outcome records -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _load_config(args)
    try:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read grid {args.grid}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"{args.grid}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(grid, dict):
        raise CliError(EXIT_USAGE, f"{args.grid}: grid must be a JSON object of value lists")
    try:
        seeds = _parse_seeds(args.seeds) if args.seeds else [base.seed]
    except ValueError:
        raise CliError(EXIT_USAGE, f"bad --seeds value {args.seeds!r}") from None
    out = Path(args.out_dir)
    try:
        header, rows = sweep(base, grid, seeds, jobs=args.jobs, cells_dir=out / "cells")
    except sim.ConfigError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"sweep I/O failure: {exc}") from None
    _write(out, "sweep.csv", sweep_csv(header, rows))
    _say(args, f"{len(rows)} rows -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_dfd_validate(args) -> int:
    d = _load_diagram(args.diagram)
    report = dfd.validate_diagram(d)
    for v in report:
        print(f"{v.rule}: {v.message}")
    if report:
        return EXIT_FINDING
    _say(args, "valid")
    return EXIT_OK


def _require_valid(d: dfd.Diagram) -> None:
    report = dfd.validate_diagram(d)
    if report:
        for v in report:
            print(f"{v.rule}: {v.message}", file=sys.stderr)
        raise CliError(EXIT_FINDING, "diagram is invalid")


def cmd_dfd_export(args) -> int:
    d = _load_diagram(args.diagram)
    _require_valid(d)
    if args.level0:
        try:
            d = dfd.derive_context_diagram(d, args.level0.split(","))
        except dfd.DiagramError as exc:
            raise CliError(EXIT_USAGE, str(exc)) from None
    name = Path(args.diagram).stem + ("_level0" if args.level0 else "") + ".dot"
    path = _write(Path(args.out_dir), name, dfd.export_dot(d))
    _say(args, str(path))
    return EXIT_OK


def cmd_dfd_loops(args) -> int:
    d = _load_diagram(args.diagram)
    _require_valid(d)
    for cycle in dfd.detect_feedback_loops(d):
        print(" -> ".join(cycle))
    return EXIT_OK


def cmd_changelog_at(args) -> int:
    base = _load_diagram(args.base)
    try:
        log = dfd.load_changelog(args.changelog)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {args.changelog}: {exc.strerror or exc}") from None
    except dfd.DiagramError as exc:
        raise CliError(EXIT_USAGE, f"{args.changelog}: {exc}") from None
    try:
        d = dfd.reconstruct_at(log, base, args.year)
    except dfd.ChangelogError as exc:
        raise CliError(EXIT_FINDING, str(exc)) from None
    path = _write(Path(args.out_dir), f"diagram_{args.year}.json", dfd.dumps_diagram(d))
    processes = sorted(n.id for n in d.nodes_of(dfd.NodeKind.PROCESS))
    _say(args, f"{args.year}: processes {', '.join(processes) or '(none)'} -> {path}")
    return EXIT_OK


def cmd_verify_mechanisms(args) -> int:
    if args.size > matching.MAX_ENUMERATION_SCHOOLS:
        raise CliError(EXIT_USAGE,
                       f"size {args.size} exceeds the enumeration guard of "
                       f"{matching.MAX_ENUMERATION_SCHOOLS}; use a sampling harness instead")
    if args.size < 1:
        raise CliError(EXIT_USAGE, "size must be >= 1")
    counts = {}
    csv_parts = []
    for name in ("DA", "Boston"):
        start = time.perf_counter()
        found, tried = matching.exhaustive_manipulations(matching.MECHANISMS[name], args.size)
        elapsed = time.perf_counter() - start
        counts[name] = len(found)
        csv_parts.append(matching.dumps_manipulations(found, name))
        _say(args, f"{name}: {len(found)} manipulable (profile, student) pairs; "
                   f"{tried} misreports tried in {elapsed:.2f}s")
    if args.out_dir is not None:
        body = csv_parts[0] + "".join(p.split("\n", 1)[1] for p in csv_parts[1:])
        _write(Path(args.out_dir), "misreports.csv", body)
    ok = counts["DA"] == 0 and counts["Boston"] > 0
    _say(args, "strategy-proofness check " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FINDING


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="simulation config JSON")
    shared.add_argument("--seed", type=int, help=f"master seed (fallback: ${SEED_ENV})")
    shared.add_argument("--out-dir", default=".", help="directory for all written files")
    shared.add_argument("--format", choices=["csv"], default="csv")
    shared.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="vasim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[shared], help="run one simulation")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[shared], help="run a parameter grid over seeds")
    p.add_argument("--grid", required=True, help='JSON object, e.g. {"sigma": [0, 0.1]}')
    p.add_argument("--seeds", help="seed list such as 0-9 or 1,4,7 (default: config seed)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: core count)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dfd-validate", parents=[shared], help="check diagram structure")
    p.add_argument("diagram")
    p.set_defaults(func=cmd_dfd_validate)

    p = sub.add_parser("dfd-export", parents=[shared], help="write a Graphviz .dot file")
    p.add_argument("diagram")
    p.add_argument("--level0", metavar="IDS", help="comma-separated VAS node ids to collapse first")
    p.set_defaults(func=cmd_dfd_export)

    p = sub.add_parser("dfd-loops", parents=[shared], help="list feedback loops")
    p.add_argument("diagram")
    p.set_defaults(func=cmd_dfd_loops)

    p = sub.add_parser("changelog-at", parents=[shared], help="reconstruct a diagram for a year")
    p.add_argument("changelog")
    p.add_argument("--base", required=True, help="diagram before any changelog entry")
    p.add_argument("--year", type=int, required=True)
    p.set_defaults(func=cmd_changelog_at)

    p = sub.add_parser("verify-mechanisms", parents=[shared],
                       help="exhaustive strategy-proofness check for DA and Boston")
    p.add_argument("--size", "--guard", dest="size", type=int, default=3,
                   help="students and schools in the enumerated market (max 6)")
    p.set_defaults(func=cmd_verify_mechanisms, out_dir=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
