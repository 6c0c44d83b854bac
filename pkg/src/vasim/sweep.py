"""Parameter sweeps: grid x seeds, one independent simulation per cell.

Cells run in worker processes and are merged by a deterministic sort, so the
table does not depend on worker count or scheduling. With a cells directory,
each finished cell leaves a CSV plus a ``.done`` marker and is skipped on the
next invocation.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import os
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .sim import ConfigError, SimConfig, fmt, low_share_at, run_simulation

METRIC_COLUMNS = ("round", "mae", "rmse", "gini", "disparate_impact", "mean_outcome", "low_share_strategic")


def cell_id(cfg: SimConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def expand_grid(base: SimConfig, grid: Mapping[str, Sequence], seeds: Sequence[int]) -> List[Tuple[Dict, int, SimConfig]]:
    """Cartesian product of grid values (in key order) and seeds."""
    if not grid:
        raise ConfigError(["sweep grid must name at least one parameter"])
    known = {f.name for f in fields(SimConfig)} - {"seed"}
    bad = [k for k in grid if k not in known]
    if bad:
        raise ConfigError([f"unknown grid parameter {k!r}" for k in bad])
    empty = [k for k, v in grid.items() if not v]
    if empty:
        raise ConfigError([f"grid parameter {k!r} has no values" for k in empty])
    names = list(grid)
    cells = []
    for values in itertools.product(*(grid[k] for k in names)):
        params = dict(zip(names, values))
        for seed in seeds:
            cfg = replace(base, **params, seed=seed)
            cfg.validate()
            cells.append((params, seed, cfg))
    return cells


def run_cell(cfg: SimConfig) -> List[List[str]]:
    """Formatted metric rows for one run, one per round."""
    result = run_simulation(cfg)
    strategic = list(cfg.strategic_schools)
    out = []
    for row in result.rows:
        outcomes = [r.outcome for r in result.trace if r.round == row.round]
        out.append([
            str(row.round), fmt(row.mae), fmt(row.rmse), fmt(row.gini), fmt(row.disparate_impact),
            fmt(sum(outcomes) / len(outcomes)),
            fmt(low_share_at(result.trace, row.round, strategic)) if strategic else "nan",
        ])
    return out


def _read_cell(path: Path) -> List[List[str]]:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]


def _write_cell(path: Path, rows: List[List[str]]) -> None:
    tmp = path.with_suffix(".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)
    tmp.replace(path)
    path.with_suffix(".done").touch()


def _param_text(value) -> str:
    return value if isinstance(value, str) else json.dumps(value)


def sweep(
    base: SimConfig,
    grid: Mapping[str, Sequence],
    seeds: Sequence[int],
    jobs: Optional[int] = None,
    cells_dir: Optional[Path] = None,
    shuffle: Optional[int] = None,
) -> Tuple[List[str], List[List[str]]]:
    """Run every (grid point, seed) cell; return the long-format header and rows."""
    cells = expand_grid(base, grid, seeds)
    todo = list(range(len(cells)))
    if shuffle is not None:
        random.Random(shuffle).shuffle(todo)

    results: Dict[int, List[List[str]]] = {}
    pending = []
    for i in todo:
        cid = cell_id(cells[i][2])
        if cells_dir is not None and (cells_dir / f"{cid}.done").exists():
            results[i] = _read_cell(cells_dir / f"{cid}.csv")
        else:
            pending.append(i)

    jobs = jobs or os.cpu_count() or 1
    configs = [cells[i][2] for i in pending]
    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            computed = list(pool.map(run_cell, configs))
    else:
        computed = [run_cell(c) for c in configs]
    for i, rows in zip(pending, computed):
        results[i] = rows
        if cells_dir is not None:
            cells_dir.mkdir(parents=True, exist_ok=True)
            _write_cell(cells_dir / f"{cell_id(cells[i][2])}.csv", rows)

    names = list(grid)
    header = names + ["seed"] + list(METRIC_COLUMNS)
    table = []
    # Cells are already in grid x seed order; index order is the deterministic sort.
    for i in range(len(cells)):
        params, seed, _ = cells[i]
        prefix = [_param_text(params[k]) for k in names] + [str(seed)]
        table.extend(prefix + row for row in results[i])
    return header, table


def sweep_csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
