"""Cross-product sweeps over config keys, one CSV row per grid cell."""

from __future__ import annotations

import copy
import csv
import itertools
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, ExperimentConfig, set_value
from .training import SCALAR_KEYS, run

# short names accepted on the command line
ALIASES = {"lambda0": "loss.lambda0", "beta": "loss.beta", "ratio": "dataset.imbalance_ratio",
           "noise": "dataset.noise_rate"}


def parse_grid(items) -> dict[str, list[str]]:
    """``["lambda0=0.1,0.5", "beta=0.1"]`` -> ordered {config key: values}."""
    grid: dict[str, list[str]] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} must look like key=v1,v2,...")
        key, values = item.split("=", 1)
        key = ALIASES.get(key.strip(), key.strip())
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid entry {item!r} has no values")
        grid[key] = vals
    if not grid:
        raise ConfigError("sweep grid is empty")
    return grid


def cells(base: ExperimentConfig, grid: dict[str, list[str]]):
    keys = list(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        cfg = copy.deepcopy(base)
        cfg.run.out = ""
        for k, v in zip(keys, combo):
            set_value(cfg, k, v)
        cfg.validate()
        yield dict(zip(keys, combo)), cfg


def _run_cell(cfg: ExperimentConfig) -> dict:
    return run(cfg)


def sweep(base: ExperimentConfig, grid: dict[str, list[str]], out: str | Path | None = None,
          workers: int = 1) -> list[dict]:
    """Run every grid cell (in parallel when ``workers > 1``); rows keep grid order."""
    todo = list(cells(base, grid))
    cfgs = [c for _, c in todo]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(_run_cell, cfgs))
    else:
        reports = [_run_cell(c) for c in cfgs]
    rows = []
    for (point, _), rep in zip(todo, reports):
        row = dict(point)
        for k in SCALAR_KEYS:
            agg = rep["aggregate"][k]
            row[f"{k}_mean"] = None if agg is None else agg["mean"]
            row[f"{k}_std"] = None if agg is None else agg["std"]
        rows.append(row)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_table(rows, out / "sweep.csv")
    return rows


def write_table(rows: list[dict], path: Path) -> None:
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow(["" if r[k] is None else r[k] for k in keys])
