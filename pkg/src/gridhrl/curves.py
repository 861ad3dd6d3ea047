"""Aggregate per-seed eval logs into score and steps curves on a common step grid."""

from __future__ import annotations

import csv
import warnings
from pathlib import Path

import numpy as np


def read_curve(path, value: str = "score_mean") -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    steps = np.array([int(r["env_steps"]) for r in rows], dtype=np.int64)
    vals = np.array([float(r[value]) for r in rows], dtype=np.float64)
    return steps, vals


def forward_fill(steps: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Value of the latest logged point at or before each grid step (NaN before the first)."""
    idx = np.searchsorted(steps, grid, side="right") - 1
    out = np.where(idx >= 0, values[np.clip(idx, 0, None)], np.nan)
    return out


def trailing_mean(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return values
    out = np.empty_like(values)
    for i in range(len(values)):
        out[i] = np.nanmean(values[max(0, i - window + 1) : i + 1])
    return out


def aggregate(curves: list[tuple[np.ndarray, np.ndarray]], smooth: int = 0):
    """Mean and std across seeds on the union of logged steps, cut at the common prefix."""
    if not curves:
        raise ValueError("no curves to aggregate")
    end = min(int(s[-1]) for s, _ in curves if len(s))
    if any(int(s[-1]) != end for s, _ in curves):
        warnings.warn(f"runs have different lengths; truncating to the common prefix ending at step {end}")
    grid = np.unique(np.concatenate([s[s <= end] for s, _ in curves]))
    filled = np.stack([trailing_mean(forward_fill(s, v, grid), smooth) for s, v in curves])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return grid, np.nanmean(filled, axis=0), np.nanstd(filled, axis=0)


def find_runs(root) -> dict[str, list[Path]]:
    """Map method name to the eval logs of its runs (directories holding ``config.txt``)."""
    runs: dict[str, list[Path]] = {}
    for cfg_path in sorted(Path(root).rglob("config.txt")):
        ev = cfg_path.parent / "eval.csv"
        if not ev.exists():
            continue
        method = "unknown"
        for line in cfg_path.read_text().splitlines():
            if line.startswith("method="):
                method = line.split("=", 1)[1].strip()
        runs.setdefault(method, []).append(ev)
    return runs


def export_curves(root, out_path, smooth: int = 0) -> tuple[Path, Path]:
    """Write ``<out>`` (scores) and ``<out stem>_steps.csv`` (episode lengths)."""
    runs = find_runs(root)
    if not runs:
        raise FileNotFoundError(f"no runs with eval.csv under {root}")
    out_path = Path(out_path)
    steps_path = out_path.with_name(out_path.stem + "_steps" + (out_path.suffix or ".csv"))
    for value, prefix, path in (("score_mean", "score", out_path), ("steps_mean", "steps", steps_path)):
        cols, grids = {}, []
        for method, paths in sorted(runs.items()):
            grid, mean, std = aggregate([read_curve(p, value) for p in paths], smooth)
            cols[method] = (grid, mean, std)
            grids.append(grid)
        grid = np.unique(np.concatenate(grids))
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step"] + [f"{m}_{prefix}_{k}" for m in cols for k in ("mean", "std")])
            table = [grid]
            for g, mean, std in cols.values():
                table += [forward_fill(g, mean, grid), forward_fill(g, std, grid)]
            for row in zip(*table):
                w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
    return out_path, steps_path
