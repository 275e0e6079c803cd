"""Scaling sweeps, CSV emission, and summary statistics.

Sweeps fan out (policy, scale, seed) cells over a process pool capped by the
AOI_NEST_WORKERS environment variable. All numbers are written with 9
significant digits so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundResult, fluid_lp, relaxed_lower_bound
from .model import ScenarioConfig, scaled
from .scheduler import EpisodeMetrics, run_episode

__all__ = [
    "ExperimentPlan",
    "SummaryRow",
    "sweep_scale",
    "summary_stats",
    "emit_csv",
    "format_float",
    "worker_count",
]


def format_float(x: float) -> str:
    return f"{x:.9g}"


def worker_count(cells: int) -> int:
    env = os.environ.get("AOI_NEST_WORKERS")
    if env:
        return max(1, min(int(env), cells))
    return max(1, min(os.cpu_count() or 1, cells))


@dataclass(frozen=True)
class ExperimentPlan:
    config: ScenarioConfig
    policies: tuple[str, ...]
    scales: tuple[int, ...]
    seeds: int
    out_dir: str | None = None
    baseline: str = "lower-bound"  # or "fluid"

    def __post_init__(self) -> None:
        if not self.policies or not self.scales:
            raise ValueError("policies and scales must be non-empty")
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")
        if self.baseline not in ("lower-bound", "fluid"):
            raise ValueError(f"unknown baseline {self.baseline!r}")


@dataclass
class SummaryRow:
    policy: str
    scale: int
    mean_aoi: float
    stderr: float
    gap_pct: float
    wall_seconds: float
    seeds: int
    error: str = ""


def _run_cell(args) -> dict:
    config, policy, seed, relaxed = args
    try:
        m = run_episode(config, policy, seed, keep_series=False, relaxed=relaxed)
        return {
            "policy": policy,
            "scale": config.scale,
            "seed": seed,
            "avg_aoi": m.avg_aoi,
            "wall": m.wall_seconds,
            "error": "",
        }
    except Exception as exc:  # sweep keeps going; the row records the failure
        return {
            "policy": policy,
            "scale": config.scale,
            "seed": seed,
            "avg_aoi": float("nan"),
            "wall": 0.0,
            "error": f"{type(exc).__name__}: {exc}",
        }


def sweep_scale(
    plan: ExperimentPlan,
    bound_iters: int = 1200,
    progress=None,
) -> tuple[list[SummaryRow], dict[int, float], list[dict]]:
    """Run every (policy, scale, seed) cell; returns rows, per-scale bounds, and
    raw per-seed records. Writes sweep.csv and summary.csv when out_dir is set.
    """
    baselines: dict[int, float] = {}
    bounds: dict[int, BoundResult] = {}
    for r in plan.scales:
        cfg_r = scaled(plan.config, r) if r > 1 else plan.config
        b = relaxed_lower_bound(cfg_r, ascent_iters=bound_iters)
        bounds[r] = b
        if plan.baseline == "fluid":
            baselines[r] = fluid_lp(cfg_r).objective_per_user
        else:
            baselines[r] = b.bound_per_user
        if progress:
            progress(f"scale {r}: baseline {baselines[r]:.6g}")

    cells = []
    for r in plan.scales:
        cfg_r = scaled(plan.config, r) if r > 1 else plan.config
        for policy in plan.policies:
            relaxed = bounds[r] if policy in ("rrp", "lower-bound-replay") else None
            for seed in range(plan.seeds):
                cells.append((cfg_r, policy, seed, relaxed))

    nworkers = worker_count(len(cells))
    t0 = time.perf_counter()
    if nworkers > 1:
        with ProcessPoolExecutor(max_workers=nworkers) as pool:
            records = list(pool.map(_run_cell, cells, chunksize=1))
    else:
        records = [_run_cell(c) for c in cells]
    if progress:
        progress(f"{len(cells)} cells in {time.perf_counter() - t0:.1f}s")

    rows: list[SummaryRow] = []
    for r in plan.scales:
        for policy in plan.policies:
            recs = [
                x for x in records if x["policy"] == policy and x["scale"] == r * plan.config.scale
            ]
            good = [x for x in recs if not x["error"]]
            errs = [x for x in recs if x["error"]]
            vals = np.array([x["avg_aoi"] for x in good])
            if vals.size:
                mean = float(vals.mean())
                se = (
                    float(vals.std(ddof=1) / np.sqrt(vals.size))
                    if vals.size > 1
                    else 0.0
                )
            else:
                mean, se = float("nan"), float("nan")
            gap = (mean - baselines[r]) / baselines[r] * 100.0
            rows.append(
                SummaryRow(
                    policy=policy,
                    scale=r,
                    mean_aoi=mean,
                    stderr=se,
                    gap_pct=gap,
                    wall_seconds=float(sum(x["wall"] for x in recs)),
                    seeds=len(good),
                    error="; ".join(x["error"] for x in errs),
                )
            )

    if plan.out_dir:
        os.makedirs(plan.out_dir, exist_ok=True)
        emit_csv(
            os.path.join(plan.out_dir, "sweep.csv"),
            ["policy", "scale", "mean_aoi", "stderr", "gap_pct", "wall_seconds", "seeds"],
            [
                [
                    row.policy,
                    row.scale,
                    format_float(row.mean_aoi),
                    format_float(row.stderr),
                    format_float(row.gap_pct),
                    format_float(row.wall_seconds),
                    row.seeds,
                ]
                for row in rows
            ],
        )
        emit_csv(
            os.path.join(plan.out_dir, "summary.csv"),
            ["policy", "scale", "seed", "avg_aoi"],
            [
                [x["policy"], x["scale"], x["seed"], format_float(x["avg_aoi"])]
                for x in records
                if not x["error"]
            ],
        )
    return rows, baselines, records


def summary_stats(values) -> tuple[float, float]:
    """Across-seed mean and standard error."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("no values to summarize")
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return mean, se


def emit_csv(path: str, header: list[str], rows: list[list]) -> None:
    """UTF-8, LF line endings, deterministic order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")


def write_timeseries_csv(path: str, num_servers: int):
    """Streaming writer callback for run_episode."""
    fh = open(path, "w", encoding="utf-8", newline="\n")
    fh.write("t,mean_age," + ",".join(f"nu_{m+1}" for m in range(num_servers)) + ",completions\n")

    def write(t: int, mean_age: float, nu, completions: int) -> None:
        fh.write(
            f"{t},{format_float(mean_age)},"
            + ",".join(format_float(v) for v in nu)
            + f",{completions}\n"
        )

    write.close = fh.close  # type: ignore[attr-defined]
    return write


def simulate_to_dir(
    config: ScenarioConfig,
    policy: str,
    seeds: list[int],
    out_dir: str,
    relaxed: BoundResult | None = None,
) -> list[EpisodeMetrics]:
    """Run episodes writing per-seed timeseries CSVs plus summary.csv."""
    os.makedirs(out_dir, exist_ok=True)
    metrics = []
    for i, seed in enumerate(seeds):
        name = "timeseries.csv" if i == 0 else f"timeseries_seed{seed}.csv"
        writer = write_timeseries_csv(os.path.join(out_dir, name), config.num_servers)
        try:
            m = run_episode(
                config, policy, seed, keep_series=True, timeseries_writer=writer,
                relaxed=relaxed,
            )
        finally:
            writer.close()
        if i == 0 and len(seeds) > 1:
            # keep the canonical name and a per-seed alias
            import shutil

            shutil.copyfile(
                os.path.join(out_dir, "timeseries.csv"),
                os.path.join(out_dir, f"timeseries_seed{seed}.csv"),
            )
        metrics.append(m)
    emit_csv(
        os.path.join(out_dir, "summary.csv"),
        ["policy", "scale", "seed", "avg_aoi"],
        [
            [m.policy, m.scale, m.seed, format_float(m.avg_aoi)]
            for m in metrics
        ],
    )
    return metrics
