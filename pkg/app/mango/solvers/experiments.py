"""
experiments.py

The comparison grid behind `compare`: baselines against the default model,
the partition ablation, the block-count sweep and raw-versus-latent
features, each over several seeds. Produces one CSV row per (cell, seed) and
a mean/std summary row per cell.
"""

import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import pandas as pd

from mango.utils.utils import run_training, with_overrides

logger = logging.getLogger(__name__)

THREADS_ENV = "MANGO_THREADS"
METRIC_COLUMNS = ["nll_per_dim", "task_loss", "accuracy", "parameter_count", "wallclock_s"]


@dataclass(frozen=True)
class Cell:
    """One grid cell: a group label, a cell label and the config overrides it applies."""

    group: str
    label: str
    overrides: tuple

    def config(self, base: dict, seed: int) -> dict:
        return with_overrides(base, train__seed=seed, **dict(self.overrides))


def grid_cells(config: dict) -> list[Cell]:
    """Enumerate the cells configured under `compare`."""
    grid = config["compare"]
    cells = [Cell("variant", v, (("variant", v),)) for v in grid["variants"]]
    cells += [Cell("partitions", p, (("variant", "mango"), ("partitions", p))) for p in grid["partitions"]]
    cells += [Cell("blocks", str(b), (("variant", "mango"), ("blocks", b))) for b in grid["block_sweep"]]
    if grid["latent"]:
        d_latent = config["d_model"]
        d_raw = 2 * d_latent
        params = {**config["dataset_params"], "d": d_raw}
        cells.append(Cell("latent", "raw", (("variant", "mango"), ("d_model", d_raw), ("dataset_params", params),
                                            ("compressor", {"kind": "none", "k": None}))))
        cells.append(Cell("latent", "pca", (("variant", "mango"), ("d_model", d_latent), ("dataset_params", params),
                                            ("compressor", {"kind": "pca", "k": d_latent}))))
    return cells


def run_cell(cell: Cell, base: dict, seed: int) -> dict:
    """Train one (cell, seed) in a scratch directory and return its CSV row."""
    config = cell.config(base, seed)
    with tempfile.TemporaryDirectory(prefix="mango-compare-") as scratch:
        artifacts = run_training(config, scratch)
    final = artifacts.result.final
    return {
        "row": "run",
        "group": cell.group,
        "cell": cell.label,
        "variant": config["variant"],
        "partitions": config["partitions"],
        "blocks": config["blocks"],
        "compressor": config["compressor"]["kind"],
        "seed": seed,
        "nll_per_dim": final["nll_per_dim"],
        "task_loss": final.get("task_loss"),
        "accuracy": final.get("accuracy"),
        "parameter_count": artifacts.parameter_count,
        "wallclock_s": final["wallclock_s"],
        "best_step": artifacts.result.best_step,
    }


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, os.environ.get(THREADS_ENV))
        return 1


def summarize(runs: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation per (group, cell)."""
    keys = ["group", "cell", "variant", "partitions", "blocks", "compressor"]
    numeric = runs[keys + METRIC_COLUMNS].copy()
    numeric[METRIC_COLUMNS] = numeric[METRIC_COLUMNS].apply(pd.to_numeric, errors="coerce")
    grouped = numeric.groupby(keys, sort=False, dropna=False)[METRIC_COLUMNS]
    mean = grouped.mean()
    std = grouped.std(ddof=1).add_suffix("_std")
    summary = mean.join(std).reset_index()
    summary.insert(0, "row", "summary")
    summary["seed"] = pd.NA
    return summary


def run_compare(config: dict, out_csv=None, workers: int | None = None) -> pd.DataFrame:
    """Run every cell over `compare.seeds` seeds; rows are ordered by cell then seed."""
    jobs = [(cell, seed) for cell in grid_cells(config) for seed in range(config["compare"]["seeds"])]
    workers = workers or worker_count()
    logger.info("Comparing %d runs with %d worker(s)", len(jobs), workers)
    if workers == 1:
        rows = [run_cell(cell, config, seed) for cell, seed in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_cell, cell, config, seed) for cell, seed in jobs]
            rows = [f.result() for f in futures]
    runs = pd.DataFrame(rows)
    table = pd.concat([runs, summarize(runs)], ignore_index=True)
    if out_csv is not None:
        table.to_csv(out_csv, index=False, float_format="%.17g")
        logger.info("Wrote %s (%d runs, %d cells)", out_csv, len(runs), len(table) - len(runs))
    return table
