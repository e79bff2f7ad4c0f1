import pandas as pd
import pytest

from mango.solvers.experiments import grid_cells, run_compare, worker_count
from mango.utils.utils import load_config

TINY_COMPARE = {
    "dataset_size": 40,
    "blocks": 1,
    "train": {"steps": 2, "batch_size": 16, "eval_every": 1, "check_every": 1},
    "compare": {"seeds": 2, "variants": ["mango", "coupling_only"], "partitions": ["mmca"],
                "block_sweep": [1], "latent": False},
}


def test_grid_enumerates_every_group():
    config = load_config({"compare": {"block_sweep": [2, 4]}})
    groups = [cell.group for cell in grid_cells(config)]
    assert groups.count("variant") == 3
    assert groups.count("partitions") == 3
    assert groups.count("blocks") == 2
    assert groups.count("latent") == 2


def test_latent_cells_compress_twice_the_model_width():
    config = load_config()
    raw, pca = [cell for cell in grid_cells(config) if cell.group == "latent"]
    raw_config, pca_config = raw.config(config, 0), pca.config(config, 0)
    assert raw_config["d_model"] == 8 and raw_config["compressor"]["kind"] == "none"
    assert pca_config["d_model"] == 4 and pca_config["compressor"] == {"kind": "pca", "k": 4}
    assert pca_config["dataset_params"]["d"] == 8


def test_compare_writes_runs_and_summaries(tmp_path):
    out = tmp_path / "compare.csv"
    table = run_compare(load_config(TINY_COMPARE), out_csv=out, workers=1)
    runs = table[table["row"] == "run"]
    summary = table[table["row"] == "summary"]
    assert len(runs) == 8
    assert len(summary) == 4
    assert list(runs["seed"].iloc[:2]) == [0, 1]
    assert summary["nll_per_dim_std"].notna().all()

    written = pd.read_csv(out)
    assert len(written) == 12
    assert set(written["cell"].astype(str)) == {"mango", "coupling_only", "mmca", "1"}
    first = written[(written["row"] == "summary") & (written["cell"] == "mango")].iloc[0]
    mango_runs = written[(written["row"] == "run") & (written["cell"] == "mango")]
    assert first["nll_per_dim"] == pytest.approx(mango_runs["nll_per_dim"].mean(), rel=1e-12)


def test_worker_count_reads_the_environment(monkeypatch):
    monkeypatch.setenv("MANGO_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("MANGO_THREADS", "many")
    assert worker_count() == 1
    monkeypatch.delenv("MANGO_THREADS")
    assert worker_count() == 1
