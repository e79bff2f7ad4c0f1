import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from main import cli
from mango.utils.container import read_container


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


@pytest.fixture
def dataset(runner, tmp_path):
    path = tmp_path / "data.mngo"
    result = runner.invoke(cli, ["gen-data", "--name", "correlated-gaussians", "--seed", "0",
                                 "--size", "60", "--out", str(path)])
    assert result.exit_code == 0, result.stderr
    return path


@pytest.fixture
def trained(runner, tmp_path, dataset):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "data_path": str(dataset),
        "blocks": 1,
        "train": {"steps": 3, "batch_size": 16, "eval_every": 1, "check_every": 1},
    }))
    result = runner.invoke(cli, ["train", "--config", str(config), "--out", str(tmp_path / "run")])
    assert result.exit_code == 0, result.stderr
    return json.loads(result.stdout)


def test_gen_data_hash_is_reproducible(runner, tmp_path):
    digests = []
    for name in ("a.mngo", "b.mngo"):
        result = runner.invoke(cli, ["gen-data", "--name", "two-moons-pair", "--seed", "5", "--size", "30",
                                     "--out", str(tmp_path / name)])
        assert result.exit_code == 0
        digests.append(result.stdout.strip())
    assert digests[0] == digests[1]
    assert len(digests[0]) == 64


def test_gen_data_accepts_parameters_and_empty_sets(runner, tmp_path):
    path = tmp_path / "d.mngo"
    result = runner.invoke(cli, ["gen-data", "--name", "toy-translation", "--size", "0",
                                 "--param", "d=3", "--param", "tokens=2", "--out", str(path)])
    assert result.exit_code == 0
    _, tensors = read_container(path)
    assert tensors["tokens"].shape == (0, 4, 3)


@pytest.mark.parametrize("args", [
    ["--name", "mnist"],
    ["--name", "toy-translation", "--param", "depth=3"],
    ["--name", "toy-translation", "--param", "d"],
    ["--name", "toy-translation", "--param", "d=abc"],
    ["--name", "toy-translation", "--param", "noise=low"],
])
def test_gen_data_usage_errors(runner, tmp_path, args):
    result = runner.invoke(cli, ["gen-data", *args, "--out", str(tmp_path / "x.mngo")])
    assert result.exit_code == 2
    assert result.exception is None or isinstance(result.exception, SystemExit)


def test_invalid_config_is_a_usage_error(runner, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"train": {"lr": 0}}))
    result = runner.invoke(cli, ["train", "--config", str(config), "--out", str(tmp_path / "run")])
    assert result.exit_code == 2
    assert "train.lr" in result.stderr


def test_eval_reproduces_the_final_record(runner, trained, dataset):
    result = runner.invoke(cli, ["eval", "--ckpt", trained["checkpoint"], "--data", str(dataset)])
    assert result.exit_code == 0, result.stderr
    metrics = json.loads(result.stdout)
    assert metrics["nll_per_dim"] == pytest.approx(trained["final"]["nll_per_dim"], rel=1e-12)
    assert metrics["roundtrip_err"] < 1e-6


def test_eval_of_a_non_checkpoint_is_a_usage_error(runner, dataset):
    result = runner.invoke(cli, ["eval", "--ckpt", str(dataset), "--data", str(dataset)])
    assert result.exit_code == 2


def test_sample(runner, trained, tmp_path):
    out = tmp_path / "samples.mngo"
    result = runner.invoke(cli, ["sample", "--ckpt", trained["checkpoint"], "--count", "6", "--seed", "2",
                                 "--out", str(out)])
    assert result.exit_code == 0, result.stderr
    header, tensors = read_container(out, kind="samples")
    assert header["count"] == 6
    assert tensors["samples"].shape == (6, 8, 4)
    assert np.isfinite(tensors["samples"]).all()

    empty = tmp_path / "empty.mngo"
    result = runner.invoke(cli, ["sample", "--ckpt", trained["checkpoint"], "--count", "0", "--out", str(empty)])
    assert result.exit_code == 0
    assert read_container(empty)[1]["samples"].shape == (0, 8, 4)


def test_export_attention(runner, trained, dataset, tmp_path):
    out = tmp_path / "attention.csv"
    result = runner.invoke(cli, ["export-attention", "--ckpt", trained["checkpoint"], "--data", str(dataset),
                                 "--layer", "2", "--out", str(out)])
    assert result.exit_code == 0, result.stderr
    matrix = pd.read_csv(out, header=None).to_numpy()
    assert matrix.shape == (4, 4)
    assert np.all(np.tril(matrix, -1) == 0.0)
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-12)
    sidecar = json.loads(out.with_suffix(".json").read_text())
    assert sidecar["scheme"] == "imca1"
    assert sidecar["origins"] == ["A", "A", "B", "B"]
    assert sidecar["boundaries"] == [2]


def test_export_attention_sidecar_labels_the_attended_rows(runner, trained, dataset, tmp_path):
    out = tmp_path / "mmca.csv"
    result = runner.invoke(cli, ["export-attention", "--ckpt", trained["checkpoint"], "--data", str(dataset),
                                 "--layer", "0", "--out", str(out)])
    assert result.exit_code == 0, result.stderr
    sidecar = json.loads(out.with_suffix(".json").read_text())
    assert sidecar["scheme"] == "mmca_a_to_b"
    assert sidecar["origins"] == ["B"] * 4
    assert sidecar["conditioning_origins"] == ["A"] * 4
    assert sidecar["boundaries"] == []


def test_export_attention_layer_out_of_range(runner, trained, dataset, tmp_path):
    result = runner.invoke(cli, ["export-attention", "--ckpt", trained["checkpoint"], "--data", str(dataset),
                                 "--layer", "8", "--out", str(tmp_path / "a.csv")])
    assert result.exit_code == 2


def test_verify_with_injected_fault_exits_one(runner):
    result = runner.invoke(cli, ["-q", "verify", "--seeds", "1", "--inject-fault"])
    assert result.exit_code == 1
    assert json.loads(result.stdout)["passed"] is False


@pytest.mark.slow
def test_verify_passes(runner, tmp_path):
    out = tmp_path / "report.json"
    result = runner.invoke(cli, ["-q", "verify", "--seeds", "20", "--out", str(out)])
    assert result.exit_code == 0, result.stderr
    report = json.loads(out.read_text())
    assert report["passed"] is True
    # 9 kinds x 8 sizes, minus the 3 IMCA kinds at n=2, over 20 seeds, plus 5 gradient audits
    assert report["n_audits"] == 20 * (9 * 8 - 3 * 2) + 5
    assert report["exponent"]["verdict"] == "d"


@pytest.mark.slow
def test_verify_audits_the_configured_model_size(runner, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"d_model": 2, "n_tokens_per_modality": 3}))
    out = tmp_path / "report.json"
    result = runner.invoke(cli, ["-q", "verify", "--config", str(config), "--seeds", "1", "--out", str(out)])
    assert result.exit_code == 0, result.stderr
    audits = json.loads(out.read_text())["audits"]
    kinds = {a["kind"] for a in audits if (a["n"], a["d"]) == (6, 2)}
    assert "ica-mmca" in kinds and "ica-imca" not in kinds
