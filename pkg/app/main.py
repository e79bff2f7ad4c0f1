"""
main.py

Command-line entry point. Run from the repository root, e.g.

    python app/main.py verify --seeds 20
    python app/main.py gen-data --name correlated-gaussians --seed 0 --size 2000 --out data.mngo
    python app/main.py train --config config.json --out runs/cg
    python app/main.py eval --ckpt runs/cg/checkpoint.mngo --data data.mngo
    python app/main.py sample --ckpt runs/cg/checkpoint.mngo --count 16 --seed 7 --out samples.mngo
    python app/main.py compare --config config.json --out compare.csv
    python app/main.py export-attention --ckpt runs/cg/checkpoint.mngo --data data.mngo --layer 0 --out attn.csv

Exit codes: 0 success, 1 failed audit or run, 2 usage or configuration error.
"""

import functools
import json
import logging
from pathlib import Path

import click
import numpy as np
from rich.table import Table

from mango.errors import ConfigError, FormatError, MangoError
from mango.processing.compression import decode_tokens, encode_tokens
from mango.processing.preprocess import SyntheticDataset, generate, load_dataset, save_dataset, split_heldout
from mango.processing.validator import audit_sizes, run_audit_suite
from mango.solvers.experiments import run_compare
from mango.solvers.trainer import evaluate
from mango.utils.container import write_container
from mango.utils.logs import setup_logging, stderr_console
from mango.utils.utils import load_config, load_run, run_training

logger = logging.getLogger("mango.cli")


def handle_errors(command):
    """Map configuration/format problems to exit 2 and other package errors to exit 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ConfigError, FormatError, FileNotFoundError, IndexError) as e:
            raise click.UsageError(str(e)) from e
        except MangoError as e:
            logger.error("%s: %s", type(e).__name__, e)
            raise click.exceptions.Exit(1) from e

    return wrapper


def emit(document: dict) -> None:
    click.echo(json.dumps(document, indent=2, sort_keys=True, default=float))


def prepared_batch(run, data_path, split: str):
    """The batch `eval`/`export-attention` operate on, compressed like the training data."""
    batch, _ = load_dataset(data_path)
    if split == "heldout":
        seed = run.checkpoint.header.get("extra", {}).get("experiment", {}).get("train", {}).get("seed", 0)
        _, batch = split_heldout(batch, seed)
    if run.compressors is not None:
        batch = encode_tokens(run.compressors, batch)
    return batch


@click.group()
@click.option("-v", "--verbose", count=True, help="Show debug logging.")
@click.option("-q", "--quiet", is_flag=True, help="Only show warnings and errors.")
def cli(verbose, quiet):
    """Multimodal attention-based normalizing flows."""
    setup_logging(verbose, quiet)


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help="Experiment config; its model size is audited next to the default grid.")
@click.option("--seeds", default=20, show_default=True, type=click.IntRange(min=1))
@click.option("--inject-fault", is_flag=True, help="Double every analytic log-det (negative control).")
@click.option("--out", type=click.Path(dir_okay=False), help="Also write the JSON report here.")
@handle_errors
def verify(config_path, seeds, inject_fault, out):
    """Run the invertibility, log-det and gradient audits."""
    extra = None
    if config_path:
        config = load_config(config_path)
        extra = (2 * config["n_tokens_per_modality"], config["d_model"])
    report = run_audit_suite(seeds=seeds, inject_fault=inject_fault, sizes=audit_sizes(extra))
    document = report.to_dict()

    table = Table(title="Audit summary")
    for column in ("kind", "audits", "passed", "max roundtrip", "max rel err"):
        table.add_column(column)
    for kind in dict.fromkeys(a.kind for a in report.audits):
        rows = [a for a in report.audits if a.kind == kind]
        table.add_row(kind, str(len(rows)), str(sum(a.passed for a in rows)),
                      f"{max(a.roundtrip_err for a in rows):.2e}", f"{max(a.rel_err for a in rows):.2e}")
    stderr_console.print(table)

    if out:
        Path(out).write_text(json.dumps(document, indent=2, default=float))
    emit(document)
    if not report.passed:
        raise click.exceptions.Exit(1)


@cli.command("gen-data")
@click.option("--name", required=True)
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--size", default=2000, show_default=True, type=click.IntRange(min=0))
@click.option("--param", "params", multiple=True, help="Generator override KEY=VALUE (d, tokens, noise).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@handle_errors
def gen_data(name, seed, size, params, out):
    """Generate a synthetic dataset container and print its sha256."""
    overrides = {}
    for item in params:
        key, _, value = item.partition("=")
        if not value:
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--param")
        try:
            overrides[key] = float(value) if key == "noise" else int(value)
        except ValueError:
            raise click.BadParameter(f"{key} needs a number, got {value!r}", param_hint="--param") from None
    spec = SyntheticDataset(name, seed=seed, size=size, params=overrides)
    digest = save_dataset(generate(spec), out, spec)
    click.echo(digest)


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", default="runs/latest", show_default=True, type=click.Path(file_okay=False))
@handle_errors
def train(config_path, out):
    """Train one configuration; writes checkpoint, metrics and config under --out."""
    config = load_config(config_path)
    artifacts = run_training(config, out)
    emit({
        "checkpoint": str(artifacts.checkpoint),
        "checkpoint_sha256": artifacts.checkpoint_hash,
        "metrics": str(artifacts.metrics),
        "parameter_count": artifacts.parameter_count,
        "best_step": artifacts.result.best_step,
        "final": artifacts.result.final,
    })


@cli.command("eval")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--split", type=click.Choice(["heldout", "all"]), default="heldout", show_default=True,
              help="Evaluate on the training run's held-out split or on the whole file.")
@handle_errors
def eval_command(ckpt, data_path, split):
    """Print held-out nll/dim and task metrics for a checkpoint."""
    run = load_run(ckpt)
    batch = prepared_batch(run, data_path, split)
    emit(evaluate(run.model, run.head, batch, run.weight_task))


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--count", required=True, type=click.IntRange(min=0))
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--out", default="samples.mngo", show_default=True, type=click.Path(dir_okay=False))
@handle_errors
def sample(ckpt, count, seed, out):
    """Draw samples through the inverse flow into a tensor container."""
    run = load_run(ckpt)
    samples = run.model.sample(count, seed)
    tensors = {"samples": samples}
    if run.compressors is not None and count:
        tensors["samples_raw"] = decode_tokens(run.compressors, samples, run.model.layout)
    header = {"kind": "samples", "count": count, "seed": seed, "config": run.model.config.to_dict()}
    click.echo(write_container(out, header, tensors))


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", default="compare.csv", show_default=True, type=click.Path(dir_okay=False))
@handle_errors
def compare(config_path, out):
    """Run the comparison grid and write the CSV summary."""
    config = load_config(config_path)
    table = run_compare(config, out_csv=out)
    summary = table[table["row"] == "summary"]
    view = Table(title="Held-out nll/dim (mean ± std)")
    for column in ("group", "cell", "nll/dim", "params"):
        view.add_column(column)
    for _, row in summary.iterrows():
        std = row["nll_per_dim_std"]
        view.add_row(row["group"], str(row["cell"]),
                     f"{row['nll_per_dim']:.4f} ± {0.0 if np.isnan(std) else std:.4f}",
                     f"{row['parameter_count']:.0f}")
    stderr_console.print(view)
    click.echo(out)


@cli.command("export-attention")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--layer", "index", required=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@handle_errors
def export_attention(ckpt, data_path, index, out):
    """Write one layer's attention on the first sample as CSV, plus a JSON sidecar."""
    run = load_run(ckpt)
    batch = prepared_batch(run, data_path, "all")
    if len(batch) == 0:
        raise ConfigError("dataset is empty", "--data")
    x = run.model.embed(batch.tokens[:1], batch.pad_mask[:1]).data[0]
    attention, layer = run.model.attention_at(x, index)
    attention.to_csv(out)
    # attention mixes the x2 rows; x1 only supplies queries and keys
    conditioning, origins = layer.origins()
    boundaries = [i for i in range(1, len(origins)) if origins[i] != origins[i - 1]]
    sidecar = {
        "layer": index,
        "scheme": layer.scheme.label(),
        "origins": origins.tolist(),
        "conditioning_origins": conditioning.tolist(),
        "boundaries": boundaries,
        "n": int(attention.a.shape[0]),
    }
    Path(out).with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    click.echo(out)


if __name__ == "__main__":
    cli()
