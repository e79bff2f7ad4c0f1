"""
utils.py

Experiment configuration (defaults, JSON-schema validation) and the
orchestration shared by the CLI commands: prepare data, build the model and
head, train, and write the run artifacts.
"""

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from mango.errors import ConfigError
from mango.flows.model import PARTITIONS, VARIANTS, Checkpoint, ModelConfig, build_model, read_checkpoint, save_checkpoint
from mango.processing.compression import CompressorPair, encode_tokens, fit_pair
from mango.processing.preprocess import (
    DATASETS,
    SyntheticDataset,
    TokenBatch,
    generate,
    load_dataset,
    split_heldout,
)
from mango.processing.tasks import TASK_KINDS, TaskHead
from mango.solvers.trainer import TrainConfig, TrainResult, config_record, train
from mango.utils.seeding import rng_stream

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.mngo"
METRICS_NAME = "metrics.jsonl"
CONFIG_NAME = "config.json"

DEFAULT_CONFIG = {
    "dataset": "correlated-gaussians",
    "dataset_size": 2000,
    "dataset_params": {},
    "data_path": None,
    "d_model": 4,
    "n_tokens_per_modality": 4,
    "blocks": 2,
    "variant": "mango",
    "partitions": "mmca+imca+lica",
    "compressor": {"kind": "none", "k": None},
    "train": {
        "steps": 2000,
        "batch_size": 64,
        "lr": 1e-3,
        "seed": 0,
        "weight_task": 1.0,
        "grad_clip": 5.0,
        "eval_every": 100,
        "check_every": 100,
    },
    "task": {"kind": "none"},
    "compare": {
        "seeds": 3,
        "variants": list(VARIANTS),
        "partitions": list(PARTITIONS),
        "block_sweep": [2, 4, 6, 8],
        "latent": True,
    },
}

_POSITIVE_INT = {"type": "integer", "minimum": 1}
_NON_NEGATIVE_INT = {"type": "integer", "minimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {"enum": list(DATASETS)},
        "dataset_size": _NON_NEGATIVE_INT,
        "dataset_params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"d": _POSITIVE_INT, "tokens": _POSITIVE_INT, "noise": {"type": "number", "minimum": 0}},
        },
        "data_path": {"type": ["string", "null"]},
        "d_model": _POSITIVE_INT,
        "n_tokens_per_modality": _POSITIVE_INT,
        "blocks": _NON_NEGATIVE_INT,
        "variant": {"enum": list(VARIANTS)},
        "partitions": {"enum": list(PARTITIONS)},
        "compressor": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["none", "pca", "autoencoder"]},
                "k": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": _NON_NEGATIVE_INT,
                "batch_size": _POSITIVE_INT,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "seed": _NON_NEGATIVE_INT,
                "weight_task": {"type": "number", "minimum": 0},
                "grad_clip": {"type": "number", "minimum": 0},
                "eval_every": _POSITIVE_INT,
                "check_every": _POSITIVE_INT,
            },
        },
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"kind": {"enum": ["none", *TASK_KINDS]}},
        },
        "compare": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seeds": _POSITIVE_INT,
                "variants": {"type": "array", "items": {"enum": list(VARIANTS)}},
                "partitions": {"type": "array", "items": {"enum": list(PARTITIONS)}},
                "block_sweep": {"type": "array", "items": _POSITIVE_INT},
                "latent": {"type": "boolean"},
            },
        },
    },
}

_VALIDATOR = Draft202012Validator(CONFIG_SCHEMA)


def deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def validate_config(config: dict) -> dict:
    """Raise ConfigError naming the JSON path of the first schema violation."""
    errors = sorted(_VALIDATOR.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        error = errors[0]
        path = ".".join(str(p) for p in error.absolute_path) or "<root>"
        raise ConfigError(error.message, path)
    return config


def load_config(source=None) -> dict:
    """Defaults deep-merged with a JSON file (or dict), then validated."""
    if source is None:
        overrides = {}
    elif isinstance(source, dict):
        overrides = source
    else:
        try:
            overrides = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"not valid JSON: {e}", str(source)) from None
    if not isinstance(overrides, dict):
        raise ConfigError("config must be a JSON object", "<root>")
    # validate the file itself first so unknown keys are reported as written
    validate_config(deep_merge({}, overrides))
    return validate_config(deep_merge(DEFAULT_CONFIG, overrides))


def model_config(config: dict) -> ModelConfig:
    return ModelConfig(
        d_model=config["d_model"],
        n_tokens_per_modality=config["n_tokens_per_modality"],
        blocks=config["blocks"],
        variant=config["variant"],
        partitions=config["partitions"],
        seed=config["train"]["seed"],
    )


def train_config(config: dict) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        steps=t["steps"],
        batch_size=t["batch_size"],
        learning_rate=t["lr"],
        grad_clip_norm=t["grad_clip"],
        eval_every=min(t["eval_every"], t["steps"]) if t["steps"] else t["eval_every"],
        check_every=t["check_every"],
        seed=t["seed"],
        weight_task=t["weight_task"],
    ).validate()


def dataset_spec(config: dict) -> SyntheticDataset:
    """Token width and count default to the model's unless dataset_params override them."""
    compressing = config["compressor"]["kind"] != "none"
    params = {"tokens": config["n_tokens_per_modality"]}
    if not compressing:
        params["d"] = config["d_model"]
    params.update(config["dataset_params"])
    return SyntheticDataset(config["dataset"], seed=config["train"]["seed"], size=config["dataset_size"], params=params)


# -----------------------------
# Orchestration
# -----------------------------

@dataclass
class PreparedData:
    """Model-ready splits plus the compressors that produced them (if any)."""

    train: TokenBatch
    heldout: TokenBatch
    compressors: CompressorPair | None = None


def prepare_data(config: dict) -> PreparedData:
    """Generate or load the dataset, split it, and fit/apply compression on the training part."""
    if config.get("data_path"):
        batch, _ = load_dataset(config["data_path"])
    else:
        batch = generate(dataset_spec(config))
    train_part, heldout = split_heldout(batch, config["train"]["seed"])
    compressors = None
    kind = config["compressor"]["kind"]
    if kind != "none":
        k = config["compressor"]["k"] or batch.d // 2
        compressors = fit_pair(kind, train_part, k, seed=config["train"]["seed"])
        train_part, heldout = encode_tokens(compressors, train_part), encode_tokens(compressors, heldout)
    if train_part.d != config["d_model"]:
        raise ConfigError(f"data token width is {train_part.d} but d_model is {config['d_model']}", "d_model")
    if train_part.layout.m != config["n_tokens_per_modality"]:
        raise ConfigError(f"data has {train_part.layout.m} tokens per modality but the model expects "
                          f"{config['n_tokens_per_modality']}", "n_tokens_per_modality")
    return PreparedData(train_part, heldout, compressors)


def build_head(config: dict, batch: TokenBatch) -> TaskHead | None:
    kind = config["task"]["kind"]
    if kind == "none":
        return None
    rng = rng_stream(config["train"]["seed"], "init-head")
    if kind == "classification":
        if batch.labels is None:
            raise ConfigError("classification needs a labelled dataset", "task.kind")
        classes = int(np.max(batch.labels)) + 1 if len(batch) else 2
        return TaskHead("classification", config["d_model"], max(classes, 2), rng)
    if batch.targets is None:
        raise ConfigError("translation needs a dataset with targets", "task.kind")
    return TaskHead("translation", config["d_model"], config["d_model"], rng)


@dataclass
class RunArtifacts:
    result: TrainResult
    checkpoint: Path
    metrics: Path
    checkpoint_hash: str
    parameter_count: int


def run_training(config: dict, out_dir, prepared: PreparedData | None = None) -> RunArtifacts:
    """Train one configuration and write checkpoint, metrics and config under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepared or prepare_data(config)
    model = build_model(model_config(config))
    head = build_head(config, prepared.train)
    metrics_path = out / METRICS_NAME
    result = train(model, head, prepared.train, prepared.heldout, train_config(config), metrics_path=metrics_path)

    extra_tensors = {}
    extra = {"best_step": result.best_step, "final": result.final, "train": config_record(train_config(config)),
             "experiment": config}
    if head is not None:
        extra["head"] = head.to_dict()
        extra_tensors.update(head.state_dict())
    if prepared.compressors is not None:
        extra["compressor"] = {"kind": prepared.compressors.kind, "k": prepared.compressors.k}
        extra_tensors.update(prepared.compressors.to_tensors())
    checkpoint_path = out / CHECKPOINT_NAME
    digest = save_checkpoint(result.model, checkpoint_path, extra=extra, extra_tensors=extra_tensors)
    (out / CONFIG_NAME).write_text(json.dumps(config, indent=2, sort_keys=True))
    return RunArtifacts(result, checkpoint_path, metrics_path, digest, result.model.parameter_count())


@dataclass
class LoadedRun:
    """A checkpoint with its head and compressors reattached."""

    checkpoint: Checkpoint
    head: TaskHead | None
    compressors: CompressorPair | None
    weight_task: float

    @property
    def model(self):
        return self.checkpoint.model


def load_run(path, expect=None) -> LoadedRun:
    ckpt = read_checkpoint(path, expect)
    extra = ckpt.header.get("extra", {})
    head = None
    if "head" in extra:
        h = extra["head"]
        head = TaskHead(h["kind"], h["d_model"], h["out_dim"])
        head.load_state_dict(ckpt.extras)
    compressors = None
    if "compressor" in extra:
        compressors = CompressorPair.from_tensors(extra["compressor"]["kind"], ckpt.extras)
    weight_task = extra.get("train", {}).get("weight_task", 1.0)
    return LoadedRun(ckpt, head, compressors, weight_task)


def with_overrides(config: dict, **changes) -> dict:
    """Copy of a validated config with nested `a__b` keys replaced."""
    updated = copy.deepcopy(config)
    for key, value in changes.items():
        target = updated
        *parents, leaf = key.split("__")
        for parent in parents:
            target = target[parent]
        target[leaf] = value
    return validate_config(updated)
