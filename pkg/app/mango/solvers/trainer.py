"""
trainer.py

Training loop for a FlowModel (and optional TaskHead) on a TokenBatch:
seeded mini-batches, Adam updates with global-norm clipping, a periodic
round-trip check, held-out evaluation with best-checkpoint selection, and a
JSON-lines metrics stream.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mango.core.tensor import Parameter, Tape
from mango.errors import ConfigError, InputError, InvertibilityError, NumericError, TrainingDivergedError
from mango.processing.tasks import accuracy, joint_loss
from mango.utils.seeding import rng_stream

logger = logging.getLogger(__name__)

ROUNDTRIP_TOL = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. grad_clip_norm = 0 disables clipping."""

    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float = 5.0
    eval_every: int = 100
    check_every: int = 100
    seed: int = 0
    weight_task: float = 1.0

    def validate(self) -> "TrainConfig":
        checks = [
            ("steps", self.steps >= 0, "must be >= 0"),
            ("batch_size", self.batch_size > 0, "must be > 0"),
            ("lr", self.learning_rate > 0, "must be > 0"),
            ("eps", self.eps > 0, "must be > 0"),
            ("grad_clip", self.grad_clip_norm >= 0, "must be >= 0"),
            ("eval_every", self.eval_every > 0, "must be > 0"),
            ("eval_every", self.steps == 0 or self.eval_every <= self.steps, "must not exceed steps"),
            ("check_every", self.check_every > 0, "must be > 0"),
            ("weight_task", self.weight_task >= 0, "must be >= 0"),
            ("betas", all(0.0 <= b < 1.0 for b in self.betas), "must lie in [0, 1)"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(message, f"train.{name}")
        return self


class Adam:
    """Adam over Parameter.grad, with bias-corrected moments."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def global_norm(params: list[Parameter]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def grad_clip(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients by min(1, max_norm / ||g||) and return that scale."""
    if max_norm <= 0:
        raise ConfigError("must be > 0", "train.grad_clip")
    norm = global_norm(params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad = p.grad * scale
    return scale


class MetricsCallback:
    """Collects metrics records and mirrors them to a JSON-lines file.

    Attributes:
        records (list of dict): Every record in emission order.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def evaluate(model, head, batch, weight_task: float = 1.0) -> dict:
    """Full-batch metrics with no tape; trainer and `eval` share this path."""
    if len(batch) == 0:
        raise InputError("cannot evaluate on an empty batch")
    loss = joint_loss(model, head, batch, weight_task=weight_task if head is not None else 0.0)
    dims = batch.layout.n * batch.d
    record = {
        "nll_per_dim": loss.nll.item() / dims,
        "task_loss": None if loss.task is None else loss.task.item(),
        "total_loss": loss.total.item(),
        "roundtrip_err": float(np.max(np.abs(model.inverse(loss.z).data
                                             - model.embed(batch.tokens, batch.pad_mask).data))),
    }
    if head is not None and head.kind == "classification" and batch.labels is not None:
        record["accuracy"] = accuracy(head, loss.z, batch.labels, pad_mask=batch.pad_mask)
    return record


def selection_score(record: dict, head) -> float:
    """Lower is better: held-out nll/dim, or the task metric for joint runs."""
    if head is None or record.get("task_loss") is None:
        return record["nll_per_dim"]
    if "accuracy" in record:
        return -record["accuracy"]
    return record["task_loss"]


@dataclass
class TrainResult:
    model: object
    head: object
    records: list = field(default_factory=list)
    best_step: int = 0
    initial: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)


class FlowTrainer:
    """Optimizes model (and head) parameters on a training batch.

    Attributes:
        model (FlowModel): Trained in place; the best state is restored at the end.
        head (TaskHead | None): Optional task head, trained jointly.
        train_batch, heldout_batch (TokenBatch): Data for updates and selection.
        config (TrainConfig): Validated optimization settings.
        callback (MetricsCallback): Receives every record.
    """

    def __init__(self, model, head, train_batch, heldout_batch, config: TrainConfig, callback: MetricsCallback | None = None):
        self.model = model
        self.head = head
        self.train_batch = train_batch
        self.heldout_batch = heldout_batch if len(heldout_batch) else train_batch
        self.config = config.validate()
        self.callback = callback or MetricsCallback()
        if len(train_batch) == 0:
            raise InputError("training batch is empty")
        if not len(heldout_batch):
            logger.warning("Held-out split is empty; selecting on the training batch")
        self.params = model.parameters() + (head.parameters() if head is not None else [])
        self.optimizer = Adam(self.params, lr=config.learning_rate, betas=config.betas, eps=config.eps)
        self._batches = rng_stream(config.seed, "batches")
        self._order = np.empty(0, dtype=np.intp)
        self._cursor = 0

    def _snapshot(self) -> dict:
        state = self.model.state_dict()
        if self.head is not None:
            state.update(self.head.state_dict())
        return state

    def _restore(self, state: dict) -> None:
        self.model.load_state_dict({k: v for k, v in state.items() if not k.startswith("head/")})
        if self.head is not None:
            self.head.load_state_dict(state)

    def _next_batch(self):
        size = min(self.config.batch_size, len(self.train_batch))
        if self._cursor + size > len(self._order):
            self._order = self._batches.permutation(len(self.train_batch))
            self._cursor = 0
        idx = np.sort(self._order[self._cursor:self._cursor + size])
        self._cursor += size
        return self.train_batch.select(idx)

    def _evaluate(self, step: int, kind: str, start: float) -> dict:
        record = {"kind": kind, "step": step}
        record.update(evaluate(self.model, self.head, self.heldout_batch, self.config.weight_task))
        record["wallclock_s"] = time.perf_counter() - start
        return record

    def _train_step(self, step: int, last: dict | None):
        batch = self._next_batch()
        self.optimizer.zero_grad()
        try:
            with Tape() as tape:
                loss = joint_loss(self.model, self.head, batch, self.config.weight_task)
        except NumericError as e:
            raise TrainingDivergedError(step, last) from e
        value = loss.total.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(step, last)
        tape.backward(loss.total)
        if self.config.grad_clip_norm > 0:
            grad_clip(self.params, self.config.grad_clip_norm)
        self.optimizer.step()
        logger.debug("step %d: loss %.6f", step, value)
        if step % self.config.check_every == 0:
            x = self.model.embed(batch.tokens, batch.pad_mask)
            error = self.model.roundtrip_error(x)
            if not error < ROUNDTRIP_TOL:
                raise InvertibilityError(step, error, ROUNDTRIP_TOL)

    def solve(self) -> TrainResult:
        """Run the configured number of steps and return the best state.

        Returns:
            TrainResult: the model with its best held-out state restored, all
                records, the initial and final evaluations.
        """
        start = time.perf_counter()
        initial = self._evaluate(0, "eval", start)
        self.callback(initial)
        best_score, best_step, best_state = selection_score(initial, self.head), 0, self._snapshot()
        last = initial
        logger.info("Training %d steps (batch %d, lr %g); initial held-out nll/dim %.4f",
                    self.config.steps, self.config.batch_size, self.config.learning_rate, initial["nll_per_dim"])

        for step in range(1, self.config.steps + 1):
            self._train_step(step, last)
            if step % self.config.eval_every == 0 or step == self.config.steps:
                try:
                    record = self._evaluate(step, "eval", start)
                except NumericError as e:
                    raise TrainingDivergedError(step, last) from e
                if not np.isfinite(record["total_loss"]):
                    raise TrainingDivergedError(step, last)
                self.callback(record)
                last = record
                score = selection_score(record, self.head)
                if score < best_score:
                    best_score, best_step, best_state = score, step, self._snapshot()
                logger.info("step %d: held-out nll/dim %.4f", step, record["nll_per_dim"])

        self._restore(best_state)
        final = self._evaluate(best_step, "final", start)
        self.callback(final)
        logger.info("Best held-out state at step %d: nll/dim %.4f", best_step, final["nll_per_dim"])
        return TrainResult(model=self.model, head=self.head, records=self.callback.records,
                           best_step=best_step, initial=initial, final=final)


def train(model, head, train_batch, heldout_batch, config: TrainConfig, metrics_path=None) -> TrainResult:
    return FlowTrainer(model, head, train_batch, heldout_batch, config, MetricsCallback(metrics_path)).solve()


def config_record(config: TrainConfig) -> dict:
    values = asdict(config)
    values["betas"] = list(config.betas)
    return values
