"""
preprocess.py

Synthetic two-modality datasets and token assembly. Every dataset is a
TokenBatch of shape [B, n, d] with the A tokens first and the B tokens after
them, a pad mask, and optional labels (classification) or targets
(translation). Generation is a pure function of (name, seed, size, params).
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from mango.errors import ConfigError, DimensionError, InputError, LayoutError
from mango.flows.partition import ModalityLayout
from mango.utils.container import read_container, write_container
from mango.utils.seeding import rng_stream

logger = logging.getLogger(__name__)

# -----------------------------
# Global constants
# -----------------------------
DATASETS = ("correlated-gaussians", "two-moons-pair", "toy-translation")
DATASET_KIND = "dataset"
HELDOUT_FRACTION = 0.2

MIXTURE_COMPONENTS = 3
MIXTURE_OFFSET = 2.0     # component means sit at +-2 on alternating axes
MIXTURE_STD = 0.5
MOON_RADIUS = 1.0
MOON_NOISE = 0.05
MOON_CLASS_OFFSET = 1.5
MOON_CLASS_STD = 0.5
SINE_AMPLITUDE = 0.1

DEFAULT_PARAMS = {
    "correlated-gaussians": {"d": 4, "tokens": 4, "noise": 0.1},
    "two-moons-pair": {"d": 4, "tokens": 4, "noise": MOON_NOISE},
    "toy-translation": {"d": 4, "tokens": 4, "noise": 0.1},
}


@dataclass
class TokenBatch:
    """A batch of token sequences in [A..., B...] order.

    Attributes:
        tokens (np.ndarray): [B, n, d] float64.
        layout (ModalityLayout): Tokens per modality; n = layout.n.
        pad_mask (np.ndarray): [B, n] bool, True at pad positions.
        labels (np.ndarray | None): [B] int class labels.
        targets (np.ndarray | None): [B, k, d] translation targets.
    """

    tokens: np.ndarray
    layout: ModalityLayout
    pad_mask: np.ndarray = None
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim == 2:
            self.tokens = self.tokens[None]
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.layout.n:
            raise DimensionError("TokenBatch", self.tokens.shape, (self.layout.n,))
        if self.pad_mask is None:
            self.pad_mask = np.zeros(self.tokens.shape[:2], dtype=bool)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool).reshape(self.tokens.shape[:2])

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[2]

    @property
    def a_tokens(self) -> np.ndarray:
        return self.tokens[:, : self.layout.m]

    @property
    def b_tokens(self) -> np.ndarray:
        return self.tokens[:, self.layout.m:]

    def select(self, indices) -> "TokenBatch":
        indices = np.asarray(indices, dtype=np.intp)
        return TokenBatch(
            tokens=self.tokens[indices],
            layout=self.layout,
            pad_mask=self.pad_mask[indices],
            labels=None if self.labels is None else self.labels[indices],
            targets=None if self.targets is None else self.targets[indices],
        )

    def with_tokens(self, tokens: np.ndarray, layout: ModalityLayout | None = None) -> "TokenBatch":
        """Same mask/labels/targets, new token values (e.g. after compression)."""
        return TokenBatch(tokens, layout or self.layout, self.pad_mask, self.labels, self.targets)


@dataclass(frozen=True)
class SyntheticDataset:
    """Recipe for one generated dataset."""

    name: str
    seed: int = 0
    size: int = 2000
    params: dict = field(default_factory=dict)

    def resolved_params(self) -> dict:
        if self.name not in DATASETS:
            raise ConfigError(f"unknown dataset {self.name!r}; expected one of {DATASETS}", "dataset")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.name])
        if unknown:
            raise ConfigError(f"unknown generator parameters {sorted(unknown)}", "dataset_params")
        return {**DEFAULT_PARAMS[self.name], **self.params}

    def to_dict(self) -> dict:
        return {**asdict(self), "params": self.resolved_params()}


# -----------------------------
# Fixed maps
# -----------------------------

def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed rotation with determinant +1."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diagonal(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def generator_maps(spec: SyntheticDataset) -> dict[str, np.ndarray]:
    """The seeded linear maps a dataset is built with."""
    params = spec.resolved_params()
    rng = rng_stream(spec.seed, "maps")
    d = params["d"]
    if spec.name == "correlated-gaussians":
        return {"rotation": random_rotation(d, rng)}
    if spec.name == "two-moons-pair":
        return {"lift": rng.normal(0.0, 1.0 / np.sqrt(2.0), (2, d))}
    return {"translation": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))}


def mixture_means(d: int) -> np.ndarray:
    """Means of the A-modality mixture: component j at (+2, -2, +2...) on axis j mod d."""
    means = np.zeros((MIXTURE_COMPONENTS, d))
    for j in range(MIXTURE_COMPONENTS):
        means[j, j % d] = MIXTURE_OFFSET if j % 2 == 0 else -MIXTURE_OFFSET
    return means


# -----------------------------
# Generators
# -----------------------------

def _correlated_gaussians(size, p, maps, rng):
    d, m = p["d"], p["tokens"]
    component = rng.integers(0, MIXTURE_COMPONENTS, size=(size, m))
    a = mixture_means(d)[component] + rng.normal(0.0, MIXTURE_STD, (size, m, d))
    b = a @ maps["rotation"].T + rng.normal(0.0, 1.0, (size, m, d)) * p["noise"]
    return a, b, None, None


def _two_moons_pair(size, p, maps, rng):
    d, m = p["d"], p["tokens"]
    labels = rng.integers(0, 2, size=size)
    angle = rng.uniform(0.0, np.pi, (size, m))
    upper = np.stack([np.cos(angle), np.sin(angle)], axis=-1) * MOON_RADIUS
    lower = np.stack([MOON_RADIUS - np.cos(angle), 0.5 - np.sin(angle)], axis=-1)
    planar = np.where(labels[:, None, None] == 0, upper, lower)
    planar = planar + rng.normal(0.0, 1.0, planar.shape) * p["noise"]
    a = planar @ maps["lift"]
    centers = np.where(labels == 0, MOON_CLASS_OFFSET, -MOON_CLASS_OFFSET)
    b = centers[:, None, None] + rng.normal(0.0, MOON_CLASS_STD, (size, m, d))
    return a, b, labels, None


def _toy_translation(size, p, maps, rng):
    d, m = p["d"], p["tokens"]
    a = rng.normal(0.0, 1.0, (size, m, d))
    phase = 2.0 * np.pi * np.arange(m)[None, :, None] / m
    b = a @ maps["translation"].T + SINE_AMPLITUDE * np.sin(2.0 * a + phase)
    b = b + rng.normal(0.0, 1.0, (size, m, d)) * p["noise"]
    return a, b, None, b


_GENERATORS = {
    "correlated-gaussians": _correlated_gaussians,
    "two-moons-pair": _two_moons_pair,
    "toy-translation": _toy_translation,
}


def generate(spec: SyntheticDataset) -> TokenBatch:
    """Generate `spec.size` samples; bitwise reproducible for a fixed spec.

    Returns:
        TokenBatch: tokens [size, 2 * tokens, d]; labels for two-moons-pair,
            targets (the B tokens) for toy-translation.
    """
    params = spec.resolved_params()
    if spec.size < 0:
        raise ConfigError("must be >= 0", "dataset_size")
    rng = rng_stream(spec.seed, "data")
    a, b, labels, targets = _GENERATORS[spec.name](spec.size, params, generator_maps(spec), rng)
    batch = pad_to_equal(a, b)
    batch.labels = labels
    batch.targets = None if targets is None else np.array(targets)
    logger.debug("Generated %s: %d samples, layout %s", spec.name, spec.size, batch.layout)
    return batch


def pad_to_equal(a_tokens, b_tokens, pad_embedding=None) -> TokenBatch:
    """Pad the shorter modality to max(m, k) tokens.

    Args:
        a_tokens (array): [B, m, d] or [m, d].
        b_tokens (array): [B, k, d] or [k, d].
        pad_embedding (array | None): [d] value written at pad positions
            (zeros when omitted; the model substitutes its learned embedding).

    Returns:
        TokenBatch with n = 2 * max(m, k) and pads at the tail of the
        shorter modality.
    """
    a = np.asarray(a_tokens, dtype=np.float64)
    b = np.asarray(b_tokens, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise DimensionError("pad_to_equal", a.shape, b.shape)
    m, k, d = a.shape[1], b.shape[1], a.shape[2]
    if m == 0 or k == 0:
        raise InputError(f"each modality needs at least one token, got m={m}, k={k}")
    width = max(m, k)
    pad = np.zeros(d) if pad_embedding is None else np.asarray(pad_embedding, dtype=np.float64)
    if pad.shape != (d,):
        raise DimensionError("pad_to_equal pad_embedding", pad.shape, (d,))

    def fill(x):
        missing = width - x.shape[1]
        padded = np.concatenate([x, np.broadcast_to(pad, (x.shape[0], missing, d))], axis=1)
        mask = np.zeros((x.shape[0], width), dtype=bool)
        mask[:, x.shape[1]:] = True
        return padded, mask

    a_pad, a_mask = fill(a)
    b_pad, b_mask = fill(b)
    return TokenBatch(
        tokens=np.concatenate([a_pad, b_pad], axis=1),
        layout=ModalityLayout(width, width),
        pad_mask=np.concatenate([a_mask, b_mask], axis=1),
    )


def split_heldout(batch: TokenBatch, seed: int, fraction: float = HELDOUT_FRACTION) -> tuple[TokenBatch, TokenBatch]:
    """Seeded (train, held-out) split; held-out gets round(fraction * B) samples."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("held-out fraction must lie in (0, 1)")
    order = rng_stream(seed, "split").permutation(len(batch))
    n_held = int(round(fraction * len(batch)))
    return batch.select(np.sort(order[n_held:])), batch.select(np.sort(order[:n_held]))


# -----------------------------
# Dataset files
# -----------------------------

def save_dataset(batch: TokenBatch, path, spec: SyntheticDataset | None = None) -> str:
    """Write a dataset container and return its sha256."""
    header = {
        "kind": DATASET_KIND,
        "spec": spec.to_dict() if spec is not None else None,
        "layout": [batch.layout.m, batch.layout.k],
    }
    tensors = {"tokens": batch.tokens, "pad_mask": batch.pad_mask.astype(np.float64)}
    if batch.labels is not None:
        tensors["labels"] = np.asarray(batch.labels, dtype=np.float64)
    if batch.targets is not None:
        tensors["targets"] = batch.targets
    return write_container(path, header, tensors)


def load_dataset(path) -> tuple[TokenBatch, dict]:
    """Read a dataset container; returns the batch and its header."""
    header, tensors = read_container(path, kind=DATASET_KIND)
    try:
        m, k = header["layout"]
        tokens = tensors["tokens"]
    except (KeyError, TypeError, ValueError):
        raise LayoutError(f"{path}: dataset container lacks tokens or layout") from None
    labels = tensors.get("labels")
    batch = TokenBatch(
        tokens=tokens,
        layout=ModalityLayout(int(m), int(k)),
        pad_mask=tensors.get("pad_mask", np.zeros(tokens.shape[:2])) != 0.0,
        labels=None if labels is None else labels.astype(np.int64),
        targets=tensors.get("targets"),
    )
    return batch, header
