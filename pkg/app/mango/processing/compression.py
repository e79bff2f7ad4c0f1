"""
compression.py

Per-modality encoders that map raw token features to a smaller latent width
before the flow sees them, and the decoders that map back. Two kinds:

    pca          mean-centred projection on the top-k covariance eigenvectors,
                 found by power iteration with deflation
    autoencoder  single-hidden-layer tanh encoder/decoder trained on
                 reconstruction MSE with the shared Adam optimizer

Compressors are fitted once and frozen before flow training.
"""

import logging
from dataclasses import dataclass

import numpy as np

from mango.core.tensor import Parameter, Tape, as_tensor, tanh
from mango.errors import ConfigError, DimensionError, InputError
from mango.flows.partition import ModalityLayout
from mango.solvers.trainer import Adam
from mango.utils.container import read_container, write_container
from mango.utils.seeding import rng_stream

logger = logging.getLogger(__name__)

COMPRESSOR_KINDS = ("none", "pca", "autoencoder")
COMPRESSOR_KIND = "compressor"
POWER_TOL = 1e-10
POWER_MAX_ITER = 5000
# eigenvalues below this fraction of the total variance count as zero
RANK_TOL = 1e-12
AE_HIDDEN = 32
AE_STEPS = 2000
AE_LR = 5e-3
AE_BATCH = 256


def _check_fit_inputs(data: np.ndarray, k: int) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InputError(f"compressor fit needs a non-empty [N, d_raw] array, got shape {data.shape}")
    if not 1 <= k < data.shape[1]:
        raise ConfigError(f"k must satisfy 1 <= k < d_raw = {data.shape[1]}, got {k}", "compressor.k")
    return data


class PcaCompressor:
    """Orthogonal projection onto the top-k principal directions.

    Attributes:
        mean (np.ndarray): [d_raw] data mean.
        components (np.ndarray): [k, d_raw] orthonormal rows sorted by
            decreasing variance; rows beyond the data rank are zero.
        variances (np.ndarray): [k] captured variance per component.
    """

    kind = "pca"

    def __init__(self, mean, components, variances=None):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.components = np.asarray(components, dtype=np.float64)
        self.variances = np.zeros(len(self.components)) if variances is None else np.asarray(variances, dtype=np.float64)
        self.k, self.d_raw = self.components.shape

    @classmethod
    def fit(cls, data, k: int, seed: int = 0) -> "PcaCompressor":
        data = _check_fit_inputs(data, k)
        mean = data.mean(axis=0)
        centered = data - mean
        cov = centered.T @ centered / max(len(data) - 1, 1)
        total = float(np.trace(cov))
        rng = rng_stream(seed, "pca")
        remaining = cov.copy()
        found, values = [], []
        for index in range(k):
            v = rng.standard_normal(len(cov))
            for _ in range(POWER_MAX_ITER):
                w = remaining @ v
                for u in found:
                    w = w - (u @ w) * u
                norm = np.linalg.norm(w)
                if norm <= RANK_TOL * max(total, 1.0):
                    w = None
                    break
                w = w / norm
                done = abs(1.0 - abs(w @ v)) < POWER_TOL
                v = w
                if done:
                    break
            if w is None:
                logger.warning("PCA: data rank is %d, below k=%d; padding with zero components", index, k)
                found.extend([np.zeros(len(cov))] * (k - index))
                values.extend([0.0] * (k - index))
                break
            value = float(v @ cov @ v)
            remaining = remaining - value * np.outer(v, v)
            found.append(v)
            values.append(value)
        order = np.argsort(values, kind="stable")[::-1]
        components = np.array(found)[order]
        variances = np.array(values)[order]
        logger.debug("PCA fit: k=%d, captured variance %.6g of %.6g", k, variances.sum(), total)
        return cls(mean, components, variances)

    def captured_fraction(self, total_variance: float) -> float:
        return float(self.variances.sum() / total_variance) if total_variance > 0 else 0.0

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_raw:
            raise DimensionError("pca encode", x.shape, (self.d_raw,))
        return (x - self.mean) @ self.components.T

    def decode(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != self.k:
            raise DimensionError("pca decode", f.shape, (self.k,))
        return f @ self.components + self.mean

    def to_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.mean": self.mean, f"{prefix}.components": self.components,
                f"{prefix}.variances": self.variances}

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str) -> "PcaCompressor":
        return cls(tensors[f"{prefix}.mean"], tensors[f"{prefix}.components"], tensors[f"{prefix}.variances"])


class MlpAutoencoder:
    """tanh encoder/decoder pair with a k-wide bottleneck.

    Inputs are standardized with the training mean and scale before the
    encoder; decode undoes that.
    """

    kind = "autoencoder"

    def __init__(self, d_raw: int, k: int, hidden: int = AE_HIDDEN, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.d_raw, self.k, self.hidden = d_raw, k, hidden
        self.mean = np.zeros(d_raw)
        self.scale = np.ones(d_raw)

        def layer(name, fan_in, fan_out):
            return (Parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), f"{name}.w"),
                    Parameter(np.zeros(fan_out), f"{name}.b"))

        self.enc1 = layer("encoder.hidden", d_raw, hidden)
        self.enc2 = layer("encoder.out", hidden, k)
        self.dec1 = layer("decoder.hidden", k, hidden)
        self.dec2 = layer("decoder.out", hidden, d_raw)

    def parameters(self) -> list[Parameter]:
        return [p for pair in (self.enc1, self.enc2, self.dec1, self.dec2) for p in pair]

    def _encode(self, x):
        w1, b1 = self.enc1
        w2, b2 = self.enc2
        return tanh(as_tensor(x) @ w1 + b1) @ w2 + b2

    def _decode(self, f):
        w1, b1 = self.dec1
        w2, b2 = self.dec2
        return tanh(as_tensor(f) @ w1 + b1) @ w2 + b2

    @classmethod
    def fit(cls, data, k: int, seed: int = 0, steps: int = AE_STEPS, lr: float = AE_LR) -> "MlpAutoencoder":
        data = _check_fit_inputs(data, k)
        ae = cls(data.shape[1], k, rng=rng_stream(seed, "autoencoder"))
        ae.mean = data.mean(axis=0)
        ae.scale = np.where(data.std(axis=0) > 0, data.std(axis=0), 1.0)
        standardized = (data - ae.mean) / ae.scale
        optimizer = Adam(ae.parameters(), lr=lr)
        batches = rng_stream(seed, "autoencoder-batches")
        loss = float("nan")
        for _ in range(steps):
            idx = batches.choice(len(standardized), size=min(AE_BATCH, len(standardized)), replace=False)
            x = standardized[idx]
            optimizer.zero_grad()
            with Tape() as tape:
                diff = ae._decode(ae._encode(x)) - x
                objective = (diff * diff).mean()
            tape.backward(objective)
            optimizer.step()
            loss = objective.item()
        logger.debug("Autoencoder fit: k=%d, final standardized mse %.3e", k, loss)
        return ae

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_raw:
            raise DimensionError("autoencoder encode", x.shape, (self.d_raw,))
        return self._encode((x - self.mean) / self.scale).data

    def decode(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != self.k:
            raise DimensionError("autoencoder decode", f.shape, (self.k,))
        return self._decode(f).data * self.scale + self.mean

    def to_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.mean": self.mean, f"{prefix}.scale": self.scale}
        out.update({f"{prefix}.{p.name}": p.data for p in self.parameters()})
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str) -> "MlpAutoencoder":
        w = tensors[f"{prefix}.encoder.hidden.w"]
        k = tensors[f"{prefix}.encoder.out.w"].shape[1]
        ae = cls(w.shape[0], k, hidden=w.shape[1])
        ae.mean = tensors[f"{prefix}.mean"]
        ae.scale = tensors[f"{prefix}.scale"]
        for p in ae.parameters():
            p.assign(tensors[f"{prefix}.{p.name}"])
        return ae


_COMPRESSORS = {"pca": PcaCompressor, "autoencoder": MlpAutoencoder}


def fit(kind: str, data, k: int, seed: int = 0):
    """Fit a compressor of the given kind on [N, d_raw] rows."""
    if kind not in _COMPRESSORS:
        raise ConfigError(f"unknown compressor {kind!r}; expected one of {tuple(_COMPRESSORS)}", "compressor.kind")
    return _COMPRESSORS[kind].fit(data, k, seed=seed)


@dataclass
class CompressorPair:
    """One fitted compressor per modality."""

    a: PcaCompressor | MlpAutoencoder
    b: PcaCompressor | MlpAutoencoder

    @property
    def kind(self) -> str:
        return self.a.kind

    @property
    def k(self) -> int:
        return self.a.k

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {**self.a.to_tensors("compressor.a"), **self.b.to_tensors("compressor.b")}

    @classmethod
    def from_tensors(cls, kind: str, tensors: dict) -> "CompressorPair":
        maker = _COMPRESSORS[kind]
        return cls(maker.from_tensors(tensors, "compressor.a"), maker.from_tensors(tensors, "compressor.b"))


def _real_rows(tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return tokens[~mask]


def fit_pair(kind: str, batch, k: int, seed: int = 0) -> CompressorPair:
    """Fit the A and B compressors independently on their non-pad tokens."""
    m = batch.layout.m
    a_rows = _real_rows(batch.a_tokens, batch.pad_mask[:, :m])
    b_rows = _real_rows(batch.b_tokens, batch.pad_mask[:, m:])
    logger.info("Fitting %s compressors (k=%d) on %d A and %d B tokens", kind, k, len(a_rows), len(b_rows))
    return CompressorPair(fit(kind, a_rows, k, seed=seed), fit(kind, b_rows, k, seed=seed + 1))


def encode_tokens(pair: CompressorPair, batch):
    """Compress A tokens with the A encoder and B tokens with the B encoder."""
    tokens = np.concatenate([pair.a.encode(batch.a_tokens), pair.b.encode(batch.b_tokens)], axis=1)
    return batch.with_tokens(tokens)


def decode_tokens(pair: CompressorPair, tokens, layout: ModalityLayout) -> np.ndarray:
    """[B, n, k] latent tokens back to [B, n, d_raw]."""
    tokens = np.asarray(tokens, dtype=np.float64)
    return np.concatenate([pair.a.decode(tokens[:, : layout.m]), pair.b.decode(tokens[:, layout.m:])], axis=1)


def save_compressors(pair: CompressorPair, path) -> str:
    return write_container(path, {"kind": COMPRESSOR_KIND, "compressor": pair.kind, "k": pair.k}, pair.to_tensors())


def load_compressors(path) -> CompressorPair:
    header, tensors = read_container(path, kind=COMPRESSOR_KIND)
    return CompressorPair.from_tensors(header["compressor"], tensors)
