"""
ica.py

One invertible cross-attention layer. The conditioning partition x1 produces
an upper-triangular attention matrix A (queries and keys both come from x1);
the transformed partition is y2 = A @ x2. Because A is triangular with a
strictly positive diagonal, x2 is recovered by back-substitution and the
log-determinant is read off the diagonal.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from mango.core.tensor import (
    Parameter,
    Tensor,
    as_tensor,
    diagonal,
    inverse_softplus,
    layernorm,
    log,
    masked_softmax,
    softplus,
    solve_triangular,
)
from mango.errors import DimensionError, InputError, PartitionError, SingularityError

logger = logging.getLogger(__name__)

INIT_STD = 0.02
DIAGONAL_FLOOR = 1e-300


def autoregressive_mask(n: int) -> np.ndarray:
    """Boolean [n, n] mask allowing (i, j) iff j >= i."""
    return np.triu(np.ones((n, n), dtype=bool))


@dataclass
class AttentionMatrix:
    """Upper-triangular row-stochastic attention weights, shape [..., n, n]."""

    a: np.ndarray

    def to_csv(self, path) -> None:
        """Write one [n, n] matrix, 17 significant digits per entry."""
        if self.a.ndim != 2:
            raise DimensionError("attention csv export", self.a.shape)
        pd.DataFrame(self.a).to_csv(path, header=False, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path) -> "AttentionMatrix":
        frame = pd.read_csv(path, header=None, dtype=np.float64, float_precision="round_trip")
        return cls(frame.to_numpy())


@dataclass
class IcaResult:
    y2: Tensor
    log_det: Tensor
    attention: AttentionMatrix


class IcaLayer:
    """Parameters of a single-head invertible cross-attention layer.

    Attributes:
        w_q, w_k (Parameter): [d_model, d_model] query/key projections.
        ln_q_gain, ln_q_bias, ln_k_gain, ln_k_bias (Parameter): [d_model] layer norms.
        scale_raw (Parameter): scalar; the attention scale is softplus(scale_raw) > 0.
        mask (np.ndarray): [n_half, n_half] autoregressive mask.
    """

    def __init__(self, d_model: int, n_half: int, rng: np.random.Generator, name: str = "ica"):
        if d_model < 1 or n_half < 1:
            raise DimensionError("IcaLayer", (n_half, d_model))
        self.d_model = d_model
        self.n_half = n_half
        self.name = name
        self.w_q = Parameter(rng.normal(0.0, INIT_STD, (d_model, d_model)), f"{name}.w_q")
        self.w_k = Parameter(rng.normal(0.0, INIT_STD, (d_model, d_model)), f"{name}.w_k")
        self.ln_q_gain = Parameter(np.ones(d_model), f"{name}.ln_q_gain")
        self.ln_q_bias = Parameter(np.zeros(d_model), f"{name}.ln_q_bias")
        self.ln_k_gain = Parameter(np.ones(d_model), f"{name}.ln_k_gain")
        self.ln_k_bias = Parameter(np.zeros(d_model), f"{name}.ln_k_bias")
        # softplus(scale_raw) starts at sqrt(d_model)
        self.scale_raw = Parameter(inverse_softplus(np.sqrt(d_model)), f"{name}.scale_raw")
        self.mask = autoregressive_mask(n_half)

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.ln_q_gain, self.ln_q_bias,
                self.ln_k_gain, self.ln_k_bias, self.scale_raw]

    def _check(self, x1: Tensor, x2: Tensor | None = None):
        if x1.ndim < 2 or x1.shape[-1] != self.d_model:
            raise DimensionError(f"{self.name} input", x1.shape, (self.n_half, self.d_model))
        if x1.shape[-2] != self.n_half:
            raise PartitionError(f"{self.name}: expected {self.n_half} tokens per partition, got {x1.shape[-2]}")
        if x2 is not None and x2.shape != x1.shape:
            raise PartitionError(f"{self.name}: partition shapes differ: {x1.shape} vs {x2.shape}")
        for t in (x1, x2):
            if t is not None and not np.isfinite(t.data).all():
                raise InputError(f"{self.name}: non-finite input")

    def attention(self, x1: Tensor) -> Tensor:
        """A = masked_softmax(Q K^T / scale) with Q, K = LN(x1 W)."""
        q = layernorm(x1 @ self.w_q, self.ln_q_gain, self.ln_q_bias)
        k = layernorm(x1 @ self.w_k, self.ln_k_gain, self.ln_k_bias)
        logits = (q @ k.T) / softplus(self.scale_raw)
        return masked_softmax(logits, self.mask)

    def forward(self, x1, x2) -> IcaResult:
        """y2 = A @ x2 and log|det dy2/dx2| = d * sum(log diag A)."""
        x1, x2 = as_tensor(x1), as_tensor(x2)
        self._check(x1, x2)
        a = self.attention(x1)
        y2 = a @ x2
        log_det = log(diagonal(a)).sum(axis=-1) * float(self.d_model)
        return IcaResult(y2=y2, log_det=log_det, attention=AttentionMatrix(a.data))

    def inverse(self, y1, y2) -> Tensor:
        """Recover x2 from A x2 = y2; y1 equals the forward x1."""
        y1, y2 = as_tensor(y1), as_tensor(y2)
        self._check(y1, y2)
        a = self.attention(y1)
        if np.any(np.diagonal(a.data, axis1=-2, axis2=-1) < DIAGONAL_FLOOR):
            raise SingularityError(f"{self.name}: attention diagonal underflowed")
        return solve_triangular(a, y2)

    def attention_map(self, x1) -> AttentionMatrix:
        x1 = as_tensor(x1)
        self._check(x1)
        return AttentionMatrix(self.attention(x1).data)
