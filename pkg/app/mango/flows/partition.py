"""
partition.py

Reversible token split/merge rules for the cross-attention layers.

Token order inside a batch is always [A tokens..., B tokens...]. MMCA and
IMCA partitions are pure index permutations; LICA first mixes tokens with a
learnable LU-parameterized matrix W (acting on the token axis), splits the
mixed tokens in half, and merges by solving with W instead of inverting it.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from mango.core.tensor import (
    Parameter,
    Tensor,
    as_tensor,
    concat,
    exp,
    matmul,
    solve_triangular,
    split,
    take,
)
from mango.errors import LayoutError, SingularityError

logger = logging.getLogger(__name__)

IMCA_MODES = (1, 2, 3, 4)


@dataclass(frozen=True)
class ModalityLayout:
    """Token counts per modality: m tokens of A followed by k tokens of B."""

    m: int
    k: int

    @property
    def n(self) -> int:
        return self.m + self.k

    def validate(self, need_even_halves: bool = False) -> None:
        if self.m < 1 or self.k < 1:
            raise LayoutError(f"each modality needs at least one token, got m={self.m}, k={self.k}")
        if self.m != self.k:
            raise LayoutError(f"modalities must be padded to equal size, got m={self.m}, k={self.k}")
        if need_even_halves and (self.m % 2 or self.k % 2):
            raise LayoutError(f"IMCA needs even per-modality counts, got m={self.m}, k={self.k}")

    def origins(self) -> np.ndarray:
        """'A'/'B' label per token position."""
        return np.array(["A"] * self.m + ["B"] * self.k)


class SchemeKind(str, Enum):
    MMCA_A_TO_B = "mmca_a_to_b"
    MMCA_B_TO_A = "mmca_b_to_a"
    IMCA = "imca"
    LICA = "lica"


class LuPermutation:
    """W = P L (U + diag(s)) acting on the token axis.

    P is a fixed permutation matrix, L is unit lower triangular, U strictly
    upper triangular and s = sign * exp(log_s) with the sign frozen at
    construction, so W stays invertible while training.
    """

    def __init__(self, n: int, rng: np.random.Generator, name: str = "lu"):
        self.n = n
        self.name = name
        self.p = np.eye(n)[rng.permutation(n)]
        self.sign = rng.choice(np.array([-1.0, 1.0]), size=n)
        self.l = Parameter(np.zeros((n, n)), f"{name}.l")
        self.u = Parameter(np.zeros((n, n)), f"{name}.u")
        self.log_s = Parameter(np.zeros(n), f"{name}.log_s")
        self._lower = np.tril(np.ones((n, n)), -1)
        self._upper = np.triu(np.ones((n, n)), 1)

    @classmethod
    def from_factors(cls, p, l, u, s, name: str = "lu") -> "LuPermutation":
        """Build from explicit factors; only the relevant triangles of l and u are used."""
        s = np.asarray(s, dtype=np.float64)
        if np.any(s == 0.0):
            raise SingularityError(f"{name}: s has a zero entry")
        lu = cls(len(s), np.random.default_rng(0), name=name)
        lu.p = np.asarray(p, dtype=np.float64)
        lu.l.assign(np.tril(l, -1))
        lu.u.assign(np.triu(u, 1))
        lu.sign = np.sign(s)
        lu.log_s.assign(np.log(np.abs(s)))
        return lu

    def parameters(self) -> list[Parameter]:
        return [self.l, self.u, self.log_s]

    def buffers(self) -> dict[str, np.ndarray]:
        """Frozen state that is not trained but must be checkpointed."""
        return {f"{self.name}.p": self.p, f"{self.name}.sign": self.sign}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        self.p = np.asarray(values[f"{self.name}.p"], dtype=np.float64)
        self.sign = np.asarray(values[f"{self.name}.sign"], dtype=np.float64)

    def free_parameter_count(self) -> int:
        """n^2: the strict triangles of l and u plus log_s."""
        return self.n * self.n

    def factors(self) -> tuple[Tensor, Tensor]:
        """(L, U + diag(s)) as differentiable tensors."""
        s_abs = exp(self.log_s)
        if np.any(s_abs.data == 0.0):
            raise SingularityError(f"{self.name}: |s| underflowed to zero")
        lower = self.l * self._lower + np.eye(self.n)
        upper = self.u * self._upper + np.eye(self.n) * (s_abs * self.sign)
        return lower, upper

    def log_abs_det(self) -> Tensor:
        """log|det W| = sum(log|s|), per channel of the mixed tokens."""
        return self.log_s.sum()


def lu_compose(lu: LuPermutation) -> tuple[np.ndarray, float]:
    """Dense W and its per-channel log|det|."""
    lower, upper = lu.factors()
    w = lu.p @ lower.data @ upper.data
    return w, float(lu.log_abs_det().data)


def lica_apply(lu: LuPermutation, x, inverse: bool = False) -> Tensor:
    """Multiply tokens by W along the token axis, or undo it.

    The inverse is P^T, then a unit-lower solve, then an upper solve.
    """
    x = as_tensor(x)
    if x.shape[-2] != lu.n:
        raise LayoutError(f"{lu.name}: expected {lu.n} tokens, got {x.shape[-2]}")
    lower, upper = lu.factors()
    if not inverse:
        return matmul(lu.p, matmul(lower, matmul(upper, x)))
    z = matmul(lu.p.T, x)
    z = solve_triangular(lower, z, lower=True, unit_diagonal=True)
    return solve_triangular(upper, z, lower=False)


@dataclass(frozen=True)
class PartitionScheme:
    """A reversible split rule; `mode` is set for IMCA, `lu` for LICA."""

    kind: SchemeKind
    mode: int | None = None
    lu: LuPermutation | None = None

    def __post_init__(self):
        if self.kind is SchemeKind.IMCA and self.mode not in IMCA_MODES:
            raise LayoutError(f"IMCA mode must be one of {IMCA_MODES}, got {self.mode}")
        if self.kind is SchemeKind.LICA and self.lu is None:
            raise LayoutError("LICA scheme needs an LuPermutation")

    @classmethod
    def mmca(cls, a_to_b: bool = True) -> "PartitionScheme":
        return cls(SchemeKind.MMCA_A_TO_B if a_to_b else SchemeKind.MMCA_B_TO_A)

    @classmethod
    def imca(cls, mode: int) -> "PartitionScheme":
        return cls(SchemeKind.IMCA, mode=mode)

    @classmethod
    def lica(cls, lu: LuPermutation) -> "PartitionScheme":
        return cls(SchemeKind.LICA, lu=lu)

    def label(self) -> str:
        if self.kind is SchemeKind.IMCA:
            return f"imca{self.mode}"
        return self.kind.value

    def parameters(self) -> list[Parameter]:
        return self.lu.parameters() if self.lu is not None else []

    def token_indices(self, layout: ModalityLayout) -> tuple[np.ndarray, np.ndarray]:
        """Token positions feeding x1 and x2 (MMCA/IMCA only)."""
        a = np.arange(layout.m)
        b = np.arange(layout.m, layout.n)
        if self.kind is SchemeKind.MMCA_A_TO_B:
            return a, b
        if self.kind is SchemeKind.MMCA_B_TO_A:
            return b, a
        if self.kind is SchemeKind.IMCA:
            a1, a2 = a[: layout.m // 2], a[layout.m // 2:]
            b1, b2 = b[: layout.k // 2], b[layout.k // 2:]
            pairs = {
                1: ((a1, b1), (a2, b2)),
                2: ((a1, b2), (a2, b1)),
                3: ((a2, b1), (a1, b2)),
                4: ((a2, b2), (a1, b1)),
            }
            first, second = pairs[self.mode]
            return np.concatenate(first), np.concatenate(second)
        raise LayoutError("LICA partitions are not index permutations")

    def origins(self, layout: ModalityLayout) -> tuple[np.ndarray, np.ndarray]:
        """Modality label of every x1 and x2 row; mixed tokens are labelled 'AB'."""
        if self.kind is SchemeKind.LICA:
            half = layout.n // 2
            return np.array(["AB"] * half), np.array(["AB"] * half)
        labels = layout.origins()
        idx1, idx2 = self.token_indices(layout)
        return labels[idx1], labels[idx2]


def _check_layout(scheme: PartitionScheme, layout: ModalityLayout, n_tokens: int):
    layout.validate(need_even_halves=scheme.kind is SchemeKind.IMCA)
    if n_tokens != layout.n:
        raise LayoutError(f"expected {layout.n} tokens for layout {layout}, got {n_tokens}")
    if n_tokens % 2:
        raise LayoutError(f"token count must be even, got {n_tokens}")


def partition(scheme: PartitionScheme, x, layout: ModalityLayout) -> tuple[Tensor, Tensor]:
    """Split a [..., n, d] token batch into two [..., n/2, d] partitions."""
    x = as_tensor(x)
    _check_layout(scheme, layout, x.shape[-2])
    if scheme.kind is SchemeKind.LICA:
        return split(lica_apply(scheme.lu, x), layout.n // 2, axis=-2)
    idx1, idx2 = scheme.token_indices(layout)
    return take(x, idx1, axis=-2), take(x, idx2, axis=-2)


def merge(scheme: PartitionScheme, y1, y2, layout: ModalityLayout) -> Tensor:
    """Inverse of partition: tokens return to their original positions."""
    y1, y2 = as_tensor(y1), as_tensor(y2)
    if y1.shape != y2.shape:
        raise LayoutError(f"merge needs equal partition shapes, got {y1.shape} and {y2.shape}")
    _check_layout(scheme, layout, 2 * y1.shape[-2])
    joined = concat([y1, y2], axis=-2)
    if scheme.kind is SchemeKind.LICA:
        return lica_apply(scheme.lu, joined, inverse=True)
    idx1, idx2 = scheme.token_indices(layout)
    order = np.argsort(np.concatenate([idx1, idx2]))
    return take(joined, order, axis=-2)
