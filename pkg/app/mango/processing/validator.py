"""
validator.py

Brute-force oracles for the analytic claims of the flow layers, and the
audit suite behind the `verify` command.

The oracles never call the analytic log-det code: Jacobians come from
central differences of the forward map, determinants from a pivoted LU
factorization (or, for tiny matrices, cofactor expansion).
"""

import logging
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np

from mango.core import linalg
from mango.core.tensor import Tape
from mango.errors import DimensionError, OracleError
from mango.flows.coupling import AffineCoupling
from mango.flows.model import (
    CrossAttentionLayer,
    ModelConfig,
    TokenMixing,
    build_model,
)
from mango.flows.partition import LuPermutation, ModalityLayout, PartitionScheme
from mango.processing.preprocess import TokenBatch
from mango.processing.tasks import TaskHead, joint_loss
from mango.utils.seeding import rng_stream

logger = logging.getLogger(__name__)

# -----------------------------
# Global constants
# -----------------------------
FD_STEP = 1e-5
ROUNDTRIP_TOL = 1e-6
LOGDET_TOL = 1e-3
GRADIENT_TOL = 1e-3
MAX_AUDIT_DIMS = 64
AUDIT_KINDS = (
    "ica-mmca", "ica-imca", "ica-lica", "coupling", "lica-mixing",
    "model-L1", "model-L2", "baseline-coupling_only", "baseline-glow_linear",
)
AUDIT_SIZES = tuple(product((2, 4, 8, 16), (2, 4)))
# kinds that contain IMCA layers and so need an even token count per modality
IMCA_KINDS = ("ica-imca", "model-L1", "model-L2")
GRADIENT_SEEDS = 5


def numerical_jacobian(f, x, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of a vector function.

    Args:
        f (callable): Maps an array shaped like x to an array (any shape).
        x (array): Evaluation point.
        step (float): Difference step.

    Returns:
        np.ndarray: [out_dim, in_dim] with flattened output and input.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    columns = []
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        f_plus = np.asarray(f(plus.reshape(x.shape)), dtype=np.float64).reshape(-1)
        f_minus = np.asarray(f(minus.reshape(x.shape)), dtype=np.float64).reshape(-1)
        if not (np.isfinite(f_plus).all() and np.isfinite(f_minus).all()):
            raise OracleError(f"non-finite evaluation perturbing coordinate {i}", coordinate=i)
        columns.append((f_plus - f_minus) / (2.0 * step))
    return np.stack(columns, axis=1) if columns else np.zeros((0, 0))


def dense_slogdet(m) -> tuple[float, float]:
    """(sign, log|det|) from a partially pivoted LU; singular gives (0, -inf)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError("dense_slogdet", m.shape)
    if m.shape[0] == 0:
        return 1.0, 0.0
    lu, _, swaps = linalg.lu_factor(m)
    diag = np.diagonal(lu)
    if np.any(diag == 0.0):
        logger.debug("dense_slogdet: exactly singular matrix")
        return 0.0, float("-inf")
    sign = (-1.0) ** swaps * float(np.prod(np.sign(diag)))
    return sign, float(np.sum(np.log(np.abs(diag))))


def cofactor_det(m) -> float:
    """Laplace expansion along the first row; only sensible for n <= 6."""
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    if n == 0:
        return 1.0
    if n == 1:
        return float(m[0, 0])
    total = 0.0
    for j in range(n):
        minor = np.delete(m[1:], j, axis=1)
        total += (-1.0) ** j * m[0, j] * cofactor_det(minor)
    return total


# -----------------------------
# Layer audits
# -----------------------------

@dataclass
class AuditReport:
    kind: str
    n: int
    d: int
    seed: int
    roundtrip_err: float
    logdet_analytic: float
    logdet_numeric: float
    rel_err: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def audit_layer(layer, x, kind: str = "layer", seed: int = 0, inject_fault: bool = False) -> AuditReport:
    """Round-trip and log-det audit of anything with forward(x) -> (y, log_det) and inverse(y).

    Failures are reported, not raised.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape[-2], x.shape[-1]
    if x.size > MAX_AUDIT_DIMS:
        raise DimensionError("audit_layer input larger than the oracle budget", x.shape, (MAX_AUDIT_DIMS,))
    y, log_det = layer.forward(x)
    analytic = float(log_det.data) * (2.0 if inject_fault else 1.0)
    roundtrip = float(np.max(np.abs(layer.inverse(y).data - x)))
    sign, numeric = dense_slogdet(numerical_jacobian(lambda v: layer.forward(v)[0].data, x))
    rel = relative_error(analytic, numeric) if sign != 0 else float("inf")
    passed = bool(roundtrip < ROUNDTRIP_TOL and rel < LOGDET_TOL)
    return AuditReport(kind, n, d, seed, roundtrip, analytic, numeric, rel, passed)


def randomize(params, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Move parameters away from their near-identity initialization."""
    for p in params:
        p.assign(p.data + rng.normal(0.0, scale, p.shape))


def build_audit_layer(kind: str, n: int, d: int, seed: int):
    """A randomized layer (or 1-2 block model) of the given audit kind."""
    rng = rng_stream(seed, f"audit-{kind}-{n}-{d}")
    layout = ModalityLayout(n // 2, n // 2)
    if kind == "ica-mmca":
        layer = CrossAttentionLayer(PartitionScheme.mmca(a_to_b=seed % 2 == 0), layout, d, rng)
    elif kind == "ica-imca":
        layer = CrossAttentionLayer(PartitionScheme.imca(1 + seed % 4), layout, d, rng)
    elif kind == "ica-lica":
        layer = CrossAttentionLayer(PartitionScheme.lica(LuPermutation(n, rng)), layout, d, rng)
    elif kind == "coupling":
        layer = AffineCoupling(d, 4 * d, rng, flip=(seed // 2) % 2 == 1, split_axis=("features", "tokens")[seed % 2])
    elif kind == "lica-mixing":
        layer = TokenMixing(n, d, rng)
    else:
        variant, blocks = "mango", 1
        if kind.startswith("model-L"):
            blocks = int(kind[len("model-L"):])
        elif kind.startswith("baseline-"):
            variant = kind[len("baseline-"):]
        layer = build_model(ModelConfig(d_model=d, n_tokens_per_modality=n // 2, blocks=blocks,
                                        variant=variant, seed=seed))
    randomize(layer.parameters(), rng)
    return layer


def audit_inputs(n: int, d: int, seed: int) -> np.ndarray:
    return rng_stream(seed, "audit-inputs").standard_normal((n, d))


def audit_supported(kind: str, n: int, d: int) -> bool:
    if n * d > MAX_AUDIT_DIMS:
        return False
    return not (kind in IMCA_KINDS and (n // 2) % 2)


def audit_sizes(extra: tuple[int, int] | None = None) -> tuple:
    """The default (n, d) grid, plus `extra` when it fits the oracle budget."""
    sizes = list(AUDIT_SIZES)
    if extra is not None and tuple(extra) not in sizes:
        n, d = extra
        if n * d <= MAX_AUDIT_DIMS:
            sizes.append((n, d))
        else:
            logger.warning("Size n=%d d=%d exceeds the %d-dimension oracle budget; not audited", n, d, MAX_AUDIT_DIMS)
    return tuple(sizes)


# -----------------------------
# Gradient audit
# -----------------------------

@dataclass
class GradientReport:
    seed: int
    n_params: int
    max_rel_err: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def gradient_audit(seed: int, n: int = 4, d: int = 2, batch_size: int = 3, step: float = FD_STEP) -> GradientReport:
    """joint_loss gradients of a randomized 1-block model and head vs. central differences."""
    rng = rng_stream(seed, "audit-gradients")
    model = build_model(ModelConfig(d_model=d, n_tokens_per_modality=n // 2, blocks=1, seed=seed))
    head = TaskHead("classification", d, 2, rng)
    params = model.parameters() + head.parameters()
    randomize(params, rng)
    batch = TokenBatch(rng.standard_normal((batch_size, n, d)), model.layout,
                       labels=rng.integers(0, 2, size=batch_size))

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = joint_loss(model, head, batch, weight_task=1.0).total
    tape.backward(loss)

    worst = 0.0
    for p in params:
        base = p.data.copy()
        for idx in np.ndindex(*p.shape):
            values = []
            for delta in (step, -step):
                shifted = base.copy()
                shifted[idx] += delta
                p.data = shifted
                values.append(joint_loss(model, head, batch, weight_task=1.0).total.item())
            p.data = base
            numeric = (values[0] - values[1]) / (2.0 * step)
            analytic = float(p.grad[idx])
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-2))
    return GradientReport(seed, sum(p.size for p in params), worst, worst < GRADIENT_TOL)


# -----------------------------
# Suite
# -----------------------------

@dataclass
class SuiteReport:
    audits: list = field(default_factory=list)
    gradients: list = field(default_factory=list)
    exponent: dict = field(default_factory=dict)
    passed: bool = False

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_audits": len(self.audits) + len(self.gradients),
            "audits": [a.to_dict() for a in self.audits],
            "gradients": [g.to_dict() for g in self.gradients],
            "exponent": self.exponent,
        }


def exponent_verdict(audits: list[AuditReport]) -> dict:
    """Compare d * sum(log A_ii) against (n/2) * sum(log A_ii) on the ICA audits.

    Only sizes with d != n/2 can tell the two apart.
    """
    d_errors, half_errors = [], []
    for a in audits:
        if not a.kind.startswith("ica-") or a.d == a.n // 2 or a.d == 0:
            continue
        per_channel = a.logdet_analytic / a.d
        d_errors.append(relative_error(per_channel * a.d, a.logdet_numeric))
        half_errors.append(relative_error(per_channel * (a.n // 2), a.logdet_numeric))
    if not d_errors:
        return {"verdict": "undetermined", "cases": 0}
    d_ok = max(d_errors) < LOGDET_TOL
    half_ok = max(half_errors) < LOGDET_TOL
    verdict = "d" if d_ok and not half_ok else "n/2" if half_ok and not d_ok else "undetermined"
    return {"verdict": verdict, "cases": len(d_errors),
            "max_rel_err_d": max(d_errors), "max_rel_err_n_half": max(half_errors)}


class Validator:
    """Runs the audit suite and checks each family of results."""

    def __init__(self, seeds: int = 20, kinds=AUDIT_KINDS, sizes=AUDIT_SIZES,
                 gradient_seeds: int = GRADIENT_SEEDS, inject_fault: bool = False):
        self.seeds = seeds
        self.kinds = kinds
        self.sizes = sizes
        self.gradient_seeds = gradient_seeds
        self.inject_fault = inject_fault
        self.report = SuiteReport()

    def run(self) -> SuiteReport:
        for kind, (n, d), seed in product(self.kinds, self.sizes, range(self.seeds)):
            if not audit_supported(kind, n, d):
                continue
            layer = build_audit_layer(kind, n, d, seed)
            self.report.audits.append(audit_layer(layer, audit_inputs(n, d, seed), kind=kind, seed=seed,
                                                  inject_fault=self.inject_fault))
        self.report.gradients = [gradient_audit(seed) for seed in range(self.gradient_seeds)]
        self.report.exponent = exponent_verdict(self.report.audits)
        self.report.passed = self.validate_suite()
        return self.report

    def check_roundtrip(self) -> bool:
        failed = [a for a in self.report.audits if not a.roundtrip_err < ROUNDTRIP_TOL]
        for a in failed:
            logger.warning("round-trip failed: %s n=%d d=%d seed=%d err=%.3e", a.kind, a.n, a.d, a.seed, a.roundtrip_err)
        return not failed

    def check_logdet(self) -> bool:
        failed = [a for a in self.report.audits if not a.rel_err < LOGDET_TOL]
        for a in failed:
            logger.warning("log-det failed: %s n=%d d=%d seed=%d rel_err=%.3e", a.kind, a.n, a.d, a.seed, a.rel_err)
        return not failed

    def check_gradients(self) -> bool:
        failed = [g for g in self.report.gradients if not g.passed]
        for g in failed:
            logger.warning("gradient audit failed: seed=%d max_rel_err=%.3e", g.seed, g.max_rel_err)
        return not failed

    def validate_suite(self) -> bool:
        checks = [self.check_roundtrip(), self.check_logdet(), self.check_gradients()]
        ok = all(checks)
        logger.info("Audit suite: %d layer audits, %d gradient audits, exponent verdict %s: %s",
                    len(self.report.audits), len(self.report.gradients),
                    self.report.exponent.get("verdict"), "PASS" if ok else "FAIL")
        return ok


def run_audit_suite(seeds: int = 20, inject_fault: bool = False, **kwargs) -> SuiteReport:
    return Validator(seeds=seeds, inject_fault=inject_fault, **kwargs).run()
