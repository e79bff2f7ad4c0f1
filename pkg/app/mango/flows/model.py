"""
model.py

Flow assembly: cross-attention layers bound to a partition scheme, blocks of
those layers plus a coupling, the full flow with its standard-normal prior,
the two baseline flows used for ablations, and checkpoint I/O.

A block of the default variant holds, in order:
    2 ICA layers with MMCA (A->B, then B->A)
    4 ICA layers with IMCA (modes 1-4)
    2 ICA layers with LICA
    1 affine coupling over the token halves (modality A conditions B in
      even blocks, B conditions A in odd ones)
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from mango.core.tensor import Parameter, Tensor, as_tensor
from mango.errors import (
    ConfigError,
    ConfigMismatchError,
    DimensionError,
    FormatError,
    InputError,
    LayoutError,
    NumericError,
)
from mango.flows.coupling import DEFAULT_SCALE_BOUND, AffineCoupling, coupling_parameter_count
from mango.flows.ica import AttentionMatrix, IcaLayer
from mango.flows.partition import (
    ModalityLayout,
    LuPermutation,
    PartitionScheme,
    lica_apply,
    merge,
    partition,
)
from mango.utils.container import read_container, write_container
from mango.utils.seeding import rng_stream

logger = logging.getLogger(__name__)

VARIANTS = ("mango", "coupling_only", "glow_linear")
PARTITIONS = ("mmca", "mmca+imca", "mmca+imca+lica")
LOG_2PI = float(np.log(2.0 * np.pi))
CHECKPOINT_KIND = "checkpoint"
COUPLINGS_PER_BASELINE_BLOCK = 9


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a flow. `hidden` = 0 means 4 * d_model."""

    d_model: int = 4
    n_tokens_per_modality: int = 4
    blocks: int = 2
    variant: str = "mango"
    partitions: str = "mmca+imca+lica"
    hidden: int = 0
    scale_bound: float = DEFAULT_SCALE_BOUND
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}", "variant")
        if self.partitions not in PARTITIONS:
            raise ConfigError(f"unknown partitions {self.partitions!r}; expected one of {PARTITIONS}", "partitions")
        if self.blocks < 0:
            raise ConfigError("must be >= 0", "blocks")
        if self.d_model < 1:
            raise ConfigError("must be >= 1", "d_model")

    @property
    def layout(self) -> ModalityLayout:
        return ModalityLayout(self.n_tokens_per_modality, self.n_tokens_per_modality)

    @property
    def hidden_width(self) -> int:
        return self.hidden or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


class CrossAttentionLayer:
    """An IcaLayer bound to one partition scheme.

    For LICA the token mixing before the split and the unmixing in the merge
    cancel in the determinant, so only the attention diagonal contributes.
    """

    def __init__(self, scheme: PartitionScheme, layout: ModalityLayout, d_model: int,
                 rng: np.random.Generator, name: str = "layer"):
        self.scheme = scheme
        self.layout = layout
        self.name = name
        self.ica = IcaLayer(d_model, layout.n // 2, rng, name=f"{name}.ica")

    def parameters(self) -> list[Parameter]:
        return self.ica.parameters() + self.scheme.parameters()

    def buffers(self) -> dict[str, np.ndarray]:
        return self.scheme.lu.buffers() if self.scheme.lu is not None else {}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        if self.scheme.lu is not None:
            self.scheme.lu.load_buffers(values)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        x1, x2 = partition(self.scheme, x, self.layout)
        result = self.ica.forward(x1, x2)
        return merge(self.scheme, x1, result.y2, self.layout), result.log_det

    def inverse(self, y) -> Tensor:
        y1, y2 = partition(self.scheme, y, self.layout)
        return merge(self.scheme, y1, self.ica.inverse(y1, y2), self.layout)

    def attention_map(self, x) -> AttentionMatrix:
        x1, _ = partition(self.scheme, x, self.layout)
        return self.ica.attention_map(x1)

    def origins(self) -> tuple[np.ndarray, np.ndarray]:
        return self.scheme.origins(self.layout)


class TokenMixing:
    """Invertible LU token mixing, the linear step of the glow_linear baseline."""

    def __init__(self, n_tokens: int, d_model: int, rng: np.random.Generator, name: str = "mixing"):
        self.d_model = d_model
        self.name = name
        self.lu = LuPermutation(n_tokens, rng, name=f"{name}.lu")

    def parameters(self) -> list[Parameter]:
        return self.lu.parameters()

    def buffers(self) -> dict[str, np.ndarray]:
        return self.lu.buffers()

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        self.lu.load_buffers(values)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        # W acts on every feature channel separately
        return lica_apply(self.lu, x), self.lu.log_abs_det() * float(self.d_model)

    def inverse(self, y) -> Tensor:
        return lica_apply(self.lu, y, inverse=True)


class FlowBlock:
    """An ordered list of invertible sub-layers."""

    def __init__(self, layers: list, name: str = "block"):
        self.layers = layers
        self.name = name

    def __len__(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x) -> tuple[Tensor, Tensor]:
        x = as_tensor(x)
        log_det = Tensor(np.zeros(x.shape[:-2]))
        for layer in self.layers:
            x, ld = layer.forward(x)
            log_det = log_det + ld
        return x, log_det

    def inverse(self, y) -> Tensor:
        y = as_tensor(y)
        for layer in reversed(self.layers):
            y = layer.inverse(y)
        return y


class FlowModel:
    """Stack of blocks with a standard-normal prior over all n * d entries.

    Attributes:
        config (ModelConfig): The architecture this model was built from.
        layout (ModalityLayout): Token counts per modality.
        blocks (list[FlowBlock]): Applied in order by forward.
        pad_embedding (Parameter): [d_model] vector substituted at pad positions.
    """

    def __init__(self, config: ModelConfig, blocks: list[FlowBlock]):
        self.config = config
        self.layout = config.layout
        self.d_model = config.d_model
        self.blocks = blocks
        self.pad_embedding = Parameter(np.zeros(config.d_model), "pad_embedding")
        if blocks:
            self.layout.validate(need_even_halves=any(
                isinstance(layer, CrossAttentionLayer) and layer.scheme.mode is not None
                for block in blocks for layer in block.layers))

    # -----------------------------
    # Parameters and state
    # -----------------------------

    def parameters(self) -> list[Parameter]:
        return [p for block in self.blocks for p in block.parameters()] + [self.pad_embedding]

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ConfigError(f"duplicate parameter name {p.name!r}")
            named[p.name] = p
        return named

    def _layers(self):
        return [layer for block in self.blocks for layer in block.layers]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._layers():
            if hasattr(layer, "buffers"):
                out.update(layer.buffers())
        return out

    def parameter_count(self) -> int:
        """Trainable scalars, not counting the masked halves of LU factors."""
        total = sum(p.size for p in self.parameters())
        for layer in self._layers():
            lu = getattr(layer, "lu", None) or getattr(getattr(layer, "scheme", None), "lu", None)
            if lu is not None:
                total -= sum(p.size for p in lu.parameters()) - lu.free_parameter_count()
        return total

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: value.copy() for name, value in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        expected = set(named) | set(self.buffers())
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise ConfigMismatchError(
                f"state does not fit this model (missing {sorted(missing)}, unexpected {sorted(unexpected)})",
                "tensors")
        for name, p in named.items():
            p.assign(state[name])
        for layer in self._layers():
            if hasattr(layer, "load_buffers"):
                layer.load_buffers(state)

    def cross_attention_layers(self) -> list[CrossAttentionLayer]:
        return [layer for layer in self._layers() if isinstance(layer, CrossAttentionLayer)]

    def attention_at(self, f, index: int) -> tuple[AttentionMatrix, CrossAttentionLayer]:
        """Attention of the index-th cross-attention layer with f pushed through the layers before it."""
        layers = self.cross_attention_layers()
        if not 0 <= index < len(layers):
            raise IndexError(f"layer index {index} out of range; model has {len(layers)} cross-attention layers")
        target = layers[index]
        x = as_tensor(f)
        self._check_input(x)
        for layer in self._layers():
            if layer is target:
                return layer.attention_map(x), layer
            x, _ = layer.forward(x)
        raise IndexError(f"layer index {index} not reached")

    # -----------------------------
    # Flow
    # -----------------------------

    def embed(self, tokens, pad_mask=None) -> Tensor:
        """Substitute the pad embedding at masked positions."""
        tokens = as_tensor(tokens)
        if pad_mask is None or not np.any(pad_mask):
            return tokens
        mask = np.asarray(pad_mask, dtype=np.float64)[..., None]
        return tokens * (1.0 - mask) + self.pad_embedding * mask

    def _check_input(self, x: Tensor):
        if not self.blocks:
            return
        if x.ndim < 2 or x.shape[-2:] != (self.layout.n, self.d_model):
            raise LayoutError(f"expected tokens [..., {self.layout.n}, {self.d_model}], got {x.shape}")

    def forward(self, f) -> tuple[Tensor, Tensor]:
        """z = G(f) and the per-sample log|det dG/df|, shape f.shape[:-2]."""
        x = as_tensor(f)
        self._check_input(x)
        log_det = Tensor(np.zeros(x.shape[:-2]))
        for index, block in enumerate(self.blocks):
            try:
                x, ld = block.forward(x)
            except InputError as e:
                raise NumericError(f"block {index}: {e}", block_index=index) from e
            if not (np.isfinite(x.data).all() and np.isfinite(ld.data).all()):
                raise NumericError(f"non-finite values after block {index}", block_index=index)
            log_det = log_det + ld
        return x, log_det

    def inverse(self, z) -> Tensor:
        y = as_tensor(z)
        self._check_input(y)
        for index in range(len(self.blocks) - 1, -1, -1):
            y = self.blocks[index].inverse(y)
            if not np.isfinite(y.data).all():
                raise NumericError(f"non-finite values inverting block {index}", block_index=index)
        return y

    def log_prior(self, z) -> Tensor:
        z = as_tensor(z)
        dims = z.shape[-2] * z.shape[-1]
        return (z * z).sum(axis=(-2, -1)) * -0.5 - 0.5 * dims * LOG_2PI

    def nll_from(self, z: Tensor, log_det: Tensor) -> Tensor:
        return -(self.log_prior(z) + log_det)

    def nll(self, f) -> Tensor:
        """Per-sample negative log-likelihood in nats."""
        z, log_det = self.forward(f)
        return self.nll_from(z, log_det)

    def nll_per_dim(self, f) -> float:
        """Mean nll over the batch divided by n * d."""
        f = as_tensor(f)
        return float(np.mean(self.nll(f).data)) / (f.shape[-2] * f.shape[-1])

    def roundtrip_error(self, f) -> float:
        """Infinity-norm of inverse(forward(f)) - f."""
        f = as_tensor(f)
        z, _ = self.forward(f)
        return float(np.max(np.abs(self.inverse(z).data - f.data), initial=0.0))

    def sample(self, count: int, seed: int) -> np.ndarray:
        """`count` token batches drawn through the inverse flow, shape [count, n, d]."""
        rng = rng_stream(seed, "sampling")
        z = rng.standard_normal((count, self.layout.n, self.d_model))
        if count == 0:
            return z
        return self.inverse(z).data


# -----------------------------
# Builders
# -----------------------------

def block_schemes(partitions: str, n_tokens: int, rng: np.random.Generator, prefix: str) -> list[PartitionScheme]:
    """Partition schemes of the eight cross-attention layers of one block."""
    mmca_pair = [PartitionScheme.mmca(a_to_b=True), PartitionScheme.mmca(a_to_b=False)]
    imca = [PartitionScheme.imca(mode) for mode in (1, 2, 3, 4)]
    if partitions == "mmca":
        return mmca_pair * 4
    if partitions == "mmca+imca":
        return mmca_pair + imca + mmca_pair
    if partitions == "mmca+imca+lica":
        lica = [PartitionScheme.lica(LuPermutation(n_tokens, rng, name=f"{prefix}.layer{6 + i}.lu")) for i in range(2)]
        return mmca_pair + imca + lica
    raise ConfigError(f"unknown partitions {partitions!r}", "partitions")


def build_block(config: ModelConfig, index: int, rng: np.random.Generator) -> FlowBlock:
    """One block of the default variant; couplings alternate token halves by block parity."""
    prefix = f"block{index}"
    layout = config.layout
    layers = [
        CrossAttentionLayer(scheme, layout, config.d_model, rng, name=f"{prefix}.layer{i}")
        for i, scheme in enumerate(block_schemes(config.partitions, layout.n, rng, prefix))
    ]
    layers.append(AffineCoupling(config.d_model, config.hidden_width, rng, flip=index % 2 == 1,
                                 scale_bound=config.scale_bound, split_axis="tokens",
                                 name=f"{prefix}.layer{len(layers)}"))
    return FlowBlock(layers, name=prefix)


def glow_repeats(config: ModelConfig) -> int:
    """Mixing+coupling pairs per glow_linear block so its size tracks the default block."""
    n, d = config.layout.n, config.d_model
    ica = 2 * d * d + 4 * d + 1
    lica = 2 * n * n if config.partitions == "mmca+imca+lica" else 0
    block = 8 * ica + lica + coupling_parameter_count(d, config.hidden_width, "tokens")
    pair = n * n + coupling_parameter_count(d, config.hidden_width, "features")
    return max(1, round(block / pair))


def build_baseline_block(kind: str, config: ModelConfig, index: int, rng: np.random.Generator) -> FlowBlock:
    prefix = f"block{index}"
    d, h = config.d_model, config.hidden_width
    layers = []
    if kind == "coupling_only":
        for i in range(COUPLINGS_PER_BASELINE_BLOCK):
            layers.append(AffineCoupling(d, h, rng, flip=(index + i) % 2 == 1,
                                         scale_bound=config.scale_bound, name=f"{prefix}.layer{i}"))
    elif kind == "glow_linear":
        for i in range(glow_repeats(config)):
            layers.append(TokenMixing(config.layout.n, d, rng, name=f"{prefix}.layer{2 * i}"))
            layers.append(AffineCoupling(d, h, rng, flip=(index + i) % 2 == 1,
                                         scale_bound=config.scale_bound, name=f"{prefix}.layer{2 * i + 1}"))
    else:
        raise ConfigError(f"unknown baseline {kind!r}", "variant")
    return FlowBlock(layers, name=prefix)


def build_model(config: ModelConfig) -> FlowModel:
    """Dispatch on config.variant; initialization uses the seed's `init` stream."""
    rng = rng_stream(config.seed, "init")
    if config.variant == "mango":
        blocks = [build_block(config, b, rng) for b in range(config.blocks)]
    else:
        blocks = [build_baseline_block(config.variant, config, b, rng) for b in range(config.blocks)]
    model = FlowModel(config, blocks)
    logger.debug("Built %s model: %d blocks, %d parameters", config.variant, config.blocks, model.parameter_count())
    return model


def build_baseline(kind: str, config: ModelConfig | None = None) -> FlowModel:
    return build_model(replace(config or ModelConfig(), variant=kind))


# -----------------------------
# Checkpoints
# -----------------------------

@dataclass
class Checkpoint:
    """A loaded checkpoint: the model, its header and any extra tensors stored beside it."""

    model: FlowModel
    header: dict
    extras: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(model: FlowModel, path, extra: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> str:
    """Write model state to an "MNGO" container and return its sha256.

    Extra tensors (e.g. compressor state) are stored under an `extra/` prefix.
    """
    tensors = {f"model/{name}": value for name, value in model.state_dict().items()}
    tensors.update({f"extra/{name}": value for name, value in (extra_tensors or {}).items()})
    header = {"kind": CHECKPOINT_KIND, "config": model.config.to_dict(), "extra": extra or {}}
    return write_container(path, header, tensors)


def _check_expected(stored: ModelConfig, expect) -> None:
    if expect is None:
        return
    expected = expect.to_dict() if isinstance(expect, ModelConfig) else dict(expect)
    stored_values = stored.to_dict()
    for key, value in expected.items():
        if key == "seed" or key not in stored_values:
            continue
        if getattr(stored, key, None) != value:
            raise ConfigMismatchError(
                f"checkpoint has {getattr(stored, key, None)!r}, expected {value!r}", key)


def read_checkpoint(path, expect=None) -> Checkpoint:
    """Read a checkpoint; the model is only built once the whole file has parsed."""
    header, tensors = read_container(path, kind=CHECKPOINT_KIND)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError) as e:
        raise FormatError(f"checkpoint header has no usable config: {e}", 16) from None
    _check_expected(config, expect)
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    extras = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    model = build_model(config)
    try:
        model.load_state_dict(state)
    except DimensionError as e:
        raise FormatError(f"tensor shape does not match the stored config: {e}", 16) from None
    return Checkpoint(model=model, header=header, extras=extras)


def load_checkpoint(path, expect=None) -> FlowModel:
    return read_checkpoint(path, expect).model
