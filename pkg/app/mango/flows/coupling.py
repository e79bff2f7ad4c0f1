"""
coupling.py

Affine coupling over a split of the token batch, and the small perceptron it
conditions on. The split runs either along the feature axis of every token
(the coupling-only and glow_linear baselines) or along the token axis, where
the first half of the tokens conditions the second half row by row (the
coupling that closes each default block).
"""

import numpy as np

from mango.core.tensor import Parameter, Tensor, as_tensor, concat, exp, split, tanh
from mango.errors import DimensionError, LayoutError

DEFAULT_SCALE_BOUND = 2.0
SPLITS = ("features", "tokens")


class Mlp:
    """Two-layer tanh perceptron applied to the last axis.

    With zero_output the second layer starts at zero, so the network
    initially outputs exactly 0.
    """

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator,
                 name: str = "mlp", zero_output: bool = True):
        self.name = name
        self.w1 = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, hidden)), f"{name}.w1")
        self.b1 = Parameter(np.zeros(hidden), f"{name}.b1")
        w2 = np.zeros((hidden, d_out)) if zero_output else rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d_out))
        self.w2 = Parameter(w2, f"{name}.w2")
        self.b2 = Parameter(np.zeros(d_out), f"{name}.b2")

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x) -> Tensor:
        return tanh(as_tensor(x) @ self.w1 + self.b1) @ self.w2 + self.b2


def coupling_parameter_count(d_model: int, hidden: int, split_axis: str = "features", flip: bool = False) -> int:
    """Trainable scalars of one AffineCoupling, bound included."""
    if split_axis == "tokens":
        d_cond = d_trans = d_model
    else:
        cut = d_model // 2
        d_cond, d_trans = (d_model - cut, cut) if flip else (cut, d_model - cut)
    return 2 * (d_cond * hidden + hidden + hidden * d_trans + d_trans) + 1


class AffineCoupling:
    """y2 = x2 * exp(S(x1)) + T(x1).

    With split_axis="features" the first d_model // 2 features of every token
    condition the rest. With split_axis="tokens" the first n // 2 tokens
    condition the last n // 2, row i of x1 driving row i of x2. `flip` swaps
    the roles in both cases. S is squashed to [-|bound|, |bound|] by tanh
    times a learnable bound that starts at scale_bound.
    """

    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator, flip: bool = False,
                 scale_bound: float = DEFAULT_SCALE_BOUND, split_axis: str = "features", name: str = "coupling"):
        if split_axis not in SPLITS:
            raise LayoutError(f"unknown coupling split {split_axis!r}; expected one of {SPLITS}")
        if split_axis == "features" and d_model < 2:
            raise DimensionError("AffineCoupling needs at least two features", (d_model,))
        self.d_model = d_model
        self.flip = flip
        self.split_axis = split_axis
        self.name = name
        if split_axis == "tokens":
            self.d_cond = self.d_trans = d_model
        else:
            cut = d_model // 2
            self.d_cond, self.d_trans = (d_model - cut, cut) if flip else (cut, d_model - cut)
        self.s_net = Mlp(self.d_cond, hidden, self.d_trans, rng, name=f"{name}.s_net")
        self.t_net = Mlp(self.d_cond, hidden, self.d_trans, rng, name=f"{name}.t_net")
        self.bound = Parameter(float(scale_bound), f"{name}.bound")

    @property
    def scale_bound(self) -> float:
        return float(np.abs(self.bound.data))

    def parameters(self) -> list[Parameter]:
        return self.s_net.parameters() + self.t_net.parameters() + [self.bound]

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim < 2 or x.shape[-1] != self.d_model:
            raise DimensionError(self.name, x.shape, (self.d_model,))
        if self.split_axis == "tokens":
            if x.shape[-2] % 2:
                raise LayoutError(f"{self.name}: token split needs an even token count, got {x.shape[-2]}")
            first, second = split(x, x.shape[-2] // 2, axis=-2)
        else:
            first, second = split(x, self.d_model // 2, axis=-1)
        return (second, first) if self.flip else (first, second)

    def _merge(self, x1: Tensor, x2: Tensor) -> Tensor:
        axis = -2 if self.split_axis == "tokens" else -1
        return concat([x2, x1] if self.flip else [x1, x2], axis=axis)

    def scale_shift(self, x1) -> tuple[Tensor, Tensor]:
        x1 = as_tensor(x1)
        s = tanh(self.s_net(x1)) * self.bound
        return s, self.t_net(x1)

    def coupling_forward(self, x1, x2) -> Tensor:
        s, t = self.scale_shift(x1)
        return as_tensor(x2) * exp(s) + t

    def coupling_inverse(self, y1, y2) -> Tensor:
        s, t = self.scale_shift(y1)
        return (as_tensor(y2) - t) * exp(-s)

    def coupling_logdet(self, x1) -> Tensor:
        """Sum of S over tokens and transformed features, per batch entry."""
        s, _ = self.scale_shift(x1)
        return s.sum(axis=(-2, -1))

    def forward(self, x) -> tuple[Tensor, Tensor]:
        x1, x2 = self._split(as_tensor(x))
        s, t = self.scale_shift(x1)
        y2 = x2 * exp(s) + t
        return self._merge(x1, y2), s.sum(axis=(-2, -1))

    def inverse(self, y) -> Tensor:
        y1, y2 = self._split(as_tensor(y))
        return self._merge(y1, self.coupling_inverse(y1, y2))
