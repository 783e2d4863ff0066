"""Wasserstein critic over ordered image pairs (conditioning image, candidate)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .densenet import DenseNet
from .nn.layers import BatchRenorm, Module
from .nn.tensor import DimensionError, Tensor, as_tensor, concat


@dataclass(frozen=True)
class CriticSpec:
    num_dense_blocks: int = 4
    layers_per_block: int = 4
    growth_rate: int = 64
    dropout_rate: float = 0.0
    image_channels: int = 1
    leak: float = 0.2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CriticSpec":
        return cls(**d)


class Critic(Module):
    """DenseNet with layer normalisation; the pair enters as a channel concatenation.

    Output is one unbounded score per pair; nothing symmetrises the two inputs.
    """

    def __init__(self, spec: CriticSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.net = DenseNet(2 * spec.image_channels, spec.num_dense_blocks, spec.layers_per_block,
                            spec.growth_rate, 1, "layer", rng, dropout=spec.dropout_rate, leak=spec.leak)
        if any(isinstance(m, BatchRenorm) for m in self.modules()):
            raise AssertionError("critic must not contain batch normalisation")

    def forward(self, x_a, x_b) -> Tensor:
        x_a, x_b = as_tensor(x_a), as_tensor(x_b)
        if x_a.shape != x_b.shape:
            raise DimensionError(f"critic pair shapes differ: {x_a.shape} vs {x_b.shape}", axes=("x_a", "x_b"))
        if x_a.ndim != 4 or x_a.shape[1] != self.spec.image_channels:
            raise DimensionError(
                f"critic expects [N,{self.spec.image_channels},H,W] images, got {x_a.shape}", axes=("C",))
        return self.net(concat([x_a, x_b], axis=1))


def build_critic(spec: CriticSpec, rng: np.random.Generator) -> Critic:
    return Critic(spec, rng)


def critic_score(critic: Critic, x_a, x_b, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    critic.train(training)
    if rng is not None:
        critic.set_rng(rng)
    return critic(x_a, x_b)
