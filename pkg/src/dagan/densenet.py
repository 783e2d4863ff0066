"""DenseNet building blocks shared by the critic and the classifier."""
from __future__ import annotations

from .nn import functional as F
from .nn.layers import BatchRenorm, Conv2d, Dropout, LayerNorm, Linear, Module
from .nn.tensor import DimensionError, Tensor, concat


def _norm(kind: str, channels: int) -> Module:
    if kind == "layer":
        return LayerNorm(channels)
    if kind == "batchrenorm":
        return BatchRenorm(channels)
    raise ValueError(f"unknown norm {kind!r}")


class DenseLayer(Module):
    """norm -> leaky relu -> conv3x3 producing ``k`` new channels."""

    def __init__(self, in_ch, k, norm, rng, leak=0.2, dropout=0.0):
        super().__init__()
        self.norm = _norm(norm, in_ch)
        self.conv = Conv2d(in_ch, k, 3, 1, rng=rng)
        self.drop = Dropout(dropout) if dropout > 0 else None
        self.leak = leak

    def forward(self, x):
        y = self.conv(F.leaky_relu(self.norm(x), self.leak))
        return self.drop(y) if self.drop is not None else y


class DenseBlock(Module):
    def __init__(self, in_ch, layers, k, norm, rng, leak=0.2, dropout=0.0):
        super().__init__()
        if layers < 1:
            raise ValueError("a dense block needs at least one layer")
        self.layers = [
            DenseLayer(in_ch + i * k, k, norm, rng, leak, dropout if i == layers - 1 else 0.0)
            for i in range(layers)
        ]
        self.out_channels = in_ch + layers * k
        # indices of layers whose output is zeroed before it is passed on (connectivity probes)
        self.ablate: set[int] = set()

    def forward(self, x):
        feats = [x]
        for i, layer in enumerate(self.layers):
            y = layer(concat(feats, axis=1))
            feats.append(y * 0.0 if i in self.ablate else y)
        return concat(feats, axis=1)


class TransitionLayer(Module):
    """norm -> leaky relu -> 1x1 conv (compression) -> 2x2 average pool."""

    def __init__(self, in_ch, norm, rng, compression=0.5, leak=0.2):
        super().__init__()
        self.out_channels = max(1, int(in_ch * compression))
        self.norm = _norm(norm, in_ch)
        self.conv = Conv2d(in_ch, self.out_channels, 1, 1, rng=rng)
        self.leak = leak

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        if h % 2 or w % 2:
            raise DimensionError(f"transition layer needs even spatial dims, got {h}x{w}", axes=("H", "W"))
        return F.avg_pool2d(self.conv(F.leaky_relu(self.norm(x), self.leak)), 2)


class DenseNet(Module):
    """Alternating dense blocks and transitions, then global average pool and a linear head."""

    def __init__(self, in_ch, num_blocks, layers_per_block, k, num_outputs, norm, rng,
                 dropout=0.0, leak=0.2, compression=0.5):
        super().__init__()
        self.blocks, self.transitions = [], []
        c = in_ch
        for _ in range(num_blocks):
            block = DenseBlock(c, layers_per_block, k, norm, rng, leak, dropout)
            self.blocks.append(block)
            trans = TransitionLayer(block.out_channels, norm, rng, compression, leak)
            self.transitions.append(trans)
            c = trans.out_channels
        self.head = Linear(c, num_outputs, rng=rng)
        self.feature_channels = c

    def features(self, x: Tensor) -> Tensor:
        for block, trans in zip(self.blocks, self.transitions):
            x = trans(block(x))
        return F.global_avg_pool(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def conv_layer_count(self) -> int:
        return sum(isinstance(m, Conv2d) for m in self.modules())


def dense_block(block: DenseBlock, x) -> Tensor:
    return block(x)


def transition_layer(layer: TransitionLayer, x) -> Tensor:
    return layer(x)

