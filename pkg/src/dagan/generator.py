"""UResNet image-conditioned generator.

Encoder blocks run a densely connected multi-layer followed by a strided
down-scale layer; a second strided layer (the linear-projection bypass) carries
the block's features into the next block. The latent ``z`` is projected to the
bottleneck resolution and concatenated with the encoder output, and mirrored
decoder blocks upsample back to image space. Long skips concatenate encoder
multi-layer outputs into the decoder at matching resolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import functional as F
from .nn.layers import BatchRenorm, Conv2d, Dropout, Linear, Module
from .nn.tensor import DimensionError, Tensor, as_tensor, concat, grad, reshape


@dataclass(frozen=True)
class GeneratorSpec:
    num_blocks_per_side: int = 4
    layers_per_block: int = 4
    k_list: tuple = (64, 64, 64, 64)
    skip_distance: int = 2
    z_dim: int = 100
    image_size: tuple = (32, 32, 1)
    dropout_rate: float = 0.3
    projection_kernel: int = 3
    leak: float = 0.01
    renorm_momentum: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        h, w, _ = self.image_size
        factor = 2 ** self.num_blocks_per_side
        if self.num_blocks_per_side < 1:
            raise ValueError("num_blocks_per_side must be >= 1")
        if h % factor or w % factor:
            raise ValueError(
                f"image size {h}x{w} is not divisible by 2^{self.num_blocks_per_side}={factor}")
        if len(self.k_list) != self.num_blocks_per_side:
            raise ValueError(
                f"k_list has {len(self.k_list)} entries, expected {self.num_blocks_per_side}")
        if self.layers_per_block < 2:
            raise ValueError("layers_per_block must be >= 2 (one multi-layer conv plus the scaling layer)")
        if self.skip_distance < 1:
            raise ValueError("skip_distance must be >= 1")

    @property
    def bottleneck_size(self) -> tuple[int, int]:
        h, w, _ = self.image_size
        f = 2 ** self.num_blocks_per_side
        return h // f, w // f

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def vgg_face_spec(**overrides) -> GeneratorSpec:
    """64 filters in the outer two blocks on each side, 128 in the inner two."""
    base = dict(k_list=(64, 64, 128, 128), image_size=(64, 64, 3))
    base.update(overrides)
    return GeneratorSpec(**base)


class Layer(Module):
    """conv3x3 -> leaky relu -> batch renorm."""

    def __init__(self, in_ch, out_ch, stride, rng, leak, momentum, kernel_size=3):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel_size, stride, rng=rng, bias=False)
        self.norm = BatchRenorm(out_ch, momentum=momentum)
        self.leak = leak

    def forward(self, x):
        return self.norm(F.leaky_relu(self.conv(x), self.leak))


class MultiLayer(Module):
    """Densely connected stack whose concatenation window resets every ``skip_distance`` layers."""

    def __init__(self, in_ch, p_ch, n, skip_distance, k, rng, leak, momentum):
        super().__init__()
        self.skip_distance = skip_distance
        prev = [in_ch + p_ch]
        self.layers = []
        self.in_channels = []
        for _ in range(n - 1):
            c = sum(prev)
            self.in_channels.append(c)
            self.layers.append(Layer(c, k, 1, rng, leak, momentum))
            if len(prev) >= skip_distance:
                prev = [k]
            else:
                prev.append(k)

    def forward(self, x, p=None):
        prev = [x] if p is None else [concat([x, p], axis=1)]
        for layer in self.layers:
            x = layer(concat(prev, axis=1))
            if len(prev) >= self.skip_distance:
                prev = [x]
            else:
                prev.append(x)
        return x


class EncoderBlock(Module):
    def __init__(self, in_ch, p_ch, k, spec: GeneratorSpec, rng, with_projection: bool):
        super().__init__()
        n, mom, leak = spec.layers_per_block, spec.renorm_momentum, spec.leak
        self.multi = MultiLayer(in_ch, p_ch, n, spec.skip_distance, k, rng, leak, mom)
        self.down = Layer(k, k, 2, rng, leak, mom)
        self.drop = Dropout(spec.dropout_rate)
        self.projection = (Layer(k, k, 2, rng, leak, mom, kernel_size=spec.projection_kernel)
                           if with_projection else None)

    def forward(self, x, p=None):
        feat = self.multi(x, p)
        proj = self.projection(feat) if self.projection is not None else None
        return self.drop(self.down(feat)), proj, feat


class DecoderBlock(Module):
    def __init__(self, in_ch, p_ch, k, spec: GeneratorSpec, rng, with_projection: bool):
        super().__init__()
        n, mom, leak = spec.layers_per_block, spec.renorm_momentum, spec.leak
        self.multi = MultiLayer(in_ch, p_ch, n, spec.skip_distance, k, rng, leak, mom)
        self.up = Layer(k, k, 1, rng, leak, mom)
        self.projection = Conv2d(k, k, 3, 1, rng=rng, bias=False) if with_projection else None

    def forward(self, x, p=None):
        feat = self.multi(x, p)
        proj = self.projection(F.upsample_nearest(feat)) if self.projection is not None else None
        return self.up(F.upsample_nearest(feat)), proj


class Generator(Module):
    def __init__(self, spec: GeneratorSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        B = spec.num_blocks_per_side
        channels = spec.image_size[2]
        ks = spec.k_list
        self.encoder = []
        c_in, p_ch = channels, 0
        for i in range(B):
            last = i == B - 1
            self.encoder.append(EncoderBlock(c_in, p_ch, ks[i], spec, rng, with_projection=not last))
            c_in, p_ch = ks[i], ks[i]
        bh, bw = spec.bottleneck_size
        self.z_proj = Linear(spec.z_dim, ks[-1] * bh * bw, rng=rng)
        dec_ks = tuple(reversed(ks))
        self.decoder = []
        c_in, p_ch = 2 * ks[-1], 0
        for j in range(B):
            skip_ch = ks[B - j] if j >= 1 else 0
            last = j == B - 1
            self.decoder.append(DecoderBlock(c_in + skip_ch, p_ch, dec_ks[j], spec, rng,
                                             with_projection=not last))
            c_in, p_ch = dec_ks[j], dec_ks[j]
        self.out_conv = Conv2d(dec_ks[-1] + ks[0], channels, 3, 1, rng=rng, gain=1.0)
        # encoder levels whose long skip is zeroed (connectivity probes)
        self.ablate_skips: set[int] = set()

    def _check_input(self, x: Tensor, z: Tensor | None):
        h, w, c = self.spec.image_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise DimensionError(f"generator expects [N,{c},{h},{w}] images, got {x.shape}",
                                 axes=("C", "H", "W"))
        if z is not None:
            if z.ndim != 2 or z.shape[1] != self.spec.z_dim or z.shape[0] != x.shape[0]:
                raise DimensionError(
                    f"latent must be [{x.shape[0]},{self.spec.z_dim}], got {z.shape}", axes=("N", "z_dim"))

    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        feats, p = [], None
        for block in self.encoder:
            x, p, feat = block(x, p)
            feats.append(feat)
        return x, feats

    def _skip(self, feats, level):
        f = feats[level]
        if level in self.ablate_skips:
            return f * 0.0
        return f

    def forward(self, x, z) -> Tensor:
        x, z = as_tensor(x), as_tensor(z)
        self._check_input(x, z)
        r, feats = self.encode(x)
        n = x.shape[0]
        bh, bw = self.spec.bottleneck_size
        zmap = reshape(self.z_proj(z), (n, self.spec.k_list[-1], bh, bw))
        h = concat([r, zmap], axis=1)
        B = self.spec.num_blocks_per_side
        p = None
        for j, block in enumerate(self.decoder):
            if j >= 1:
                h = concat([h, self._skip(feats, B - j)], axis=1)
            h, p = block(h, p)
        h = concat([h, self._skip(feats, 0)], axis=1)
        out = self.out_conv(h).tanh()
        return (out + 1.0) * 0.5


_verified_specs: set = set()


def check_gradient_flow(gen: Generator, rng: np.random.Generator | None = None) -> list[str]:
    """Names of parameters that get an all-zero gradient from a generic loss on random input.

    Module state (moving statistics, mode) is restored afterwards.
    """
    rng = rng if rng is not None else np.random.default_rng(1234)
    saved = gen.state_dict()
    was_training = gen.training
    dropout_rngs = [(m, m.rng) for m in gen.modules() if isinstance(m, Dropout)]
    h, w, c = gen.spec.image_size
    gen.train().set_rng(np.random.default_rng(0))
    x = Tensor(rng.random((2, c, h, w)))
    z = Tensor(rng.normal(size=(2, gen.spec.z_dim)))
    target = Tensor(rng.random((2, c, h, w)))
    out = gen(x, z)
    diff = out - target
    loss = (diff * diff).mean()
    params = gen.named_parameters()
    names, tensors = zip(*params)
    grads = grad(loss, list(tensors))
    dead = [n for n, g in zip(names, grads) if not np.any(g.data != 0)]
    gen.load_state_dict(saved)
    gen.train(was_training)
    for m, r in dropout_rngs:
        m.rng = r
    return dead


def build_generator(spec: GeneratorSpec, rng: np.random.Generator, verify: bool = True) -> Generator:
    gen = Generator(spec, rng)
    if verify and spec not in _verified_specs:
        dead = check_gradient_flow(gen)
        if dead:
            raise RuntimeError(f"generator parameters without gradient: {dead}")
        _verified_specs.add(spec)
    return gen


def generate(gen: Generator, x, z, training: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    """Sample augmentations of ``x`` for latents ``z``; dropout draws from ``rng`` in training mode."""
    gen.train(training)
    if rng is not None:
        gen.set_rng(rng)
    return gen(x, z)


def encode_bottleneck(gen: Generator, x) -> Tensor:
    """Bottleneck representation of ``x`` before the latent is attached (eval mode)."""
    x = as_tensor(x)
    gen._check_input(x, None)
    was = gen.training
    gen.eval()
    try:
        r, _ = gen.encode(x)
    finally:
        gen.train(was)
    return r


__all__ = ["Generator", "GeneratorSpec", "build_generator", "check_gradient_flow", "encode_bottleneck",
           "generate", "vgg_face_spec"]

