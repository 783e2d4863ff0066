"""Desk-scale presets: small networks, the synthetic glyph task and an oracle glyph classifier.

Everything here is sized for a single CPU core and is used by the acceptance
tests and the CLI ``--preset toy`` option.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .classifier import Classifier, ClassifierSpec
from .critic import CriticSpec
from .data.augment import augment_batch
from .data.dataset import LabeledImageSet, to_nchw
from .data.glyphs import make_glyph_dataset
from .data.splits import SplitSpec, split_domains
from .generator import Generator, GeneratorSpec
from .matchnet import EmbedSpec
from .nn import functional as F
from .nn.optim import Adam
from .nn.tensor import Tensor, no_grad
from .trainer import TrainConfig

TOY_GENERATOR = GeneratorSpec(num_blocks_per_side=3, layers_per_block=3, k_list=(16, 16, 16), z_dim=32)
TOY_CRITIC = CriticSpec(num_dense_blocks=3, layers_per_block=3, growth_rate=8)
# small batches give the generator enough updates within a 50-epoch budget
TOY_TRAIN = TrainConfig(epochs=50, lr=5e-4, batch_size=8, seed=0)
TOY_CLASSIFIER = ClassifierSpec(num_blocks=3, layers_per_block=2, growth_rate=8, num_classes=10, norm="layer")
TOY_EMBED = EmbedSpec(filters=32, depth=4)
ORACLE_SPEC = ClassifierSpec(num_blocks=3, layers_per_block=2, growth_rate=8, dropout_rate=0.0,
                             num_classes=8, norm="layer", use_flag=False)


def reduced_task(glyph_seed: int = 1, split_seed: int = 0, samples_per_class: int = 50) -> LabeledImageSet:
    """45 glyph classes cut into 30 source, 5 validation and 10 target classes."""
    ds = make_glyph_dataset(45, samples_per_class, seed=glyph_seed, name="glyphs45")
    return split_domains(ds, SplitSpec("glyphs45", split_seed, (30, 35)))


def capped(dataset: LabeledImageSet, per_class: int) -> LabeledImageSet:
    """Keep the first ``per_class`` images of every class (drops case tags)."""
    return replace(dataset, images=[im[:per_class] for im in dataset.images], case_tags=None)


def glyph_arrays(dataset: LabeledImageSet) -> tuple[np.ndarray, np.ndarray]:
    """All images of a dataset as ``[N,C,H,W]`` with their class ids."""
    x = np.concatenate([to_nchw(im) for im in dataset.images])
    y = np.repeat(np.arange(dataset.class_count), [len(im) for im in dataset.images])
    return x.astype(np.float32), y


def window_means(values, window: int = 5) -> np.ndarray:
    """Means of consecutive non-overlapping windows; a trailing partial window is dropped."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[:n * window].reshape(n, window).mean(axis=1)


def is_strictly_decreasing(values) -> bool:
    v = np.asarray(values)
    return bool(len(v) >= 2 and np.all(np.diff(v) < 0))


@dataclass
class OracleResult:
    model: Classifier
    real_accuracy: float


def train_oracle(num_classes: int = 8, samples_per_class: int = 200, epochs: int = 15, seed: int = 0,
                 glyph_seed: int = 0, holdout: LabeledImageSet | None = None) -> OracleResult:
    """Fit a glyph classifier on renders disjoint from the GAN's training renders.

    The oracle sees noise and shift augmentation but no rotations, since a
    quarter turn can map one glyph onto another. ``holdout`` (default: the
    standard render stream) measures its accuracy on real glyphs.
    """
    train_set = make_glyph_dataset(num_classes, samples_per_class, seed=glyph_seed, render_stream=1)
    holdout = holdout if holdout is not None else make_glyph_dataset(num_classes, 50, seed=glyph_seed)
    x, y = glyph_arrays(train_set)
    spec = ClassifierSpec(**{**ORACLE_SPEC.to_dict(), "num_classes": num_classes,
                             "image_channels": x.shape[1]})
    rng = np.random.default_rng(seed)
    model = Classifier(spec, rng)
    model.set_rng(rng)
    opt = Adam(model.named_parameters(), 1e-3, 0.9, 0.99)
    for _ in range(epochs):
        model.train()
        perm = rng.permutation(len(x))
        xa = augment_batch(x, rng, rotate=False)
        for s in range(0, len(x), 32):
            b = perm[s:s + 32]
            loss = F.cross_entropy(model(Tensor(xa[b])), y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
    xh, yh = glyph_arrays(holdout)
    return OracleResult(model, float(np.mean(model.predict(xh) == yh)))


def generate_batch(generator: Generator, x: np.ndarray, seed: int = 1, batch_size: int = 50) -> np.ndarray:
    """One generation per conditioning image, in eval mode, with latents from ``seed``."""
    generator.eval()
    z = np.random.default_rng(seed).normal(size=(len(x), generator.spec.z_dim)).astype(np.float32)
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(generator(Tensor(x[s:s + batch_size]), Tensor(z[s:s + batch_size])).data)
    return np.concatenate(out)


def class_assignment_rate(oracle: Classifier, generator: Generator, x: np.ndarray, y: np.ndarray,
                          seed: int = 1) -> float:
    """Fraction of generations the oracle assigns to the conditioning image's class."""
    return float(np.mean(oracle.predict(generate_batch(generator, x, seed)) == y))
