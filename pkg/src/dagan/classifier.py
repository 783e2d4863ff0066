"""DenseNet classifier trained on few real target-domain cases, optionally augmented with generator samples."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data.augment import augment_batch
from .data.dataset import DatasetError, LabeledImageSet
from .densenet import DenseNet
from .nn import functional as F
from .nn.layers import Module
from .nn.optim import Adam
from .nn.tensor import Tensor, concat, get_default_dtype, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierSpec:
    num_blocks: int = 4
    layers_per_block: int = 3
    growth_rate: int = 64
    dropout_rate: float = 0.5
    image_channels: int = 1
    num_classes: int = 10
    norm: str = "batchrenorm"
    use_flag: bool = True
    leak: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AugmentationPolicy:
    """``rate`` generated samples per real example per epoch, with the real/fake flag values."""

    rate: int = 0
    flag_real: float = 1.0
    flag_fake: float = 0.0

    def __post_init__(self):
        if int(self.rate) != self.rate or self.rate < 0:
            raise ValueError(f"augmentation rate must be a non-negative integer, got {self.rate}")


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 64
    seed: int = 0
    standard_augmentation: bool = True


class Classifier(Module):
    """DenseNet over the image plus an optional constant flag plane (1 real, 0 generated)."""

    def __init__(self, spec: ClassifierSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        in_ch = spec.image_channels + (1 if spec.use_flag else 0)
        self.net = DenseNet(in_ch, spec.num_blocks, spec.layers_per_block, spec.growth_rate,
                            spec.num_classes, spec.norm, rng, dropout=spec.dropout_rate, leak=spec.leak)
        # when set, every input is marked as real regardless of its origin
        self.ablate_flag = False

    def layer_count(self) -> int:
        """Weight layers: every convolution plus the softmax head."""
        return self.net.conv_layer_count() + 1

    def forward(self, x, flag=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if self.spec.use_flag:
            n, _, h, w = x.shape
            f = np.ones(n, dtype=x.dtype) if flag is None or self.ablate_flag else np.asarray(flag, x.dtype)
            plane = np.broadcast_to(f[:, None, None, None], (n, 1, h, w))
            x = concat([x, Tensor(np.ascontiguousarray(plane))], axis=1)
        return self.net(x)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        was = self.training
        self.eval()
        out = []
        try:
            with no_grad():
                for s in range(0, len(x), batch_size):
                    out.append(np.argmax(self(Tensor(x[s:s + batch_size])).data, axis=1))
        finally:
            self.train(was)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def audit_layer_count(spec: ClassifierSpec) -> int:
    return Classifier(spec, np.random.default_rng(0)).layer_count()


class ProtocolAudit:
    """Ordered log of evaluations, used to prove test cases are touched once and only after selection."""

    def __init__(self):
        self.events: list[tuple[str, str]] = []

    def record(self, tag: str, label: str = "") -> None:
        self.events.append((tag, label))

    def count(self, tag: str) -> int:
        return sum(t == tag for t, _ in self.events)

    def check_test_last_and_once(self) -> None:
        tags = [t for t, _ in self.events]
        if tags.count("test") != 1:
            raise AssertionError(f"test cases evaluated {tags.count('test')} times, expected exactly once")
        if tags.index("test") != len(tags) - 1:
            raise AssertionError("test cases evaluated before model selection finished")


class _CountingGenerator:
    def __init__(self, generator):
        self.generator = generator
        self.calls = 0

    def __call__(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        self.calls += 1
        self.generator.eval()
        with no_grad():
            return self.generator(Tensor(x), Tensor(z)).data


@dataclass
class ClassifierResult:
    model: Classifier
    policy: AugmentationPolicy
    history: list = field(default_factory=list)
    generator_calls: int = 0
    items_per_epoch: int = 0


def _target_classes(dataset: LabeledImageSet) -> list[int]:
    return dataset.classes("target") if dataset.split_tags is not None else dataset.classes()


def training_items(real: np.ndarray, policy: AugmentationPolicy, gen, rng: np.random.Generator,
                   z_dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Real images with flag 1 followed by ``rate`` fresh generations per real image with flag 0.

    Returns ``(images, flags, source_index)`` where ``source_index`` maps each item to its real image.
    """
    n = len(real)
    idx = np.arange(n)
    if policy.rate == 0:
        return real, np.full(n, policy.flag_real, dtype=real.dtype), idx
    cond = np.repeat(real, policy.rate, axis=0)
    z = rng.normal(size=(len(cond), z_dim)).astype(real.dtype)
    fake = gen(cond, z)
    images = np.concatenate([real, fake])
    flags = np.concatenate([np.full(n, policy.flag_real), np.full(len(fake), policy.flag_fake)]).astype(real.dtype)
    return images, flags, np.concatenate([idx, np.repeat(idx, policy.rate)])


def train_classifier(spec: ClassifierSpec, dataset: LabeledImageSet, policy: AugmentationPolicy,
                     generator=None, config: ClassifierConfig = ClassifierConfig(),
                     train_tag: str = "train") -> ClassifierResult:
    """Fit a classifier on the target-domain ``train_tag`` cases.

    ``generator`` is a Generator (or loaded from a checkpoint by the caller); it is
    required when ``policy.rate > 0`` and never called otherwise.
    """
    if policy.rate > 0 and generator is None:
        raise ValueError("augmentation rate > 0 needs a trained generator checkpoint")
    classes = _target_classes(dataset)
    if spec.num_classes != len(classes):
        raise ValueError(f"classifier has {spec.num_classes} outputs but the target domain has {len(classes)} classes")
    x_real, y_real = dataset.stack(classes, train_tag)
    if len(x_real) == 0:
        raise DatasetError(f"no {train_tag!r} cases in the target domain")
    dtype = get_default_dtype()
    x_real = x_real.astype(dtype)
    rng = np.random.default_rng(config.seed)
    model = Classifier(spec, rng)
    model.set_rng(rng)
    opt = Adam(model.named_parameters(), config.lr, config.beta1, config.beta2)
    gen = _CountingGenerator(generator) if generator is not None else None
    z_dim = generator.spec.z_dim if generator is not None else 0
    history = []
    items = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        x, flags, src = training_items(x_real, policy, gen, rng, z_dim)
        y = y_real[src]
        items = len(x)
        if config.standard_augmentation:
            x = augment_batch(x, rng)
        perm = rng.permutation(len(x))
        losses = []
        for s in range(0, len(x), config.batch_size):
            b = perm[s:s + config.batch_size]
            if len(b) < 2:
                continue
            loss = F.cross_entropy(model(Tensor(x[b]), flags[b]), y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan")})
    if policy.rate == 0 and gen is not None and gen.calls:
        raise AssertionError("generator was invoked for a rate-0 policy")
    return ClassifierResult(model, policy, history, gen.calls if gen is not None else 0, items)


def evaluate(model, dataset: LabeledImageSet, case_tag: str, audit: ProtocolAudit | None = None,
             label: str = "") -> float:
    """Top-1 accuracy on the target-domain cases tagged ``case_tag``.

    ``model`` is a Classifier or any callable mapping ``[N,C,H,W]`` images to predicted labels.
    """
    if not case_tag:
        raise ValueError("case_tag must be non-empty")
    classes = _target_classes(dataset)
    x, y = dataset.stack(classes, case_tag)
    if len(x) == 0:
        raise DatasetError(f"no cases tagged {case_tag!r}")
    if audit is not None:
        audit.record(case_tag, label)
    pred = model.predict(x.astype(get_default_dtype())) if isinstance(model, Classifier) else np.asarray(model(x))
    return float(np.mean(pred == y))


@dataclass
class SweepResult:
    best_rate: int
    validation_accuracy: dict
    test_accuracy: float
    model: Classifier


def sweep_augmentation_rate(rates, spec: ClassifierSpec, dataset: LabeledImageSet, generator=None,
                            config: ClassifierConfig = ClassifierConfig(),
                            audit: ProtocolAudit | None = None) -> SweepResult:
    """Train one classifier per rate, pick the best validation accuracy (ties to the smaller rate),
    then evaluate only that model on the test cases."""
    rates = sorted(set(int(r) for r in rates))
    if not rates:
        raise ValueError("rates must be non-empty")
    audit = audit if audit is not None else ProtocolAudit()
    val, models = {}, {}
    for r in rates:
        res = train_classifier(spec, dataset, AugmentationPolicy(r), generator if r > 0 else None, config)
        val[r] = evaluate(res.model, dataset, "val", audit, label=f"rate={r}")
        models[r] = res.model
        log.info("rate %d: validation accuracy %.4f", r, val[r])
    best = max(rates, key=lambda r: (val[r], -r))
    test = evaluate(models[best], dataset, "test", audit, label=f"rate={best}")
    audit.check_test_last_and_once()
    return SweepResult(best, val, test, models[best])


RESULT_FIELDS = ("experiment_id", "samples_per_class", "test_accuracy")


def write_results_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([r["experiment_id"], r["samples_per_class"], repr(float(r["test_accuracy"]))])
