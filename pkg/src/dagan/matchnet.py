"""One-shot evaluation: matching networks, generator-augmented episodes, sample selector, pixel baseline."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data.dataset import DatasetError, LabeledImageSet, to_nchw
from .nn import functional as F
from .nn.layers import BatchRenorm, Conv2d, Linear, Module
from .nn.optim import Adam
from .nn.tensor import Tensor, as_tensor, concat, get_default_dtype, no_grad
from .checkpoint import Checkpoint, load_checkpoint
from .trainer import frozen

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# networks


@dataclass(frozen=True)
class EmbedSpec:
    filters: int = 64
    depth: int = 4
    image_channels: int = 1
    image_size: int = 32

    @property
    def out_dim(self) -> int:
        side = self.image_size // 2 ** self.depth
        return side * side * self.filters


class Embedding(Module):
    """``depth`` x (conv3x3, relu, batch renorm, 2x2 max-pool), then flatten."""

    def __init__(self, spec: EmbedSpec, rng: np.random.Generator):
        super().__init__()
        if spec.image_size % 2 ** spec.depth:
            raise ValueError(f"image size {spec.image_size} is not divisible by 2^{spec.depth}")
        self.spec = spec
        self.convs, self.norms = [], []
        c = spec.image_channels
        for _ in range(spec.depth):
            self.convs.append(Conv2d(c, spec.filters, 3, 1, rng=rng, bias=False))
            self.norms.append(BatchRenorm(spec.filters, momentum=0.1))
            c = spec.filters

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        for conv, norm in zip(self.convs, self.norms):
            x = F.max_pool2d(norm(F.relu(conv(x))), 2)
        return F.flatten(x)


def embed(embedding: Embedding, images) -> Tensor:
    return embedding(images)


@dataclass(frozen=True)
class SelectorSpec:
    in_dim: int = 256
    hidden: int = 128
    z_dim: int = 100


class SampleSelector(Module):
    """Support embedding -> latent mean; unit Gaussian noise is added while training."""

    def __init__(self, spec: SelectorSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.fc1 = Linear(spec.in_dim, spec.hidden, rng=rng, gain=math.sqrt(2.0))
        self.fc2 = Linear(spec.hidden, spec.z_dim, rng=rng)
        self.rng = rng

    def forward(self, emb) -> Tensor:
        mu = self.fc2(F.relu(self.fc1(emb)))
        if self.training:
            mu = mu + self.rng.normal(size=mu.shape).astype(mu.dtype)
        return mu


def attention_classify(query_emb, support_embs, support_labels, num_classes: int | None = None) -> Tensor:
    """Class probabilities ``[Q, num_classes]``: softmax over cosine similarity, summed per class."""
    q, s = as_tensor(query_emb), as_tensor(support_embs)
    labels = np.asarray(support_labels, dtype=np.int64)
    if s.shape[0] < 1:
        raise ValueError("attention needs at least one support item")
    if q.ndim == 1:
        q = q.reshape(1, -1)
    if np.any(np.linalg.norm(q.data, axis=1) == 0) or np.any(np.linalg.norm(s.data, axis=1) == 0):
        raise ValueError("zero-norm embedding has no cosine similarity")
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    sims = F.l2_normalize(q, axis=1) @ F.l2_normalize(s, axis=1).transpose()
    attn = F.softmax(sims, axis=1)
    onehot = np.zeros((len(labels), num_classes), dtype=attn.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return attn @ Tensor(onehot)


class MatchingNetwork(Module):
    def __init__(self, embed_spec: EmbedSpec, rng: np.random.Generator):
        super().__init__()
        self.embed = Embedding(embed_spec, rng)

    def class_probs(self, episode: "Episode") -> Tensor:
        sx, sy = episode.support_pool()
        n_s = sx.shape[0]
        emb = self.embed(concat([sx, Tensor(episode.query_x)], axis=0))
        return attention_classify(emb[n_s:], emb[:n_s], sy, episode.way)

    def predict(self, episode: "Episode") -> np.ndarray:
        was = self.training
        self.eval()
        try:
            with no_grad():
                return np.argmax(self.class_probs(episode).data, axis=1)
        finally:
            self.train(was)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    way: int
    shot: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    augment_x: object = None  # ndarray or Tensor of [S*K, C, H, W]
    augment_y: np.ndarray | None = None

    def __post_init__(self):
        labels, counts = np.unique(self.support_y, return_counts=True)
        if len(labels) != self.way or np.any(counts != self.shot):
            raise ValueError(f"support must hold {self.shot} item(s) for each of {self.way} classes")
        if not set(np.unique(self.query_y)) <= set(labels):
            raise ValueError("query classes must be a subset of support classes")

    @property
    def k(self) -> int:
        if self.augment_y is None:
            return 0
        return len(self.augment_y) // len(self.support_y)

    def support_pool(self) -> tuple[Tensor, np.ndarray]:
        """Real support items followed by their augmentations, which share the source item's label."""
        if self.augment_x is None or len(self.augment_y) == 0:
            return Tensor(self.support_x), self.support_y
        return (concat([Tensor(self.support_x), as_tensor(self.augment_x)], axis=0),
                np.concatenate([self.support_y, self.augment_y]))


def _class_arrays(dataset, domain: str | None) -> list:
    if isinstance(dataset, LabeledImageSet):
        classes = dataset.classes(domain) if (domain and dataset.split_tags is not None) else dataset.classes()
        return [to_nchw(dataset.images[c]) for c in classes]
    return list(dataset)


def make_episode(dataset, way: int, shot: int, query_per_class: int, rng: np.random.Generator,
                 generator=None, selector: SampleSelector | None = None, k: int = 0,
                 embedding: Embedding | None = None, domain: str | None = None,
                 aug_rng: np.random.Generator | None = None) -> Episode:
    """Draw ``way`` classes, ``shot`` support and ``query_per_class`` query images from each.

    With a generator and ``k > 0`` every support item gains ``k`` generations. Their
    latents come from the selector (differentiable, needs ``embedding``) or from N(0, I)
    drawn from ``aug_rng`` (default ``rng``).
    """
    classes = _class_arrays(dataset, domain)
    if way > len(classes):
        raise ValueError(f"way={way} exceeds the {len(classes)} available classes")
    if k < 0:
        raise ValueError("k must be non-negative")
    chosen = rng.choice(len(classes), size=way, replace=False)
    sx, sy, qx, qy = [], [], [], []
    for label, c in enumerate(chosen):
        imgs = classes[c]
        if len(imgs) < shot + query_per_class:
            raise DatasetError(f"class {c} has {len(imgs)} images, needs {shot + query_per_class}")
        pick = rng.choice(len(imgs), size=shot + query_per_class, replace=False)
        sx.append(imgs[pick[:shot]])
        qx.append(imgs[pick[shot:]])
        sy += [label] * shot
        qy += [label] * query_per_class
    dtype = get_default_dtype()
    ep = Episode(way, shot, np.concatenate(sx).astype(dtype), np.array(sy), np.concatenate(qx).astype(dtype),
                 np.array(qy))
    if generator is not None and k > 0:
        ep.augment_x = generate_augmentations(generator, ep.support_x, k, aug_rng or rng, selector, embedding)
        ep.augment_y = np.repeat(ep.support_y, k)
    return ep


def generate_augmentations(generator, support_x: np.ndarray, k: int, rng: np.random.Generator,
                           selector: SampleSelector | None = None, embedding: Embedding | None = None):
    """``k`` generations per support item, grouped item-major. Generator weights never get gradient."""
    cond = np.repeat(support_x, k, axis=0)
    was = generator.training
    generator.eval()
    try:
        if selector is None:
            z = rng.normal(size=(len(cond), generator.spec.z_dim)).astype(cond.dtype)
            with no_grad():
                return generator(Tensor(cond), Tensor(z)).data
        if embedding is None:
            raise ValueError("the sample selector needs the support embedding")
        emb = embedding(Tensor(cond))
        z = selector(emb)
        with frozen(generator):
            return generator(Tensor(cond), z)
    finally:
        generator.train(was)


# ---------------------------------------------------------------------------
# baselines and evaluation


def pixel_distance_classify(query, support_x, support_y, augment_x=None, augment_y=None) -> np.ndarray:
    """Nearest support item in Euclidean pixel distance; ties go to the smaller class index."""
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 3
    q = q.reshape(1 if single else len(q), -1)
    s = np.asarray(support_x, dtype=np.float64).reshape(len(support_x), -1)
    labels = np.asarray(support_y)
    if augment_x is not None and len(augment_x):
        s = np.concatenate([s, np.asarray(augment_x, dtype=np.float64).reshape(len(augment_x), -1)])
        labels = np.concatenate([labels, np.asarray(augment_y)])
    d = ((q[:, None, :] - s[None]) ** 2).sum(-1)
    nearest = d == d.min(axis=1, keepdims=True)
    big = np.iinfo(np.int64).max
    pred = np.where(nearest, labels[None].astype(np.int64), big).min(axis=1)
    return pred[0] if single else pred


def pixel_predictor(episode: Episode) -> np.ndarray:
    aug = None if episode.augment_x is None else as_tensor(episode.augment_x).data
    return pixel_distance_classify(episode.query_x, episode.support_x, episode.support_y, aug, episode.augment_y)


@dataclass
class OneShotReport:
    technique: str
    test_accuracy: float
    stderr: float
    episodes: int
    accuracies: list = field(default_factory=list, repr=False)


def evaluate_oneshot(predict, dataset, episodes: int, way: int = 5, shot: int = 1, query_per_class: int = 1,
                     seed: int = 0, generator=None, k: int = 0, technique: str = "",
                     domain: str | None = "target") -> OneShotReport:
    """Mean episode accuracy with its standard error over ``episodes`` seeded episodes.

    ``predict`` maps an Episode to predicted query labels. Latents for generated
    support come from a separate stream, so the episodes themselves depend only on
    ``seed`` and runs with and without augmentation are paired.
    """
    rng = np.random.default_rng(seed)
    aug_rng = np.random.default_rng([seed, 1])
    accs = []
    for _ in range(episodes):
        ep = make_episode(dataset, way, shot, query_per_class, rng, generator=generator, k=k, domain=domain,
                          aug_rng=aug_rng)
        accs.append(float(np.mean(np.asarray(predict(ep)) == ep.query_y)))
    a = np.asarray(accs)
    stderr = float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0
    return OneShotReport(technique, float(a.mean()), stderr, episodes, accs)


REPORT_FIELDS = ("technique", "test_accuracy", "stderr", "episodes")


def write_report_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow([r.technique, repr(r.test_accuracy), repr(r.stderr), r.episodes])


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class MatchNetConfig:
    episodes: int = 2000
    way: int = 20
    shot: int = 1
    query_per_class: int = 1
    k: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    val_every: int = 100
    val_episodes: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.k not in (0, 1, 2):
            raise ValueError("k (augmentations per support item) must be 0, 1 or 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MatchNetResult:
    model: MatchingNetwork
    selector: SampleSelector | None
    history: list = field(default_factory=list)
    best_val: float = float("nan")
    best_episode: int = 0


class NonFiniteEpisodeLoss(FloatingPointError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


def train_matchnet(source, config: MatchNetConfig, embed_spec: EmbedSpec = EmbedSpec(), generator=None,
                   use_selector: bool = False, validation=None) -> MatchNetResult:
    """Episodic training on ``source`` classes; the best validation-episode accuracy picks the weights.

    ``generator`` stays frozen. With ``use_selector`` a sample selector produces the
    augmentation latents and is trained through the generator.
    """
    if use_selector and (generator is None or config.k == 0):
        raise ValueError("the sample selector needs a generator and k > 0")
    rng = np.random.default_rng(config.seed)
    model = MatchingNetwork(embed_spec, rng)
    selector = None
    if use_selector:
        selector = SampleSelector(SelectorSpec(embed_spec.out_dim, 128, generator.spec.z_dim), rng)
    named = list(model.named_parameters())
    if selector is not None:
        named += [(f"selector.{n}", p) for n, p in selector.named_parameters()]
    opt = Adam(named, config.lr, config.beta1, config.beta2)
    gen_k = config.k if generator is not None else 0
    history = []
    best = (-1.0, 0, model.state_dict(), selector.state_dict() if selector else None)
    # the generator is only a feature source here; keep gradient out of its weights
    with frozen(generator):
        for step in range(1, config.episodes + 1):
            model.train()
            if selector is not None:
                selector.train()
            ep = make_episode(source, config.way, config.shot, config.query_per_class, rng,
                              generator=generator, selector=selector, k=gen_k, embedding=model.embed,
                              domain="source")
            probs = model.class_probs(ep)
            loss = -(probs + 1e-12).log()[np.arange(len(ep.query_y)), ep.query_y].mean()
            if not np.isfinite(loss.data):
                raise NonFiniteEpisodeLoss(f"non-finite loss at episode {step}", best[2])
            opt.zero_grad()
            loss.backward()
            opt.step()
            if validation is not None and (step % config.val_every == 0 or step == config.episodes):
                acc = evaluate_oneshot(_matchnet_predictor(model, generator, selector, gen_k), validation,
                                       config.val_episodes, config.way, config.shot, config.query_per_class,
                                       seed=config.seed + 1, domain="validation").test_accuracy
                history.append({"episode": step, "loss": float(loss.data), "val_accuracy": acc})
                if acc > best[0]:
                    best = (acc, step, model.state_dict(), selector.state_dict() if selector else None)
    if validation is not None and best[0] >= 0:
        model.load_state_dict(best[2])
        if selector is not None:
            selector.load_state_dict(best[3])
    return MatchNetResult(model, selector, history, best[0], best[1])


def _matchnet_predictor(model: MatchingNetwork, generator=None, selector=None, k: int = 0):
    """Predictor that (re)builds augmentations for an episode at evaluation time."""

    def predict(ep: Episode) -> np.ndarray:
        if generator is not None and k > 0 and ep.augment_x is None:
            model.eval()
            if selector is not None:
                selector.eval()
            with no_grad():
                aug = generate_augmentations(generator, ep.support_x, k, np.random.default_rng(0),
                                             selector, model.embed)
            ep.augment_x = as_tensor(aug).data
            ep.augment_y = np.repeat(ep.support_y, k)
        return model.predict(ep)

    return predict


def matchnet_predictor(result: MatchNetResult, generator=None, k: int = 0):
    return _matchnet_predictor(result.model, generator, result.selector, k)


def matchnet_checkpoint(result: MatchNetResult, config: MatchNetConfig | None = None) -> Checkpoint:
    model = result.model
    tensors = Checkpoint.prefixed("embed", model.embed.state_dict())
    meta = {"embed_spec": asdict(model.embed.spec), "best_val": result.best_val,
            "best_episode": result.best_episode, "history": result.history}
    if config is not None:
        meta["config"] = config.to_dict()
    if result.selector is not None:
        tensors.update(Checkpoint.prefixed("selector", result.selector.state_dict()))
        meta["selector_spec"] = asdict(result.selector.spec)
    return Checkpoint(tensors=tensors, meta=meta)


def load_matchnet(ckpt) -> MatchNetResult:
    """Inverse of ``matchnet_checkpoint``; accepts a Checkpoint or a path."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    rng = np.random.default_rng(0)
    model = MatchingNetwork(EmbedSpec(**ckpt.meta["embed_spec"]), rng)
    model.embed.load_state_dict(ckpt.group("embed"))
    selector = None
    if "selector_spec" in ckpt.meta:
        selector = SampleSelector(SelectorSpec(**ckpt.meta["selector_spec"]), rng)
        selector.load_state_dict(ckpt.group("selector"))
    return MatchNetResult(model.eval(), selector.eval() if selector else None, ckpt.meta.get("history", []),
                          ckpt.meta.get("best_val", float("nan")), ckpt.meta.get("best_episode", 0))
