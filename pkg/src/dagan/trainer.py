"""Adversarial training of the generator against the pair critic (WGAN with gradient penalty)."""
from __future__ import annotations

import csv
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, restore_rng, rng_state, save_checkpoint
from .critic import Critic, CriticSpec
from .data.dataset import LabeledImageSet, to_nchw
from .generator import Generator, GeneratorSpec
from .nn.layers import Module, renorm_limits, set_renorm_limits
from .nn.optim import Adam, NonFiniteGradientError
from .nn.tensor import Tensor, as_tensor, get_default_dtype, grad, no_grad

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "critic_loss", "gen_loss", "wasserstein_estimate")


class NonFiniteLossError(FloatingPointError):
    """Training hit a NaN/inf; ``checkpoint_path`` is the last good checkpoint (may be None)."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class LabelLeakError(AssertionError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    gp_lambda: float = 10.0
    critic_iters_per_gen: int = 5
    batch_size: int = 32
    seed: int = 0
    renorm_warmup_frac: float = 0.25
    validation_pairs: int = 64

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.gp_lambda < 0:
            raise ValueError("lr must be positive and gp_lambda non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.critic_iters_per_gen < 1 or self.batch_size < 2:
            raise ValueError("critic_iters_per_gen must be >= 1 and batch_size >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# pair sampling


def pair_indices(labels, class_id: int, rng: np.random.Generator) -> tuple[int, int]:
    """Two distinct indices drawn uniformly (as an ordered pair) from the members of ``class_id``."""
    members = np.flatnonzero(np.asarray(labels) == class_id)
    if len(members) < 2:
        raise ValueError(f"class {class_id} has {len(members)} training case(s); a real pair needs two "
                         "distinct cases and pairing an image with itself is not allowed")
    i = int(rng.integers(len(members)))
    j = int(rng.integers(len(members) - 1))
    j += j >= i
    return int(members[i]), int(members[j])


def sample_real_pair(dataset, class_id: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two distinct same-class images. ``dataset`` is a LabeledImageSet or an ``(images, labels)`` pair."""
    if isinstance(dataset, LabeledImageSet):
        images = _training_cases(dataset, class_id)
        labels = np.zeros(len(images), dtype=np.int64)
        i, j = pair_indices(labels, 0, rng)
    else:
        images, labels = dataset
        i, j = pair_indices(labels, class_id, rng)
    return images[i], images[j]


def _training_cases(dataset: LabeledImageSet, c: int) -> np.ndarray:
    im = dataset.images[c]
    if dataset.case_tags is None:
        return im
    return im[np.isin(dataset.case_tags[c], ("train", "unused"))]


class PairPool:
    """Flat store of conditioning images grouped by class, used to draw same-class partners.

    Class identity is used only to pick partners; it never leaves this object.
    """

    def __init__(self, class_arrays: list):
        arrays = [np.asarray(a, dtype=np.float32) for a in class_arrays]
        if not arrays:
            raise ValueError("no classes to train on")
        for c, a in enumerate(arrays):
            if len(a) < 2:
                raise ValueError(f"class {c} has {len(a)} training case(s); a real pair needs two "
                                 "distinct cases and pairing an image with itself is not allowed")
        self.images = np.ascontiguousarray(np.concatenate(arrays))
        counts = np.array([len(a) for a in arrays])
        self._start = np.repeat(np.cumsum(counts) - counts, counts)
        self._count = np.repeat(counts, counts)

    @classmethod
    def from_dataset(cls, dataset: LabeledImageSet, domain: str = "source") -> "PairPool":
        classes = dataset.classes(domain) if dataset.split_tags is not None else dataset.classes()
        return cls([to_nchw(_training_cases(dataset, c)) for c in classes])

    def __len__(self) -> int:
        return len(self.images)

    def partners(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        start, count = self._start[idx], self._count[idx]
        local = idx - start
        j = rng.integers(0, count - 1)
        j = j + (j >= local)
        return start + j


# ---------------------------------------------------------------------------
# losses


@contextmanager
def frozen(module):
    """Temporarily stop gradient flow into a module's parameters."""
    if not isinstance(module, Module):
        yield
        return
    flags = [(p, p.requires_grad) for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in flags:
            p.requires_grad = f


def _row_norm(g: Tensor) -> Tensor:
    sq = g * g
    sq = sq.sum(axis=tuple(range(1, g.ndim))) if g.ndim > 1 else sq
    zero = (sq.data == 0).astype(sq.dtype)
    # exact zero norm with zero gradient where the input gradient vanishes
    return (sq + zero).sqrt() * (1.0 - zero)


def gradient_penalty(critic, x_i, x_real, x_fake, gp_lambda: float, rng: np.random.Generator) -> Tensor:
    """``gp_lambda * mean((|grad_xhat critic(x_i, xhat)|_2 - 1)^2)`` at per-sample random interpolates."""
    x_i = as_tensor(x_i).detach()
    real = as_tensor(x_real).data
    fake = as_tensor(x_fake).data
    if real.shape != fake.shape or real.shape != x_i.shape:
        raise ValueError(f"shape mismatch: x_i {x_i.shape}, real {real.shape}, fake {fake.shape}")
    eps = rng.random((real.shape[0],) + (1,) * (real.ndim - 1)).astype(real.dtype)
    x_hat = Tensor(eps * real + (1.0 - eps) * fake, requires_grad=True, name="interpolate")
    scores = critic(x_i, x_hat)
    (g,) = grad(scores.sum(), [x_hat], create_graph=True)
    d = _row_norm(g) - 1.0
    return (d * d).mean() * gp_lambda


@dataclass
class CriticStats:
    loss: float
    real: float
    fake: float
    penalty: float

    @property
    def wasserstein(self) -> float:
        return self.real - self.fake


def critic_loss(critic, generator, x_i, x_j, z, gp_lambda: float,
                rng: np.random.Generator) -> tuple[Tensor, CriticStats]:
    """``mean C(x_i, G(x_i, z)) - mean C(x_i, x_j) + penalty``; the generator gets no gradient."""
    x_i, x_j = as_tensor(x_i).detach(), as_tensor(x_j).detach()
    if x_i.shape[0] == 0:
        raise ValueError("empty batch")
    with no_grad():
        fake = as_tensor(generator(x_i, as_tensor(z))).detach()
    fake_score = critic(x_i, fake).mean()
    real_score = critic(x_i, x_j).mean()
    gp = gradient_penalty(critic, x_i, x_j, fake, gp_lambda, rng)
    loss = fake_score - real_score + gp
    stats = CriticStats(float(loss.data), float(real_score.data), float(fake_score.data), float(gp.data))
    return loss, stats


def generator_loss(critic, generator, x_i, z) -> Tensor:
    """``-mean C(x_i, G(x_i, z))``; the critic's parameters get no gradient."""
    x_i = as_tensor(x_i).detach()
    with frozen(critic):
        return -critic(x_i, generator(x_i, as_tensor(z))).mean()


def leaf_tensors(output: Tensor) -> list:
    leaves, seen, stack = [], set(), [output]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._ctx is None:
            leaves.append(t)
        else:
            stack.extend(t._ctx[1])
    return leaves


def assert_label_free(loss: Tensor) -> None:
    """No integer-typed or label-named tensor may feed ``loss``."""
    for leaf in leaf_tensors(loss):
        if np.issubdtype(leaf.dtype, np.integer) or (leaf.name and "label" in leaf.name):
            raise LabelLeakError(f"label-like tensor {leaf!r} reaches the loss")


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    best_epoch: int | None = None
    out_dir: Path | None = None


def _epoch_batches(n: int, batch_size: int, perm: np.ndarray) -> list:
    count = max(1, math.ceil(n / batch_size))
    return np.array_split(perm, count)


def _validation_batch(pool: PairPool, n: int, seed: int, z_dim: int):
    rng = np.random.default_rng([seed, 7919])
    idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    jdx = pool.partners(idx, rng)
    z = rng.normal(size=(len(idx), z_dim)).astype(np.float32)
    return pool.images[idx], pool.images[jdx], z


def validation_wasserstein(critic, generator, batch) -> float:
    x_i, x_j, z = batch
    was_g, was_c = generator.training, critic.training
    generator.eval()
    critic.eval()
    try:
        with no_grad():
            fake = generator(Tensor(x_i), Tensor(z))
            w = float(critic(Tensor(x_i), Tensor(x_j)).data.mean() - critic(Tensor(x_i), fake).data.mean())
    finally:
        generator.train(was_g)
        critic.train(was_c)
    return abs(w)


def make_checkpoint(generator: Generator, critic: Critic, opt_g: Adam | None, opt_c: Adam | None,
                    config: TrainConfig, rng: np.random.Generator | None, **meta) -> Checkpoint:
    tensors = {}
    tensors.update(Checkpoint.prefixed("generator", generator.state_dict()))
    tensors.update(Checkpoint.prefixed("critic", critic.state_dict()))
    info = {"config": config.to_dict(), "generator_spec": generator.spec.to_dict(),
            "critic_spec": critic.spec.to_dict()}
    for key, opt in (("opt_g", opt_g), ("opt_c", opt_c)):
        if opt is not None:
            sd = opt.state_dict()
            tensors.update(Checkpoint.prefixed(key, sd["arrays"]))
            info[key] = sd["meta"]
    if rng is not None:
        info["rng"] = rng_state(rng)
    info.update(meta)
    return Checkpoint(tensors=tensors, meta=info)


def load_networks(ckpt: Checkpoint) -> tuple[Generator, Critic]:
    """Rebuild both networks from a checkpoint's spec echo and weights."""
    gen = Generator(GeneratorSpec.from_dict(ckpt.meta["generator_spec"]), np.random.default_rng(0))
    gen.load_state_dict(ckpt.group("generator"))
    critic = Critic(CriticSpec.from_dict(ckpt.meta["critic_spec"]), np.random.default_rng(0))
    critic.load_state_dict(ckpt.group("critic"))
    return gen, critic


def load_generator(ckpt) -> Generator:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    gen = Generator(GeneratorSpec.from_dict(ckpt.meta["generator_spec"]), np.random.default_rng(0))
    gen.load_state_dict(ckpt.group("generator"))
    return gen.eval()


def write_metrics_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])


def train(config: TrainConfig, dataset, generator: Generator, critic: Critic, out_dir=None,
          validation=None, resume_from=None, keep_all: bool = False) -> TrainResult:
    """Alternate ``critic_iters_per_gen`` critic updates with one generator update.

    ``dataset`` is a LabeledImageSet (source-domain training cases are used) or a
    PairPool. ``validation`` optionally supplies held-out classes; the epoch with the
    lowest validation Wasserstein estimate is saved as ``best.ckpt``. With
    ``resume_from`` the networks, optimisers, counters and rng continue from that
    checkpoint, so the remaining epochs match an uninterrupted run exactly.
    """
    pool = dataset if isinstance(dataset, PairPool) else PairPool.from_dataset(dataset)
    val_pool = None
    if validation is not None:
        val_pool = validation if isinstance(validation, PairPool) else PairPool.from_dataset(
            validation, domain="validation")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dtype = get_default_dtype()
    z_dim = generator.spec.z_dim
    opt_g = Adam(generator.named_parameters(), config.lr, config.beta1, config.beta2)
    opt_c = Adam(critic.named_parameters(), config.lr, config.beta1, config.beta2)
    rng = np.random.default_rng(config.seed)
    metrics, val_metrics = [], []
    start_epoch, critic_steps, gen_steps = 0, 0, 0
    best_w, best_epoch = math.inf, None
    if resume_from is not None:
        ck = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        generator.load_state_dict(ck.group("generator"))
        critic.load_state_dict(ck.group("critic"))
        opt_g.load_state_dict({"meta": ck.meta["opt_g"], "arrays": ck.group("opt_g")})
        opt_c.load_state_dict({"meta": ck.meta["opt_c"], "arrays": ck.group("opt_c")})
        rng = restore_rng(ck.meta["rng"])
        start_epoch = int(ck.meta["epoch"])
        critic_steps, gen_steps = int(ck.meta["critic_steps"]), int(ck.meta["gen_steps"])
        metrics = list(ck.meta.get("metrics", []))
        val_metrics = list(ck.meta.get("validation", []))
        best_epoch = ck.meta.get("best_epoch")
        best_w = ck.meta.get("best_w")
        best_w = math.inf if best_w is None else best_w
    generator.set_rng(rng)
    critic.set_rng(rng)
    val_batch = _validation_batch(val_pool, config.validation_pairs, config.seed, z_dim) if val_pool else None

    batches_per_epoch = max(1, math.ceil(len(pool) / config.batch_size))
    gen_per_epoch = max(1, batches_per_epoch // config.critic_iters_per_gen)
    total_gen = max(1, config.epochs * gen_per_epoch)
    last_path = None

    def snapshot(epoch):
        return make_checkpoint(generator, critic, opt_g, opt_c, config, rng, epoch=epoch,
                               critic_steps=critic_steps, gen_steps=gen_steps, metrics=metrics,
                               validation=val_metrics, best_epoch=best_epoch,
                               best_w=best_w if math.isfinite(best_w) else None)

    if out is not None:
        if start_epoch == 0:
            last_path = save_checkpoint(snapshot(0), out / "last.ckpt")
            if keep_all:
                save_checkpoint(snapshot(0), out / "epoch_0000.ckpt")
        else:
            last_path = out / "last.ckpt"
    ckpt = snapshot(start_epoch)
    audited = False

    for epoch in range(start_epoch + 1, config.epochs + 1):
        generator.train()
        critic.train()
        c_losses, g_losses, w_terms = [], [], []
        for idx in _epoch_batches(len(pool), config.batch_size, rng.permutation(len(pool))):
            r_max, d_max = renorm_limits(gen_steps, total_gen, config.renorm_warmup_frac)
            set_renorm_limits(generator, r_max, d_max)
            x_i = Tensor(pool.images[idx])
            x_j = Tensor(pool.images[pool.partners(idx, rng)])
            z = Tensor(rng.normal(size=(len(idx), z_dim)).astype(dtype))
            loss, stats = critic_loss(critic, generator, x_i, x_j, z, config.gp_lambda, rng)
            if not audited:
                assert_label_free(loss)
            _check_finite(stats.loss, "critic", epoch, last_path)
            opt_c.zero_grad()
            loss.backward()
            _step(opt_c, "critic", epoch, last_path)
            critic_steps += 1
            c_losses.append(stats.loss)
            w_terms.append(stats.wasserstein)
            if critic_steps % config.critic_iters_per_gen == 0:
                gidx = rng.integers(0, len(pool), size=config.batch_size)
                gz = Tensor(rng.normal(size=(len(gidx), z_dim)).astype(dtype))
                g_loss = generator_loss(critic, generator, Tensor(pool.images[gidx]), gz)
                if not audited:
                    assert_label_free(g_loss)
                    audited = True
                _check_finite(float(g_loss.data), "generator", epoch, last_path)
                opt_g.zero_grad()
                g_loss.backward()
                _step(opt_g, "generator", epoch, last_path)
                gen_steps += 1
                g_losses.append(float(g_loss.data))
        row = {"epoch": epoch, "critic_loss": float(np.mean(c_losses)),
               "gen_loss": float(np.mean(g_losses)) if g_losses else float("nan"),
               "wasserstein_estimate": abs(float(np.mean(w_terms)))}
        metrics.append(row)
        if val_batch is not None:
            vw = validation_wasserstein(critic, generator, val_batch)
            val_metrics.append({"epoch": epoch, "wasserstein_estimate": vw})
            if vw < best_w:
                best_w, best_epoch = vw, epoch
        log.info("epoch %d critic %.4f gen %.4f W %.4f", epoch, row["critic_loss"], row["gen_loss"],
                 row["wasserstein_estimate"])
        ckpt = snapshot(epoch)
        if out is not None:
            last_path = save_checkpoint(ckpt, out / "last.ckpt")
            if keep_all:
                save_checkpoint(ckpt, out / f"epoch_{epoch:04d}.ckpt")
            if best_epoch == epoch:
                save_checkpoint(ckpt, out / "best.ckpt")
            write_metrics_csv(out / "metrics.csv", metrics)
    if out is not None and not (out / "metrics.csv").exists():
        write_metrics_csv(out / "metrics.csv", metrics)
    return TrainResult(ckpt, metrics, val_metrics, best_epoch, out)


def _check_finite(value: float, who: str, epoch: int, last_path) -> None:
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite {who} loss in epoch {epoch}; last good checkpoint: {last_path}",
                                 last_path)


def _step(opt: Adam, who: str, epoch: int, last_path) -> None:
    try:
        opt.step()
    except NonFiniteGradientError as exc:
        raise NonFiniteLossError(f"non-finite {who} gradient ({exc.name}) in epoch {epoch}; "
                                 f"last good checkpoint: {last_path}", last_path) from exc


# ---------------------------------------------------------------------------
# latent interpolation and sample grids


def slerp(z0, z1, t: float) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    n0, n1 = np.linalg.norm(z0), np.linalg.norm(z1)
    if n0 == 0 or n1 == 0:
        raise ValueError("slerp endpoints must be nonzero vectors")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return z0.copy()
    if t == 1.0:
        return z1.copy()
    omega = math.acos(float(np.clip(np.dot(z0, z1) / (n0 * n1), -1.0, 1.0)))
    if omega < 1e-6:
        return (1.0 - t) * z0 + t * z1
    s = math.sin(omega)
    return math.sin((1.0 - t) * omega) / s * z0 + math.sin(t * omega) / s * z1


def latent_grid(rows: int, cols: int, z_dim: int, rng: np.random.Generator) -> np.ndarray:
    """``[rows, cols, z_dim]`` latents: slerp between four random corners along both axes."""
    corners = rng.normal(size=(4, z_dim))
    grid = np.zeros((rows, cols, z_dim))
    for r in range(rows):
        tr = r / (rows - 1) if rows > 1 else 0.0
        for c in range(cols):
            tc = c / (cols - 1) if cols > 1 else 0.0
            top = slerp(corners[0], corners[1], tc)
            bottom = slerp(corners[2], corners[3], tc)
            grid[r, c] = slerp(top, bottom, tr)
    return grid


def interpolate(generator: Generator, seed_image: np.ndarray, z0, z1, steps: int) -> np.ndarray:
    """Generations of one conditioning image along the slerp path from z0 to z1."""
    ts = np.linspace(0.0, 1.0, steps)
    zs = np.stack([slerp(z0, z1, t) for t in ts]).astype(get_default_dtype())
    x = np.repeat(_as_nchw(seed_image), steps, axis=0)
    generator.eval()
    with no_grad():
        return generator(Tensor(x), Tensor(zs)).data


def _as_nchw(img) -> np.ndarray:
    a = np.asarray(img, dtype=get_default_dtype())
    if a.ndim == 3:  # HWC
        a = a.transpose(2, 0, 1)[None]
    return np.ascontiguousarray(a)


def tile_images(cells: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """``[rows*cols, C, H, W]`` -> ``[rows*H, cols*W, C]``."""
    n, c, h, w = cells.shape
    return cells.reshape(rows, cols, c, h, w).transpose(0, 3, 1, 4, 2).reshape(rows * h, cols * w, c)


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def sample_grid(checkpoint, seed_image, grid: tuple[int, int], path=None, seed: int = 0) -> np.ndarray:
    """Seed image in the top-left cell, generations over a slerp latent grid elsewhere.

    ``checkpoint`` may be a Checkpoint, a path, or a Generator. Returns the tiled
    ``[rows*H, cols*W, C]`` array and writes a PNG when ``path`` is given.
    """
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be positive")
    gen = checkpoint if isinstance(checkpoint, Generator) else load_generator(checkpoint)
    x = _as_nchw(seed_image)
    rng = np.random.default_rng(seed)
    zs = latent_grid(rows, cols, gen.spec.z_dim, rng).reshape(rows * cols, -1)[1:]
    cells = [x[0]]
    if len(zs):
        gen.eval()
        with no_grad():
            out = gen(Tensor(np.repeat(x, len(zs), axis=0)), Tensor(zs.astype(get_default_dtype()))).data
        cells.extend(out)
    tiled = tile_images(np.stack(cells), rows, cols)
    if path is not None:
        save_png(tiled, path)
    return tiled
