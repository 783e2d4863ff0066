"""Command-line entry point: ``dagan <group> <command> [options]``.

Every option can also come from a plain-text ``key = value`` file given with
``--config``; flags override the file, which overrides the command defaults.
Each run echoes its effective settings (``config.txt``) and a manifest with
input content hashes into ``--out-dir``.

Exit codes: 0 success, 1 invalid input or usage, 2 failure while running.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("dagan")

REQUIRED = object()


class CliError(Exception):
    """Bad arguments, config or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


# ---------------------------------------------------------------------------
# option parsing helpers


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_pair(text: str) -> tuple[int, int]:
    """``"8x8"`` -> ``(8, 8)``."""
    try:
        a, b = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise ValueError(f"expected AxB, got {text!r}") from None
    if a < 1 or b < 1:
        raise ValueError(f"both sides must be positive in {text!r}")
    return a, b


def parse_rates(text: str) -> list[int]:
    """``"1..10"``, ``"0,2,5"`` or a mix such as ``"0,3..5"``."""
    rates = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = (int(v) for v in part.split(".."))
            if hi < lo:
                raise ValueError(f"empty rate range {part!r}")
            rates.extend(range(lo, hi + 1))
        elif part:
            rates.append(int(part))
    if not rates or min(rates) < 0:
        raise ValueError(f"rates must be a non-empty list of non-negative integers, got {text!r}")
    return sorted(set(rates))


def read_config_file(path) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment; later keys win."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


@dataclass(frozen=True)
class Opt:
    type: object
    default: object = None
    help: str = ""


COMMON = {
    "seed": Opt(int, 0, "seed for every random draw of the run"),
    "out_dir": Opt(str, ".", "directory receiving all outputs"),
}

TRAIN_KEYS = {
    "epochs": Opt(int, 500), "lr": Opt(float, 1e-4), "beta1": Opt(float, 0.0), "beta2": Opt(float, 0.9),
    "gp_lambda": Opt(float, 10.0), "critic_iters_per_gen": Opt(int, 5), "batch_size": Opt(int, 32),
    "renorm_warmup_frac": Opt(float, 0.25), "validation_pairs": Opt(int, 64),
}
GEN_KEYS = {
    "gen_blocks": Opt(int, 4), "gen_layers": Opt(int, 4), "gen_filters": Opt(int, 64), "z_dim": Opt(int, 100),
    "gen_dropout": Opt(float, 0.3),
}
CRITIC_KEYS = {
    "critic_blocks": Opt(int, 4), "critic_layers": Opt(int, 4), "critic_growth": Opt(int, 64),
    "critic_dropout": Opt(float, 0.0),
}
CLASSIFIER_KEYS = {
    "epochs": Opt(int, 200), "lr": Opt(float, 1e-3), "beta1": Opt(float, 0.9), "beta2": Opt(float, 0.99),
    "batch_size": Opt(int, 64), "blocks": Opt(int, 4), "layers": Opt(int, 3), "growth": Opt(int, 64),
    "dropout": Opt(float, 0.5), "norm": Opt(str, "batchrenorm"), "flag": Opt(parse_bool, True),
    "standard_augmentation": Opt(parse_bool, True), "experiment_id": Opt(str, "classifier"),
}
DATA_KEYS = {
    "dataset": Opt(str, REQUIRED, "dataset container (.dgan) or folder of class folders"),
    "splits": Opt(str, None, "splits.json from 'data split'"),
}

PRESETS = {
    "dagan train": {"toy": {"epochs": 50, "lr": 5e-4, "batch_size": 8, "gen_blocks": 3, "gen_layers": 3,
                            "gen_filters": 16, "z_dim": 32, "critic_blocks": 3, "critic_layers": 3,
                            "critic_growth": 8}},
    "classify train": {"toy": {"blocks": 3, "layers": 2, "growth": 8, "norm": "layer"}},
    "classify sweep": {"toy": {"blocks": 3, "layers": 2, "growth": 8, "norm": "layer"}},
    "matchnet train": {"toy": {"filters": 32, "episodes": 300, "way": 5}},
}

COMMANDS = {
    ("data", "pack"): {
        "images": Opt(str, None, "folder with one sub-folder of images per class"),
        "glyphs": Opt(str, None, "synthesize CLASSESxSAMPLES stroke glyphs instead"),
        "size": Opt(str, None, "resize to HxW"), "grayscale": Opt(str, "auto", "auto, true or false"),
        "output": Opt(str, "dataset.dgan"),
    },
    ("data", "split"): {
        "dataset": DATA_KEYS["dataset"], "profile": Opt(str, "omniglot", "omniglot, emnist, vggface or custom"),
        "boundaries": Opt(str, None, "A,B class cut points for the custom profile"),
        "samples_per_class": Opt(int, 0, "cap per class for the custom profile (0 keeps all)"),
        "train_count": Opt(int, 5), "test_count": Opt(int, 2), "val_count": Opt(int, 3),
    },
    ("dagan", "train"): {**DATA_KEYS, **TRAIN_KEYS, **GEN_KEYS, **CRITIC_KEYS,
                         "resume": Opt(str, None), "keep_all": Opt(parse_bool, False), "preset": Opt(str, None)},
    ("dagan", "sample"): {**DATA_KEYS, "checkpoint": Opt(str, REQUIRED), "domain": Opt(str, "target"),
                          "images": Opt(int, 8), "samples": Opt(int, 7), "output": Opt(str, "samples.png")},
    ("dagan", "interpolate"): {"checkpoint": Opt(str, REQUIRED), "seed_image": Opt(str, REQUIRED),
                               "grid": Opt(str, "8x8"), "output": Opt(str, "grid.png")},
    ("classify", "train"): {**DATA_KEYS, **CLASSIFIER_KEYS, "checkpoint": Opt(str, None),
                            "rate": Opt(int, 0), "preset": Opt(str, None)},
    ("classify", "sweep"): {**DATA_KEYS, **CLASSIFIER_KEYS, "checkpoint": Opt(str, None),
                            "rates": Opt(str, "1..10"), "preset": Opt(str, None)},
    ("matchnet", "train"): {
        **DATA_KEYS, "checkpoint": Opt(str, None), "episodes": Opt(int, 2000), "way": Opt(int, 20),
        "shot": Opt(int, 1), "query_per_class": Opt(int, 1), "k": Opt(int, 0), "selector": Opt(parse_bool, False),
        "lr": Opt(float, 1e-3), "val_every": Opt(int, 100), "val_episodes": Opt(int, 50),
        "filters": Opt(int, 64), "depth": Opt(int, 4), "preset": Opt(str, None)},
    ("matchnet", "eval"): {
        **DATA_KEYS, "technique": Opt(str, "pixel", "pixel or matchnet"), "model": Opt(str, None),
        "checkpoint": Opt(str, None), "k": Opt(int, 0), "episodes": Opt(int, 100), "way": Opt(int, 5),
        "shot": Opt(int, 1), "query_per_class": Opt(int, 1), "domain": Opt(str, "target")},
}

INPUT_KEYS = ("images", "dataset", "splits", "checkpoint", "resume", "seed_image", "model")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dagan", description="Data augmentation GAN pipeline.")
    parser.add_argument("--version", action="version", version=f"dagan {__version__}")
    groups = parser.add_subparsers(dest="group", metavar="{data,dagan,classify,matchnet}")
    subs = {}
    for (group, cmd), keys in COMMANDS.items():
        if group not in subs:
            subs[group] = groups.add_parser(group).add_subparsers(dest="command")
        p = subs[group].add_parser(cmd)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--log-level", default="INFO")
        for key, opt in {**COMMON, **keys}.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=opt.help or None)
    return parser


def resolve_config(command: tuple[str, str], flags: dict, file_values: dict | None = None) -> dict:
    """Merge defaults < preset < config file < flags and convert types; rejects unknown keys."""
    schema = {**COMMON, **COMMANDS[command]}
    file_values = dict(file_values or {})
    unknown = sorted(set(file_values) - set(schema))
    if unknown:
        raise CliError(f"unknown config key(s) for '{' '.join(command)}': {', '.join(unknown)}")
    raw = {k: v for k, v in file_values.items()}
    raw.update({k: v for k, v in flags.items() if k in schema and v is not None})
    preset_name = raw.get("preset")
    presets = PRESETS.get(" ".join(command), {})
    if preset_name is not None and preset_name not in presets:
        raise CliError(f"unknown preset {preset_name!r}; available: {', '.join(sorted(presets)) or 'none'}")
    base = {k: opt.default for k, opt in schema.items()}
    if preset_name:
        base.update(presets[preset_name])
    out = {}
    for key, opt in schema.items():
        if key in raw:
            try:
                out[key] = opt.type(raw[key])
            except (TypeError, ValueError) as exc:
                raise CliError(f"bad value for {key}: {exc}") from None
        else:
            out[key] = base[key]
        if out[key] is REQUIRED:
            raise CliError(f"missing required setting '{key}' (flag --{key.replace('_', '-')})")
    return out


# ---------------------------------------------------------------------------
# manifests


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path) -> str:
    """Git blob hash of a file; for a directory, a hash over its files' relative paths and blob hashes."""
    p = Path(path)
    if p.is_file():
        return git_blob_hash(p.read_bytes())
    if p.is_dir():
        lines = [f"{git_blob_hash(f.read_bytes())} {f.relative_to(p).as_posix()}\n"
                 for f in sorted(p.rglob("*")) if f.is_file()]
        return git_blob_hash("".join(lines).encode())
    raise CliError(f"input not found: {path}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return "" if v is None else str(v)


def write_run_record(out_dir: Path, command: tuple[str, str], cfg: dict) -> dict:
    """``config.txt`` (replayable with --config) and ``manifest.json`` in ``out_dir``."""
    echo = {k: v for k, v in cfg.items() if k != "out_dir"}
    lines = [f"# dagan {' '.join(command)}"] + [f"{k} = {_format_value(v)}" for k, v in echo.items()
                                                 if v is not None]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")
    inputs = {k: {"path": str(cfg[k]), "hash": content_hash(cfg[k])}
              for k in INPUT_KEYS if isinstance(cfg.get(k), str) and k in COMMANDS[command]}
    canonical = json.dumps({"command": list(command), "config": echo, "inputs": inputs}, sort_keys=True)
    manifest = {"command": " ".join(command), "version": __version__, "seed": cfg["seed"], "config": echo,
                "inputs": inputs, "content_hash": git_blob_hash(canonical.encode())}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# shared loaders


def load_dataset(path):
    from .data import load_container, read_image_folders

    p = Path(path)
    if p.is_dir():
        return read_image_folders(p)
    if not p.exists():
        raise CliError(f"dataset not found: {path}")
    return load_container(p)


def save_splits(dataset, path) -> None:
    payload = {"class_names": list(dataset.class_names), "split_tags": list(dataset.split_tags),
               "samples_per_class": [len(im) for im in dataset.images],
               "case_tags": None if dataset.case_tags is None else [list(map(str, t)) for t in dataset.case_tags]}
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def apply_splits(dataset, path):
    """Reorder, cap and tag ``dataset`` as recorded by ``data split``."""
    info = json.loads(Path(path).read_text())
    index = {n: i for i, n in enumerate(dataset.class_names)}
    missing = [n for n in info["class_names"] if n not in index]
    if missing:
        raise CliError(f"splits file names classes absent from the dataset: {missing[:5]}")
    out = dataset.subset([index[n] for n in info["class_names"]])
    out = replace(out, images=[im[:n] for im, n in zip(out.images, info["samples_per_class"])], case_tags=None)
    out = replace(out, split_tags=info["split_tags"])
    if info.get("case_tags") is not None:
        out = out.with_case_tags([np.array(t) for t in info["case_tags"]])
    return out


def _dataset_from_cfg(cfg):
    ds = load_dataset(cfg["dataset"])
    return apply_splits(ds, cfg["splits"]) if cfg.get("splits") else ds


def _out(cfg, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else Path(cfg["out_dir"]) / p


# ---------------------------------------------------------------------------
# commands


def cmd_data_pack(cfg):
    from .data import make_glyph_dataset, read_image_folders, save_container

    if (cfg["images"] is None) == (cfg["glyphs"] is None):
        raise CliError("give exactly one of --images or --glyphs")
    if cfg["glyphs"] is not None:
        classes, samples = parse_pair(cfg["glyphs"])
        side = parse_pair(cfg["size"])[0] if cfg["size"] else 32
        ds = make_glyph_dataset(classes, samples, size=side, seed=cfg["seed"])
    else:
        gray = {"auto": None, "true": True, "false": False}.get(cfg["grayscale"].lower(), "bad")
        if gray == "bad":
            raise CliError("grayscale must be auto, true or false")
        ds = read_image_folders(cfg["images"], parse_pair(cfg["size"]) if cfg["size"] else None, gray)
    save_container(ds, _out(cfg, cfg["output"]))
    log.info("packed %d classes, %d images of shape %s", ds.class_count, sum(map(len, ds.images)),
             ds.image_shape)


def cmd_data_split(cfg):
    from .data import PROFILES, SplitSpec, apply_case_split, split_domains

    ds = load_dataset(cfg["dataset"])
    profile = cfg["profile"]
    if profile == "custom":
        if not cfg["boundaries"]:
            raise CliError("the custom profile needs --boundaries A,B")
        a, b = (int(v) for v in cfg["boundaries"].split(","))
        spec = SplitSpec(ds.name or "dataset", cfg["seed"], (a, b), cfg["samples_per_class"] or None)
    elif profile == "emnist":
        spec = PROFILES["emnist"](cfg["seed"], ds.class_count)
    elif profile in PROFILES:
        spec = PROFILES[profile](cfg["seed"])
    else:
        raise CliError(f"unknown profile {profile!r}")
    out = split_domains(ds, spec, np.random.default_rng(cfg["seed"]))
    out = apply_case_split(out, cfg["train_count"], np.random.default_rng([cfg["seed"], 1]),
                           cfg["test_count"], cfg["val_count"])
    save_splits(out, _out(cfg, "splits.json"))


def cmd_dagan_train(cfg):
    from .critic import CriticSpec, build_critic
    from .generator import GeneratorSpec, build_generator
    from .trainer import TrainConfig, train

    ds = _dataset_from_cfg(cfg)
    tc = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS}, seed=cfg["seed"])
    gspec = GeneratorSpec(num_blocks_per_side=cfg["gen_blocks"], layers_per_block=cfg["gen_layers"],
                          k_list=(cfg["gen_filters"],) * cfg["gen_blocks"], z_dim=cfg["z_dim"],
                          image_size=tuple(ds.image_shape), dropout_rate=cfg["gen_dropout"])
    cspec = CriticSpec(cfg["critic_blocks"], cfg["critic_layers"], cfg["critic_growth"], cfg["critic_dropout"],
                       image_channels=ds.image_shape[2])
    rng = np.random.default_rng(cfg["seed"])
    generator, critic = build_generator(gspec, rng), build_critic(cspec, rng)
    validation = ds if ds.split_tags is not None and ds.classes("validation") else None
    res = train(tc, ds, generator, critic, out_dir=cfg["out_dir"], validation=validation,
                resume_from=cfg["resume"], keep_all=cfg["keep_all"])
    if res.metrics:
        log.info("finished epoch %d, Wasserstein estimate %.4f", res.metrics[-1]["epoch"],
                 res.metrics[-1]["wasserstein_estimate"])


def cmd_dagan_sample(cfg):
    from .data.dataset import to_nchw
    from .trainer import load_generator, save_png, tile_images
    from .toy import generate_batch

    ds = _dataset_from_cfg(cfg)
    gen = load_generator(cfg["checkpoint"])
    domain = cfg["domain"] if ds.split_tags is not None else None
    classes = ds.classes(domain) if domain else ds.classes()
    rng = np.random.default_rng(cfg["seed"])
    picks = [(c, int(rng.integers(len(ds.images[c])))) for c in rng.choice(classes, cfg["images"])]
    cond = np.stack([to_nchw(ds.images[c][i:i + 1])[0] for c, i in picks])
    reps = np.repeat(cond, cfg["samples"], axis=0)
    fake = generate_batch(gen, reps, seed=cfg["seed"]).reshape(len(cond), cfg["samples"], *cond.shape[1:])
    cells = np.concatenate([cond[:, None], fake], axis=1).reshape(-1, *cond.shape[1:])
    save_png(tile_images(cells, len(cond), cfg["samples"] + 1), _out(cfg, cfg["output"]))


def cmd_dagan_interpolate(cfg):
    from .data import load_image
    from .trainer import load_generator, sample_grid

    gen = load_generator(cfg["checkpoint"])
    h, w, c = gen.spec.image_size
    img = load_image(cfg["seed_image"], (h, w), grayscale=c == 1)
    sample_grid(gen, img, parse_pair(cfg["grid"]), _out(cfg, cfg["output"]), seed=cfg["seed"])


def _classifier_setup(cfg):
    from .classifier import ClassifierConfig, ClassifierSpec

    ds = _dataset_from_cfg(cfg)
    if ds.case_tags is None:
        raise CliError("classification needs case splits; run 'data split' and pass --splits")
    n_classes = len(ds.classes("target")) if ds.split_tags is not None else ds.class_count
    spec = ClassifierSpec(cfg["blocks"], cfg["layers"], cfg["growth"], cfg["dropout"], ds.image_shape[2],
                          n_classes, cfg["norm"], cfg["flag"])
    config = ClassifierConfig(cfg["epochs"], cfg["lr"], cfg["beta1"], cfg["beta2"], cfg["batch_size"],
                              cfg["seed"], cfg["standard_augmentation"])
    gen = None
    if cfg["checkpoint"]:
        from .trainer import load_generator
        gen = load_generator(cfg["checkpoint"])
    return ds, spec, config, gen


def _train_count(ds) -> int:
    classes = ds.classes("target") if ds.split_tags is not None else ds.classes()
    return int(sum(np.sum(ds.case_tags[c] == "train") for c in classes) // max(len(classes), 1))


def cmd_classify_train(cfg):
    from .checkpoint import Checkpoint, save_checkpoint
    from .classifier import AugmentationPolicy, ProtocolAudit, evaluate, train_classifier, write_results_csv

    ds, spec, config, gen = _classifier_setup(cfg)
    res = train_classifier(spec, ds, AugmentationPolicy(cfg["rate"]), gen, config)
    audit = ProtocolAudit()
    val = evaluate(res.model, ds, "val", audit, f"rate={cfg['rate']}")
    test = evaluate(res.model, ds, "test", audit, f"rate={cfg['rate']}")
    audit.check_test_last_and_once()
    write_results_csv(_out(cfg, "results.csv"), [{"experiment_id": cfg["experiment_id"],
                                                  "samples_per_class": _train_count(ds), "test_accuracy": test}])
    with open(_out(cfg, "history.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([h["epoch"], repr(h["loss"])] for h in res.history)
    save_checkpoint(Checkpoint(Checkpoint.prefixed("classifier", res.model.state_dict()),
                               {"spec": spec.to_dict(), "rate": cfg["rate"], "validation_accuracy": val}),
                    _out(cfg, "classifier.ckpt"))
    log.info("validation accuracy %.4f, test accuracy %.4f", val, test)


def cmd_classify_sweep(cfg):
    from .classifier import ProtocolAudit, sweep_augmentation_rate, write_results_csv

    rates = parse_rates(cfg["rates"])
    ds, spec, config, gen = _classifier_setup(cfg)
    if any(r > 0 for r in rates) and gen is None:
        raise CliError("rates above 0 need --checkpoint")
    res = sweep_augmentation_rate(rates, spec, ds, gen, config, ProtocolAudit())
    with open(_out(cfg, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "rate", "validation_accuracy", "test_accuracy"])
        for r in rates:
            w.writerow(["rate", r, repr(res.validation_accuracy[r]), ""])
        w.writerow(["selected", res.best_rate, repr(res.validation_accuracy[res.best_rate]),
                    repr(res.test_accuracy)])
    write_results_csv(_out(cfg, "results.csv"), [{"experiment_id": cfg["experiment_id"],
                                                  "samples_per_class": _train_count(ds),
                                                  "test_accuracy": res.test_accuracy}])
    log.info("selected rate %d, test accuracy %.4f", res.best_rate, res.test_accuracy)


def cmd_matchnet_train(cfg):
    from .checkpoint import save_checkpoint
    from .matchnet import EmbedSpec, MatchNetConfig, matchnet_checkpoint, train_matchnet

    ds = _dataset_from_cfg(cfg)
    if ds.split_tags is None:
        raise CliError("matchnet training needs domain splits (source and validation); pass --splits")
    gen = None
    if cfg["checkpoint"]:
        from .trainer import load_generator
        gen = load_generator(cfg["checkpoint"])
    h, w, c = ds.image_shape
    espec = EmbedSpec(cfg["filters"], cfg["depth"], c, h)
    mc = MatchNetConfig(cfg["episodes"], cfg["way"], cfg["shot"], cfg["query_per_class"], cfg["k"], cfg["lr"],
                        val_every=cfg["val_every"], val_episodes=cfg["val_episodes"], seed=cfg["seed"])
    source = [ds.images[i] for i in ds.classes("source")]
    from .data.dataset import to_nchw
    source = [to_nchw(im) for im in source]
    validation = [to_nchw(ds.images[i]) for i in ds.classes("validation")] or None
    if validation is not None and len(validation) < cfg["way"]:
        log.warning("only %d validation classes for %d-way episodes; keeping the last weights",
                    len(validation), cfg["way"])
        validation = None
    res = train_matchnet(source, mc, espec, gen, cfg["selector"], validation)
    save_checkpoint(matchnet_checkpoint(res, mc), _out(cfg, "matchnet.ckpt"))
    with open(_out(cfg, "history.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "loss", "val_accuracy"])
        w.writerows([r["episode"], repr(r["loss"]), repr(r["val_accuracy"])] for r in res.history)
    if res.history:
        log.info("best validation accuracy %.4f at episode %d", res.best_val, res.best_episode)


def cmd_matchnet_eval(cfg):
    from .matchnet import evaluate_oneshot, load_matchnet, matchnet_predictor, pixel_predictor, write_report_csv

    ds = _dataset_from_cfg(cfg)
    gen = None
    if cfg["checkpoint"]:
        from .trainer import load_generator
        gen = load_generator(cfg["checkpoint"])
    if cfg["k"] > 0 and gen is None:
        raise CliError("k > 0 needs a generator --checkpoint")
    technique = cfg["technique"]
    if technique == "pixel":
        predict = pixel_predictor
    elif technique == "matchnet":
        if not cfg["model"]:
            raise CliError("technique matchnet needs --model (from 'matchnet train')")
        predict = matchnet_predictor(load_matchnet(cfg["model"]), gen, cfg["k"])
    else:
        raise CliError(f"unknown technique {technique!r}")
    domain = cfg["domain"] if ds.split_tags is not None else None
    name = technique + (f"+dagan(k={cfg['k']})" if cfg["k"] else "")
    rep = evaluate_oneshot(predict, ds, cfg["episodes"], cfg["way"], cfg["shot"], cfg["query_per_class"],
                           seed=cfg["seed"], generator=gen if technique == "pixel" else None,
                           k=cfg["k"] if technique == "pixel" else 0, technique=name, domain=domain)
    write_report_csv(_out(cfg, "report.csv"), [rep])
    log.info("%s: %.4f +- %.4f over %d episodes", name, rep.test_accuracy, rep.stderr, rep.episodes)


HANDLERS = {
    ("data", "pack"): cmd_data_pack, ("data", "split"): cmd_data_split,
    ("dagan", "train"): cmd_dagan_train, ("dagan", "sample"): cmd_dagan_sample,
    ("dagan", "interpolate"): cmd_dagan_interpolate,
    ("classify", "train"): cmd_classify_train, ("classify", "sweep"): cmd_classify_sweep,
    ("matchnet", "train"): cmd_matchnet_train, ("matchnet", "eval"): cmd_matchnet_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help and --version
            return int(exc.code or 0)
        if not args.group or not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            raise CliError("choose a command, e.g. 'dagan train'")
        command = (args.group, args.command)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s")
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(command, vars(args), file_values)
        out_dir = Path(cfg["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        write_run_record(out_dir, command, cfg)
    except (CliError, OSError, ValueError) as exc:
        print(f"dagan: error: {exc}", file=sys.stderr)
        return 1
    try:
        HANDLERS[command](cfg)
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"dagan: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.debug("failure", exc_info=True)
        print(f"dagan: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
