"""Class-level domain splits and per-class case splits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .dataset import DatasetError, LabeledImageSet

log = logging.getLogger(__name__)

TEST_CASES = 2
VAL_CASES = 3


@dataclass(frozen=True)
class SplitSpec:
    """Shuffle classes with ``seed`` and cut at two half-open boundaries.

    The three resulting class ranges are assigned to the domains in ``order``.
    ``samples_per_class`` caps every class after the split (first images kept).
    """

    dataset_name: str
    seed: int = 0
    boundaries: tuple = (0, 0)
    samples_per_class: int | None = None
    order: tuple = ("source", "validation", "target")

    def __post_init__(self):
        a, b = self.boundaries
        if not 0 < a < b:
            raise ValueError(f"boundaries must satisfy 0 < first < second, got {self.boundaries}")
        if sorted(self.order) != sorted(("source", "validation", "target")):
            raise ValueError(f"order must be a permutation of the three domains, got {self.order}")
        if self.samples_per_class is not None and self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")

    def check(self, class_count: int) -> None:
        if self.boundaries[1] >= class_count:
            raise DatasetError(
                f"{self.dataset_name}: boundary {self.boundaries[1]} leaves no classes for the last "
                f"domain out of {class_count}")


def omniglot_profile(seed: int = 0) -> SplitSpec:
    return SplitSpec("omniglot", seed, (1200, 1412))


def emnist_profile(seed: int = 0, class_count: int = 48) -> SplitSpec:
    # source and validation are fixed at 35 and 7 classes; the target takes whatever remains
    if class_count <= 42:
        raise ValueError("EMNIST profile needs more than 42 classes")
    return SplitSpec("emnist", seed, (35, 42), samples_per_class=100)


def vggface_profile(seed: int = 0) -> SplitSpec:
    return SplitSpec("vggface", seed, (1802, 2300), samples_per_class=100,
                     order=("source", "target", "validation"))


PROFILES = {"omniglot": omniglot_profile, "emnist": emnist_profile, "vggface": vggface_profile}


def split_domains(dataset: LabeledImageSet, spec: SplitSpec,
                  rng: np.random.Generator | None = None) -> LabeledImageSet:
    """Shuffle classes and tag each with a domain; returns the shuffled, capped set."""
    spec.check(dataset.class_count)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    perm = rng.permutation(dataset.class_count)
    a, b = spec.boundaries
    tags = [spec.order[0]] * a + [spec.order[1]] * (b - a) + [spec.order[2]] * (dataset.class_count - b)
    out = dataset.subset(perm.tolist())
    if spec.samples_per_class is not None:
        out = replace(out, images=[im[:spec.samples_per_class] for im in out.images], case_tags=None)
    out = replace(out, split_tags=tags)
    for domain in spec.order:
        names = [out.class_names[c] for c in out.classes(domain)]
        log.info("%s %s: %d classes %s", spec.dataset_name, domain, len(names), names)
    return out


def split_cases(n_images: int, train_count: int, rng: np.random.Generator,
                test_count: int = TEST_CASES, val_count: int = VAL_CASES) -> np.ndarray:
    """Case tags for one class: 2 test, 3 val, ``train_count`` train, rest unused, randomly placed.

    The test and val counts can be raised for small experiments that need tighter accuracy estimates.
    """
    if min(train_count, test_count, val_count) < 0:
        raise ValueError("case counts must be non-negative")
    need = train_count + test_count + val_count
    if n_images < need:
        raise DatasetError(f"class has {n_images} images, needs at least {need} "
                           f"({train_count} train + {val_count} val + {test_count} test)")
    tags = np.array(["test"] * test_count + ["val"] * val_count + ["train"] * train_count
                    + ["unused"] * (n_images - need), dtype="<U6")
    return tags[rng.permutation(n_images)]


def apply_case_split(dataset: LabeledImageSet, train_count: int, rng: np.random.Generator,
                     test_count: int = TEST_CASES, val_count: int = VAL_CASES) -> LabeledImageSet:
    tags = [split_cases(len(im), train_count, rng, test_count, val_count) for im in dataset.images]
    return dataset.with_case_tags(tags)
