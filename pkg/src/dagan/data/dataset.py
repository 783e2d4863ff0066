"""Class-indexed image collections with domain and case split annotations."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DOMAINS = ("source", "validation", "target")
CASE_TAGS = ("train", "val", "test", "unused")


class DatasetError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    """Images grouped by class, each class an array ``[n, H, W, C]`` with values in [0, 1].

    ``split_tags`` assigns each class to a domain; ``case_tags`` assigns each
    image of a class to train/val/test/unused.
    """

    images: list
    class_names: list = field(default_factory=list)
    split_tags: list | None = None
    case_tags: list | None = None
    name: str = ""

    def __post_init__(self):
        self.images = [np.asarray(im, dtype=np.float32) for im in self.images]
        if not self.class_names:
            self.class_names = [str(i) for i in range(len(self.images))]
        if len(self.class_names) != len(self.images):
            raise DatasetError("class_names and images differ in length")
        shapes = {im.shape[1:] for im in self.images}
        if len(shapes) > 1:
            raise DatasetError(f"inconsistent image shapes across classes: {sorted(shapes)}")
        for c, im in enumerate(self.images):
            if im.ndim != 4:
                raise DatasetError(f"class {c}: expected [n,H,W,C], got {im.shape}")
            if len(im) == 0:
                raise DatasetError(f"class {self.class_names[c]!r} is empty")
            if not np.all(np.isfinite(im)) or im.min() < 0.0 or im.max() > 1.0:
                raise DatasetError(f"class {self.class_names[c]!r}: pixel values outside [0, 1]")
        if self.split_tags is not None:
            if len(self.split_tags) != len(self.images):
                raise DatasetError("split_tags must have one entry per class")
            bad = set(self.split_tags) - set(DOMAINS)
            if bad:
                raise DatasetError(f"unknown domain tags {sorted(bad)}")
        if self.case_tags is not None:
            if len(self.case_tags) != len(self.images):
                raise DatasetError("case_tags must have one entry per class")
            self.case_tags = [np.asarray(t) for t in self.case_tags]
            for c, (t, im) in enumerate(zip(self.case_tags, self.images)):
                if len(t) != len(im):
                    raise DatasetError(f"class {c}: {len(t)} case tags for {len(im)} images")

    @property
    def class_count(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple:
        return self.images[0].shape[1:]

    def classes(self, domain: str | None = None) -> list[int]:
        if domain is None:
            return list(range(self.class_count))
        if self.split_tags is None:
            raise DatasetError("dataset has no domain split")
        return [c for c, t in enumerate(self.split_tags) if t == domain]

    def cases(self, class_id: int, tag: str | None = None) -> np.ndarray:
        im = self.images[class_id]
        if tag is None:
            return im
        if self.case_tags is None:
            raise DatasetError("dataset has no case split")
        return im[self.case_tags[class_id] == tag]

    def subset(self, class_ids) -> "LabeledImageSet":
        class_ids = list(class_ids)
        return LabeledImageSet(
            images=[self.images[c] for c in class_ids],
            class_names=[self.class_names[c] for c in class_ids],
            split_tags=None if self.split_tags is None else [self.split_tags[c] for c in class_ids],
            case_tags=None if self.case_tags is None else [self.case_tags[c] for c in class_ids],
            name=self.name,
        )

    def domain(self, name: str) -> "LabeledImageSet":
        return self.subset(self.classes(name))

    def with_case_tags(self, case_tags) -> "LabeledImageSet":
        return replace(self, case_tags=list(case_tags))

    def stack(self, class_ids=None, tag: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Images as ``[N, C, H, W]`` plus labels that index into ``class_ids``."""
        class_ids = list(range(self.class_count)) if class_ids is None else list(class_ids)
        xs, ys = [], []
        for label, c in enumerate(class_ids):
            im = self.cases(c, tag)
            xs.append(im)
            ys.append(np.full(len(im), label, dtype=np.int64))
        x = np.concatenate(xs).transpose(0, 3, 1, 2) if xs else np.zeros((0,) + self.image_shape)
        return np.ascontiguousarray(x, dtype=np.float32), np.concatenate(ys) if ys else np.zeros(0, np.int64)

    def audit(self) -> None:
        """Check that domains partition the classes and case tags are valid."""
        if self.split_tags is not None:
            if any(t not in DOMAINS for t in self.split_tags):
                raise DatasetError("class with no valid domain")
        if self.case_tags is not None:
            for c, tags in enumerate(self.case_tags):
                bad = set(np.unique(tags)) - set(CASE_TAGS)
                if bad:
                    raise DatasetError(f"class {c}: unknown case tags {sorted(bad)}")


def to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2))


def to_nhwc(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images).transpose(0, 2, 3, 1))
