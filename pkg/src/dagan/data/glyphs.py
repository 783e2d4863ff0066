"""Procedural stroke glyphs: a stand-in for handwritten character sets.

Each class is a fixed set of strokes (line segments and arcs). Every sample
re-renders the strokes under a random affine transform, per-vertex jitter and
a random pen width, so intra-class variation is class-agnostic by construction.
"""
from __future__ import annotations

import numpy as np

from .dataset import LabeledImageSet


def _stroke(rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.55:
        p0 = rng.uniform(-0.7, 0.7, 2)
        p1 = rng.uniform(-0.7, 0.7, 2)
        while np.linalg.norm(p1 - p0) < 0.5:
            p1 = rng.uniform(-0.7, 0.7, 2)
        t = np.linspace(0.0, 1.0, 5)[:, None]
        return p0 + t * (p1 - p0)
    c = rng.uniform(-0.35, 0.35, 2)
    r = rng.uniform(0.25, 0.55)
    a0 = rng.uniform(0, 2 * np.pi)
    span = rng.uniform(0.6, 1.6) * np.pi
    a = a0 + np.linspace(0.0, span, 9)
    return c + r * np.stack([np.cos(a), np.sin(a)], axis=1)


def glyph_prototype(rng: np.random.Generator, min_strokes: int = 2, max_strokes: int = 4) -> list:
    return [_stroke(rng) for _ in range(int(rng.integers(min_strokes, max_strokes + 1)))]


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # px [P,2], a/b [S,2] -> [P,S]
    ab = b - a
    denom = np.maximum((ab * ab).sum(1), 1e-12)
    t = np.clip(((px[:, None, :] - a[None]) * ab[None]).sum(-1) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(px[:, None, :] - closest, axis=-1)


def render_glyph(strokes: list, rng: np.random.Generator | None = None, size: int = 32,
                 jitter: bool = True) -> np.ndarray:
    """Rasterise strokes to ``[size, size, 1]`` in [0, 1] with anti-aliased edges."""
    if jitter:
        theta = rng.uniform(-0.3, 0.3)
        scale = rng.uniform(0.8, 1.1)
        shear = rng.uniform(-0.2, 0.2)
        shift = rng.uniform(-0.12, 0.12, 2)
        width = rng.uniform(0.06, 0.11)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        mat = scale * rot @ np.array([[1.0, shear], [0.0, 1.0]])
    else:
        mat, shift, width = np.eye(2), np.zeros(2), 0.085
    a_list, b_list = [], []
    for s in strokes:
        pts = s + (rng.normal(0.0, 0.025, s.shape) if jitter else 0.0)
        pts = pts @ mat.T + shift
        a_list.append(pts[:-1])
        b_list.append(pts[1:])
    a, b = np.concatenate(a_list), np.concatenate(b_list)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    px = np.stack([xx.ravel(), yy.ravel()], axis=1)
    d = _segment_distance(px, a, b).min(axis=1)
    pixel = 2.0 / size
    img = np.clip((width - d) / pixel + 0.5, 0.0, 1.0)
    return img.reshape(size, size, 1).astype(np.float32)


def make_glyph_dataset(num_classes: int, samples_per_class: int, size: int = 32,
                       seed: int = 0, name: str = "glyphs", render_stream: int = 0) -> LabeledImageSet:
    """Deterministic for a given seed; class ``c`` depends only on ``(seed, c)``.

    A different ``render_stream`` draws fresh renders of the same glyph classes.
    """
    if render_stream < 0:
        raise ValueError("render_stream must be non-negative")
    images = []
    for c in range(num_classes):
        proto = glyph_prototype(np.random.default_rng([seed, c, 0]))
        rng = np.random.default_rng([seed, c, 1 + render_stream])
        images.append(np.stack([render_glyph(proto, rng, size) for _ in range(samples_per_class)]))
    return LabeledImageSet(images=images, class_names=[f"glyph{c:04d}" for c in range(num_classes)],
                           name=name)
