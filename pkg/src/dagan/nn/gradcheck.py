"""Finite-difference verification of analytic gradients (64-bit)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad, precision


class GradCheckError(FloatingPointError):
    def __init__(self, input_index: int, coord: tuple, value: float):
        super().__init__(f"non-finite value {value} while probing input {input_index} at {coord}")
        self.input_index = input_index
        self.coord = coord


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    max_abs_error: list[float]
    probes: list[int]
    tolerance: float
    worst_coord: list[tuple] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


# central differences with h=1e-5 carry ~1e-11 roundoff on O(1) outputs, so gradients smaller
# than this are compared absolutely (to tolerance * floor) instead of relatively
SCALE_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = SCALE_FLOOR) -> float:
    """Normwise relative error ``max|a - n| / max(|n|, |a|, floor)``.

    Elementwise ratios blow up on entries whose true gradient is ~0, where
    finite differences only resolve roundoff; scaling by the largest entry
    keeps the measure meaningful for whole-network checks. A tensor whose
    gradient vanishes identically (a bias feeding only normalized layers)
    would otherwise score noise/noise ~ 1.
    """
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), floor)
    return float(np.abs(analytic - numeric).max()) / scale


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], tolerance: float = 1e-6,
               h: float = 1e-5, max_probes: int | None = None,
               rng: np.random.Generator | None = None,
               extra_params: Sequence[Tensor] = ()) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f(*inputs)`` with central differences.

    ``extra_params`` are tensors captured by ``f`` (e.g. network weights); they are
    probed in place. ``max_probes`` caps probed coordinates per input (chosen by
    ``rng``). Everything runs in float64.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with precision(np.float64):
        tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
        for p in extra_params:
            if p.dtype != np.float64:
                raise TypeError("grad_check needs float64 parameters; build them under precision(np.float64)")
        targets = tensors + list(extra_params)
        out = f(*tensors)
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        analytic = [g.data for g in grad(out, targets)]

        def evaluate() -> float:
            # grad stays enabled: f may differentiate internally (gradient penalties)
            return float(f(*[Tensor(t.data, requires_grad=True) for t in tensors]).data)

        rel, absn, probes, worst = [], [], [], []
        for idx, (t, a) in enumerate(zip(targets, analytic)):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_probes is not None and flat.size > max_probes:
                coords = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
            numeric = np.empty(len(coords))
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                fp = evaluate()
                flat[c] = orig - h
                fm = evaluate()
                flat[c] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradCheckError(idx, np.unravel_index(c, t.shape), fp if not np.isfinite(fp) else fm)
                numeric[j] = (fp - fm) / (2 * h)
            a_sel = a.reshape(-1)[coords]
            diff = np.abs(a_sel - numeric)
            rel.append(relative_error(a_sel, numeric))
            absn.append(float(diff.max()) if diff.size else 0.0)
            probes.append(int(len(coords)))
            k = int(np.argmax(diff)) if diff.size else 0
            worst.append(tuple(int(i) for i in np.unravel_index(coords[k], t.shape)) if diff.size else ())
    return GradCheckReport(rel, absn, probes, tolerance, worst)
