"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.epsilon <= 0:
            raise ValueError("lr and epsilon must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update. Returns new parameter arrays and a new state; inputs are not mutated.

    Parameters whose gradient is ``None`` are left untouched.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, dict(state.m), dict(state.v)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    new_state = AdamState(state.lr, b1, b2, state.epsilon, t, new_m, new_v)
    return new_params, new_state


class Adam:
    """Adam over a named parameter mapping, reading ``.grad`` off each tensor."""

    def __init__(self, named_params, lr: float = 1e-4, beta1: float = 0.0, beta2: float = 0.9,
                 epsilon: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        new, self.state = adam_step(arrays, grads, self.state)
        for k, p in self.params.items():
            p.data = new[k]

    def state_dict(self) -> dict:
        arrays = {}
        for k in self.state.m:
            arrays[f"m.{k}"] = self.state.m[k]
            arrays[f"v.{k}"] = self.state.v[k]
        meta = {"lr": self.state.lr, "beta1": self.state.beta1, "beta2": self.state.beta2,
                "epsilon": self.state.epsilon, "step_count": self.state.step_count}
        return {"meta": meta, "arrays": arrays}

    def load_state_dict(self, sd: dict) -> None:
        meta, arrays = sd["meta"], sd["arrays"]
        m = {k[2:]: np.array(a, copy=True) for k, a in arrays.items() if k.startswith("m.")}
        v = {k[2:]: np.array(a, copy=True) for k, a in arrays.items() if k.startswith("v.")}
        self.state = AdamState(meta["lr"], meta["beta1"], meta["beta2"], meta["epsilon"],
                               int(meta["step_count"]), m, v)
