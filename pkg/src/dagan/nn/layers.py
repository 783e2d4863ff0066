"""Module containers and parameterised layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal module tree: parameters, buffers, train/eval and state dicts.

    Children are discovered from instance attributes (Modules, lists of
    Modules) in assignment order, which fixes the parameter naming.
    """

    _buffer_names: tuple = ()

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> Iterator["Module"]:
        for _, m in self.named_modules():
            yield m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name in mod._buffer_names:
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        params = dict(self.named_parameters())
        for name, value in state.items():
            if name in params:
                if params[name].shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {params[name].shape}")
                params[name].data = np.array(value, dtype=params[name].dtype, copy=True)
        for mod_name, mod in self.named_modules():
            for buf in mod._buffer_names:
                key = f"{mod_name}.{buf}" if mod_name else buf
                old = getattr(mod, buf)
                setattr(mod, buf, np.array(state[key], dtype=np.asarray(old).dtype, copy=True))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_rng(self, rng: np.random.Generator) -> "Module":
        """Share one generator among all dropout layers."""
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng
        return self

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None, bias: bool = True, gain: float = np.sqrt(2.0)):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel_size * kernel_size
        self.in_ch, self.out_ch, self.kernel_size, self.stride = in_ch, out_ch, kernel_size, stride
        self.weight = Parameter(_uniform(rng, (out_ch, in_ch, kernel_size, kernel_size), fan_in, gain))
        self.bias = Parameter(np.zeros(out_ch, dtype=get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding="same")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, gain: float = 1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_uniform(rng, (in_features, out_features), in_features, gain))
        self.bias = Parameter(np.zeros(out_features, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchRenorm(Module):
    """Batch renormalisation layer; ``r_max``/``d_max`` are driven by a schedule."""

    _buffer_names = ("moving_mean", "moving_var")

    def __init__(self, channels: int, momentum: float = 0.01, r_max: float = 1.0, d_max: float = 0.0):
        super().__init__()
        dtype = get_default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.moving_mean = np.zeros(channels, dtype=dtype)
        self.moving_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.r_max = r_max
        self.d_max = d_max

    def state(self) -> F.BatchRenormState:
        return F.BatchRenormState(self.moving_mean, self.moving_var, self.gamma, self.beta,
                                  r_max=self.r_max, d_max=self.d_max, momentum=self.momentum)

    def forward(self, x: Tensor) -> Tensor:
        st = self.state()
        out = F.batch_renorm(x, st, self.training)
        self.moving_mean, self.moving_var = st.moving_mean, st.moving_var
        return out


class LayerNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        dtype = get_default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.rate, self.training, self.rng)


def renorm_limits(step: int, total_steps: int, warmup_frac: float = 0.25,
                  r_final: float = 3.0, d_final: float = 5.0) -> tuple[float, float]:
    """Linear ramp r_max 1->r_final, d_max 0->d_final over the first warmup_frac of steps."""
    span = max(1.0, warmup_frac * total_steps)
    t = min(1.0, step / span)
    return 1.0 + t * (r_final - 1.0), t * d_final


def set_renorm_limits(module: Module, r_max: float, d_max: float) -> None:
    for m in module.modules():
        if isinstance(m, BatchRenorm):
            m.r_max, m.d_max = r_max, d_max
