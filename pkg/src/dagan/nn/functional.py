"""Differentiable network operations composed from :mod:`dagan.nn.tensor` primitives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    as_tensor,
    concat,
    conv_matmul,
    get_default_dtype,
    exp,
    log,
    matmul,
    mul,
    power,
    reshape,
    sum_to,
    tsum,
)

EPS = 1e-8


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation, NCHW input and KCfhfw kernel.

    ``padding="same"`` gives ``ceil(H / stride)`` outputs (extra padding goes
    to the bottom/right); ``"valid"`` uses no padding.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be [N,C,H,W], got {x.shape}", axes=("input",))
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be [K,C,fh,fw], got {kernel.shape}",
                             axes=("kernel",))
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input C={x.shape[1]}, kernel C={kernel.shape[1]}",
            axes=("input.C", "kernel.C"),
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    k, _, fh, fw = kernel.shape
    if padding == "same":
        pads = _same_pads(h, fh, stride) + _same_pads(w, fw, stride)
    elif padding == "valid":
        if h < fh or w < fw:
            raise DimensionError(
                f"conv2d valid padding: kernel {fh}x{fw} larger than input {h}x{w}",
                axes=("input.H", "input.W"),
            )
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ho = (h + pads[0] + pads[1] - fh) // stride + 1
    wo = (w + pads[2] + pads[3] - fw) // stride + 1
    w2d = reshape(kernel, (k, c * fh * fw))
    if fh == fw == 1 and stride == 1:
        out = matmul(w2d, reshape(x, (n, c, h * w)))
    else:
        out = conv_matmul(x, w2d, fh, fw, stride, pads)
    out = reshape(out, (n, k, ho, wo))
    if bias is not None:
        out = out + reshape(bias, (1, k, 1, 1))
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(as_tensor(x), weight)
    if bias is not None:
        out = out + bias
    return out


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    x = as_tensor(x)
    # the mask is a constant, so higher derivatives are exact away from 0
    mask = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return mul(x, Tensor._wrap(mask))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


@dataclass
class BatchRenormState:
    """Running statistics and clip limits for batch renormalisation."""

    moving_mean: np.ndarray
    moving_var: np.ndarray
    gamma: Tensor
    beta: Tensor
    r_max: float = 1.0
    d_max: float = 0.0
    momentum: float = 0.01
    eps: float = EPS

    @classmethod
    def fresh(cls, channels: int, dtype=None, **kw) -> "BatchRenormState":
        dtype = dtype or get_default_dtype()
        return cls(
            moving_mean=np.zeros(channels, dtype=dtype),
            moving_var=np.ones(channels, dtype=dtype),
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            **kw,
        )


def _channel_view(x: Tensor) -> tuple[tuple, tuple]:
    if x.ndim == 4:
        return (0, 2, 3), (1, x.shape[1], 1, 1)
    if x.ndim == 2:
        return (0,), (1, x.shape[1])
    raise DimensionError(f"expected [N,C,H,W] or [N,F], got {x.shape}", axes=("input",))


def batch_renorm(x: Tensor, state: BatchRenormState, training: bool) -> Tensor:
    """Batch renormalisation (Ioffe 2017) with stop-gradient r and d.

    Training mode updates ``state.moving_mean`` / ``state.moving_var`` in place.
    """
    x = as_tensor(x)
    axes, view = _channel_view(x)
    gamma = reshape(state.gamma, view)
    beta = reshape(state.beta, view)
    if not training:
        mu = state.moving_mean.reshape(view).astype(x.dtype)
        inv = (1.0 / np.sqrt(state.moving_var + state.eps)).reshape(view).astype(x.dtype)
        return (x - Tensor._wrap(mu)) * Tensor._wrap(inv) * gamma + beta
    if x.shape[0] < 2:
        raise ValueError("batch_renorm in training mode needs a batch of at least 2")
    mu_b = x.mean(axis=axes, keepdims=True)
    centered = x - mu_b
    var_b = (centered * centered).mean(axis=axes, keepdims=True)
    sigma_b = power(var_b + state.eps, 0.5)

    sigma_np = np.sqrt(state.moving_var + state.eps).reshape(view)
    mu_np = state.moving_mean.reshape(view)
    r = np.clip(sigma_b.data / sigma_np, 1.0 / state.r_max, state.r_max).astype(x.dtype)
    d = np.clip((mu_b.data - mu_np) / sigma_np, -state.d_max, state.d_max).astype(x.dtype)

    m = state.momentum
    state.moving_mean = (state.moving_mean + m * (mu_b.data.reshape(-1) - state.moving_mean)
                         ).astype(state.moving_mean.dtype)
    state.moving_var = (state.moving_var + m * (var_b.data.reshape(-1) - state.moving_var)
                        ).astype(state.moving_var.dtype)

    xhat = centered / sigma_b * Tensor._wrap(r) + Tensor._wrap(d)
    return xhat * gamma + beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = EPS) -> Tensor:
    """Normalise each sample over all non-batch axes; per-channel affine."""
    x = as_tensor(x)
    axes = tuple(range(1, x.ndim))
    if int(np.prod([x.shape[a] for a in axes])) < 2:
        raise DimensionError("layer_norm needs at least 2 elements per sample", axes=("features",))
    view = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    mu = x.mean(axis=axes, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    xhat = centered * power(var + eps, -0.5)
    return xhat * reshape(gamma, view) + reshape(beta, view)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    mask = (keep / (1.0 - rate)).astype(x.dtype)
    return mul(x, Tensor._wrap(mask))


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"avg_pool2d needs spatial dims divisible by {size}, got {h}x{w}",
                             axes=("H", "W"))
    return reshape(x, (n, c, h // size, size, w // size, size)).mean(axis=(3, 5))


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d needs spatial dims divisible by {size}, got {h}x{w}",
                             axes=("H", "W"))
    blocks = reshape(x, (n, c, h // size, size, w // size, size))
    # one-hot selector of the first maximum in each window
    b = blocks.data.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // size, w // size, size * size)
    onehot = np.zeros_like(b)
    np.put_along_axis(onehot, b.argmax(axis=-1)[..., None], 1.0, axis=-1)
    onehot = onehot.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
    return tsum(mul(blocks, Tensor._wrap(np.ascontiguousarray(onehot))), axis=(3, 5))


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    n, c, h, w = x.shape
    ones = Tensor._wrap(np.ones((1, 1, 1, scale, 1, scale), dtype=x.dtype))
    return reshape(mul(reshape(x, (n, c, h, 1, w, 1)), ones), (n, c, h * scale, w * scale))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x - Tensor._wrap(x.data.max(axis=axis, keepdims=True))
    return shifted - log(tsum(exp(shifted), axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(log_softmax(logits, axis=1) * Tensor._wrap(onehot)).sum(axis=1).mean()


def l2_normalize(x: Tensor, axis: int = -1, eps: float = EPS) -> Tensor:
    return x * power(tsum(x * x, axis=axis, keepdims=True) + eps, -0.5)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


__all__ = [
    "BatchRenormState", "EPS", "avg_pool2d", "batch_renorm", "concat", "conv2d",
    "cross_entropy", "dropout", "flatten", "global_avg_pool", "l2_normalize", "layer_norm",
    "leaky_relu", "linear", "log_softmax", "max_pool2d", "relu", "softmax", "sum_to",
    "upsample_nearest",
]
