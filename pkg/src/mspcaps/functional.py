"""Neural network operations on `Tensor`: convolution, pooling, normalization, dropout, init."""

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mspcaps.errors import ContractError, ShapeError
from mspcaps.tensor import Tensor, get_default_dtype, sqrt

if TYPE_CHECKING:
    from mspcaps.nn import BatchNorm2d, LayerNorm


@dataclass
class ConvParams:
    """Weights and geometry of a 2-D convolution."""

    weight: Tensor
    """Kernel of shape (out_ch, in_ch, k, k)."""
    bias: Optional[Tensor] = None
    """Optional per-output-channel bias."""
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        out_ch, in_ch, kh, kw = self.weight.shape
        if kh != kw or kh < 1:
            raise ShapeError(f"conv kernels must be square with k >= 1, got {self.weight.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ContractError(f"invalid stride {self.stride} / padding {self.padding}")
        if self.bias is not None and self.bias.shape != (out_ch,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {out_ch} output channels")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    """Spatial output size of a convolution along one axis."""
    return (size + 2 * padding - k) // stride + 1


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (B, C, H, W) -> (B, C, Ho, Wo, k, k) read-only view
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int) -> np.ndarray:
    """Adjoint of `_windows`: add (B, C, Ho, Wo, k, k) patches back onto a (B, C, H, W) map."""
    out = np.zeros(shape, dtype=cols.dtype)
    ho, wo = cols.shape[2], cols.shape[3]
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, :, :, i, j]
    return out


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlate a (B, C, H, W) batch with `params.weight`."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, C, H, W), got {x.shape}")
    w = params.weight
    out_ch, in_ch, k, _ = w.shape
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    s, p = params.stride, params.padding
    if x.shape[2] + 2 * p < k or x.shape[3] + 2 * p < k:
        raise ShapeError(f"input {x.shape} is smaller than kernel {k} after padding {p}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _windows(padded, k, s)
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if params.bias is not None:
        out = out + params.bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, w) if params.bias is None else (x, w, params.bias)

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad_x = None
        if x.requires_grad:
            dcols = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            grad_x = _scatter_windows(dcols, padded.shape, k, s)
            if p:
                grad_x = grad_x[:, :, p:-p, p:-p]
        grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        grads: tuple[Optional[np.ndarray], ...] = (grad_x, grad_w)
        if params.bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return Tensor.derive(out, parents, rule, "conv2d")


def avgpool2d(x: Tensor, k: int, s: int) -> Tensor:
    """Average (k, k) windows taken every `s` pixels."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d expects (B, C, H, W), got {x.shape}")
    _, _, h, w = x.shape
    if k == s and (h % k or w % k):
        raise ShapeError(f"feature map {h}x{w} is not divisible by patch size p={k}")
    if h < k or w < k:
        raise ShapeError(f"feature map {h}x{w} is smaller than pooling window {k}")
    out = np.ascontiguousarray(_windows(x.data, k, s).mean(axis=(4, 5)))

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        spread = np.broadcast_to((g / (k * k))[..., None, None], (*g.shape, k, k))
        return (_scatter_windows(spread, x.shape, k, s),)

    return Tensor.derive(out, (x,), rule, "avgpool2d")


def batchnorm2d(x: Tensor, state: "BatchNorm2d") -> Tensor:
    """Normalize each channel with batch statistics (train) or running statistics (eval)."""
    channels = state.gamma.shape[0]
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"batchnorm2d over {channels} channels got input {x.shape}")
    gamma = state.gamma.reshape(1, channels, 1, 1)
    beta = state.beta.reshape(1, channels, 1, 1)
    if not state.training:
        mean = state.running_mean.reshape(1, channels, 1, 1)
        scale = np.sqrt(state.running_var + state.eps).reshape(1, channels, 1, 1)
        return (x - mean.astype(x.dtype)) / scale.astype(x.dtype) * gamma + beta

    if x.shape[0] < 2:
        raise ContractError("batchnorm2d in train mode needs a batch of at least 2")
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    out = centered / sqrt(var + state.eps) * gamma + beta

    n = x.size // channels
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mean.data.reshape(channels)
    state.running_var = (1 - m) * state.running_var + m * var.data.reshape(channels) * (n / (n - 1))
    return out


def layernorm(x: Tensor, state: "LayerNorm") -> Tensor:
    """Normalize every vector along the last dimension, then apply the affine map."""
    d = state.gamma.shape[0]
    if x.shape[-1] != d:
        raise ShapeError(f"layernorm over dimension {d} got input {x.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + state.eps) * state.gamma + state.beta


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: zero entries with probability `rate` and rescale survivors."""
    if not 0 <= rate < 1:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * Tensor(keep, dtype=x.dtype)


def compute_fans(shape: tuple[int, ...]) -> tuple[int, int]:
    """Return (fan_in, fan_out): (out, in) matrices and (out, in, k, k) kernels."""
    if len(shape) < 2:
        raise ContractError(f"cannot compute fans of shape {shape}")
    receptive = math.prod(shape[2:])
    return shape[1] * receptive, shape[0] * receptive


def init_xavier_normal(
    shape: tuple[int, ...],
    rng: np.random.Generator,
    *,
    fans: Optional[tuple[int, int]] = None,
    dtype: Any = None,
) -> np.ndarray:
    """Draw N(0, 2 / (fan_in + fan_out))."""
    fan_in, fan_out = fans or compute_fans(shape)
    if fan_in + fan_out <= 0:
        raise ContractError(f"zero fan for shape {shape}")
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape).astype(dtype or get_default_dtype())


def init_kaiming(
    shape: tuple[int, ...],
    rng: np.random.Generator,
    *,
    fan_in: Optional[int] = None,
    dtype: Any = None,
) -> np.ndarray:
    """Draw N(0, 2 / fan_in)."""
    fan_in = compute_fans(shape)[0] if fan_in is None else fan_in
    if fan_in <= 0:
        raise ContractError(f"zero fan_in for shape {shape}")
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype or get_default_dtype())
