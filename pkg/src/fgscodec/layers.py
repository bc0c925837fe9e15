"""Network building blocks: GDN, residual 3x3 stacks, subpixel upsampling."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

_PEDESTAL = 2.0**-18


class _LowerBoundFn(torch.autograd.Function):
    """max(x, bound) whose gradient still pushes x upward at the bound."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x, bound)
        return torch.max(x, bound)

    @staticmethod
    def backward(ctx, grad):
        x, bound = ctx.saved_tensors
        passthrough = (x >= bound) | (grad < 0)
        return grad * passthrough, None


def lower_bound(x: torch.Tensor, bound) -> torch.Tensor:
    bound = torch.as_tensor(bound, dtype=x.dtype, device=x.device)
    return _LowerBoundFn.apply(x, bound)


def gdn(
    x: torch.Tensor,
    beta: torch.Tensor,
    gamma: torch.Tensor,
    inverse: bool = False,
) -> torch.Tensor:
    """Generalized divisive normalization.

    y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2), or the multiplicative
    inverse when ``inverse`` is set. beta must be strictly positive and
    gamma non-negative.
    """
    if beta.min() <= 0:
        raise ValueError("gdn requires strictly positive beta")
    if gamma.min() < 0:
        raise ValueError("gdn requires non-negative gamma")
    c = x.shape[1]
    norm = F.conv2d(x * x, gamma.reshape(c, c, 1, 1), beta)
    norm = torch.sqrt(norm)
    return x * norm if inverse else x / norm


class GDN(nn.Module):
    """Learned GDN layer with reparameterized non-negative weights."""

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = 1e-6):
        super().__init__()
        self.inverse = inverse
        self.register_buffer(
            "_beta_bound", torch.tensor((beta_min + _PEDESTAL) ** 0.5)
        )
        self.register_buffer("_gamma_bound", torch.tensor(_PEDESTAL**0.5))
        beta0 = torch.ones(channels)
        gamma0 = 0.1 * torch.eye(channels)
        self.beta_re = nn.Parameter(torch.sqrt(beta0 + _PEDESTAL))
        self.gamma_re = nn.Parameter(torch.sqrt(gamma0 + _PEDESTAL))

    def beta(self) -> torch.Tensor:
        return lower_bound(self.beta_re, self._beta_bound) ** 2 - _PEDESTAL

    def gamma(self) -> torch.Tensor:
        return lower_bound(self.gamma_re, self._gamma_bound) ** 2 - _PEDESTAL

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gdn(x, self.beta(), self.gamma(), self.inverse)


def conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)


def conv1x1(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 1, stride=stride)


class ResidualBlock(nn.Module):
    """Two stacked 3x3 convolutions with an identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class ResidualDown(nn.Module):
    """Stride-2 downsampling stage built from stacked 3x3 convolutions."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = conv3x3(in_ch, out_ch, stride=2)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.skip = conv1x1(in_ch, out_ch, stride=2)

    def forward(self, x):
        return self.skip(x) + self.conv2(F.relu(self.conv1(x)))


class SubpixelUpsample(nn.Module):
    """3x3 convolution to r^2 times the channels followed by pixel shuffle."""

    def __init__(self, in_ch: int, out_ch: int, factor: int = 2):
        super().__init__()
        self.conv = conv3x3(in_ch, out_ch * factor * factor)
        self.shuffle = nn.PixelShuffle(factor)

    def forward(self, x):
        return self.shuffle(self.conv(x))


class ResidualUp(nn.Module):
    """Subpixel upsampling stage with a stacked-3x3 residual path."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = SubpixelUpsample(in_ch, out_ch)
        self.conv = conv3x3(out_ch, out_ch)
        self.skip = nn.Sequential(
            conv1x1(in_ch, out_ch * 4), nn.PixelShuffle(2)
        )

    def forward(self, x):
        return self.skip(x) + self.conv(F.relu(self.up(x)))
