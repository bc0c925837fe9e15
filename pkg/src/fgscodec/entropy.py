"""Quantization, hyperprior transforms and conditional rate estimation.

The scalable branch's Gaussian parameters are predicted from its hyper-latent
*and* the already-decoded basic latent, never from the scalable latent itself,
so every channel prefix of the scalable latent stays decodable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from fgscodec.config import ModelConfig
from fgscodec.layers import SubpixelUpsample, conv1x1, conv3x3

SIGMA_FLOOR = 0.11
_LIKELIHOOD_BOUND = 1e-12
_LOG2 = math.log(2.0)


def quantize(x: torch.Tensor, mode: str) -> torch.Tensor:
    """Hard rounding for evaluation or its additive-noise training proxy.

    ``eval_round`` rounds to the nearest integer with ties away from zero;
    ``train_noise`` adds independent uniform noise on (-0.5, 0.5).
    """
    if not torch.isfinite(x).all():
        raise ValueError("quantize requires finite inputs")
    if mode == "eval_round":
        return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)
    if mode == "train_noise":
        u = torch.rand_like(x) - 0.5
        u = torch.where(u == -0.5, torch.zeros_like(u), u)
        return x + u
    raise ValueError(f"unknown quantization mode {mode!r}")


@dataclass
class EntropyParams:
    """Per-element Gaussian mean/scale for one latent tensor."""

    mu: torch.Tensor
    sigma: torch.Tensor
    sigma_floor: float = SIGMA_FLOOR


@dataclass
class LatentPack:
    """Quantized latents of one image, as integer arrays."""

    l_b_hat: np.ndarray  # (c1, h, w)
    l_s_hat: np.ndarray  # (c2, h, w)
    z_b_hat: np.ndarray  # (hyper, h/4, w/4)
    z_s_hat: np.ndarray  # (hyper, h/4, w/4)


def _standard_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(x * (-(2**-0.5)))


def gaussian_rate(v: torch.Tensor, params: EntropyParams) -> torch.Tensor:
    """Estimated bits per element for unit-bin Gaussian coding of v."""
    d = torch.abs(v - params.mu)
    upper = _standard_cdf((0.5 - d) / params.sigma)
    lower = _standard_cdf((-0.5 - d) / params.sigma)
    lik = torch.clamp(upper - lower, min=_LIKELIHOOD_BOUND)
    return -torch.log2(lik)


class FactorizedDensity(nn.Module):
    """Learned per-channel density: a stack of monotone scalar maps.

    The composed map is a CDF in (0, 1); unit-bin differences give the
    probability of each integer symbol.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        self._n_layers = len(dims) - 1
        scale = init_scale ** (1.0 / self._n_layers)
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for k in range(self._n_layers):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            m = torch.full((channels, dims[k + 1], dims[k]), init)
            self.matrices.append(nn.Parameter(m))
            b = torch.empty(channels, dims[k + 1], 1).uniform_(-0.5, 0.5)
            self.biases.append(nn.Parameter(b))
            if k < self._n_layers - 1:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[k + 1], 1)))

    def _logits(self, v: torch.Tensor) -> torch.Tensor:
        # v: (channels, 1, M) -> logits of the CDF, same shape
        u = v
        for k in range(self._n_layers):
            u = torch.matmul(F.softplus(self.matrices[k]), u) + self.biases[k]
            if k < self._n_layers - 1:
                u = u + torch.tanh(self.factors[k]) * torch.tanh(u)
        return u

    def cdf(self, v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self._logits(v))

    def likelihood(self, v: torch.Tensor) -> torch.Tensor:
        """P(value falls in the unit bin around v); v is (C, M) per channel."""
        v = v.unsqueeze(1)  # (C, 1, M)
        lower = self._logits(v - 0.5)
        upper = self._logits(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return lik.squeeze(1)

    def bits(self, v: torch.Tensor) -> torch.Tensor:
        """Per-element bits for a (B, C, h, w) or (C, h, w) tensor."""
        squeeze = v.dim() == 3
        if squeeze:
            v = v.unsqueeze(0)
        b, c, h, w = v.shape
        flat = v.permute(1, 0, 2, 3).reshape(c, b * h * w)
        lik = torch.clamp(self.likelihood(flat), min=_LIKELIHOOD_BOUND)
        bits = -torch.log2(lik).reshape(c, b, h, w).permute(1, 0, 2, 3)
        return bits.squeeze(0) if squeeze else bits

    @torch.no_grad()
    def bin_masses(self, lo: int, hi: int) -> np.ndarray:
        """Unit-bin masses over [lo, hi] for every channel, as float64."""
        grid = torch.arange(lo, hi + 1, dtype=torch.float32)
        v = grid.repeat(self.channels, 1)
        return self.likelihood(v).double().cpu().numpy()


class HyperEncoder(nn.Module):
    """Two stride-2 stages mapping a latent to its hyper-latent."""

    def __init__(self, in_ch: int, hyper_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            conv3x3(in_ch, hyper_ch),
            nn.ReLU(inplace=True),
            conv3x3(hyper_ch, hyper_ch, stride=2),
            nn.ReLU(inplace=True),
            conv3x3(hyper_ch, hyper_ch, stride=2),
        )

    def forward(self, x):
        return self.net(x)


class HyperDecoder(nn.Module):
    """Upsamples a hyper-latent back to latent resolution as context features."""

    def __init__(self, hyper_ch: int, ctx_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            SubpixelUpsample(hyper_ch, hyper_ch),
            nn.ReLU(inplace=True),
            SubpixelUpsample(hyper_ch, ctx_ch),
        )

    def forward(self, z):
        return self.net(z)


def _split_params(raw: torch.Tensor) -> EntropyParams:
    mu, s = raw.chunk(2, dim=1)
    return EntropyParams(mu=mu, sigma=SIGMA_FLOOR + F.softplus(s))


class EntropySystem(nn.Module):
    """Hyperpriors for both branches plus the conditional scalable-latent model."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, hc = cfg.c1, cfg.c2, cfg.hyper_channels
        ctx_b, ctx_s = 2 * c1, 2 * c2
        self.hyper_enc_b = HyperEncoder(c1, hc)
        self.hyper_enc_s = HyperEncoder(c2, hc)
        self.hyper_dec_b = HyperDecoder(hc, ctx_b)
        self.hyper_dec_s = HyperDecoder(hc, ctx_s)
        self.prior_b = FactorizedDensity(hc)
        self.prior_s = FactorizedDensity(hc)
        self.base_head = conv1x1(ctx_b, 2 * c1)
        mem_in = ctx_s + (c1 if cfg.toggles.mem_enabled else 0)
        mid = 2 * c2
        self.mem_head = nn.Sequential(
            conv1x1(mem_in, mid),
            nn.ReLU(inplace=True),
            conv1x1(mid, mid),
            nn.ReLU(inplace=True),
            conv1x1(mid, 2 * c2),
        )

    def hyper_encode(self, latent: torch.Tensor, role: str) -> torch.Tensor:
        enc = self.hyper_enc_b if role == "basic" else self.hyper_enc_s
        return enc(latent)

    def hyper_decode(self, z_hat: torch.Tensor, role: str) -> torch.Tensor:
        dec = self.hyper_dec_b if role == "basic" else self.hyper_dec_s
        return dec(z_hat)

    def prior(self, role: str) -> FactorizedDensity:
        return self.prior_b if role == "basic" else self.prior_s

    def gaussian_params_base(self, ctx_b: torch.Tensor) -> EntropyParams:
        return _split_params(self.base_head(ctx_b))

    def gaussian_params_mem(
        self, ctx_s: torch.Tensor, l_b_hat: torch.Tensor
    ) -> EntropyParams:
        if self.cfg.toggles.mem_enabled:
            if ctx_s.shape[-2:] != l_b_hat.shape[-2:]:
                raise ValueError("context and basic latent are not spatially aligned")
            ctx_s = torch.cat([ctx_s, l_b_hat], dim=1)
        return _split_params(self.mem_head(ctx_s))


@dataclass
class RateReport:
    """Estimated bits split into the mandatory part and per-channel increments."""

    bits_base: float  # basic latent + its hyper-latent
    z_s_bits: float  # scalable hyper-latent (always transmitted)
    per_channel_bits: np.ndarray  # (c2,) estimated bits of each scalable channel
    n_pixels: int

    @property
    def bits_scalable_prefix(self) -> np.ndarray:
        """Index j: bits of z_s plus the first j scalable channels."""
        return self.z_s_bits + np.concatenate(
            [[0.0], np.cumsum(self.per_channel_bits)]
        )

    def total_bits(self, j: int) -> float:
        return self.bits_base + float(self.bits_scalable_prefix[j])

    def bpp(self, j: int) -> float:
        return self.total_bits(j) / self.n_pixels


@torch.no_grad()
def rate_report(
    system: EntropySystem,
    pack: LatentPack,
    params_b: EntropyParams,
    params_s: EntropyParams,
    n_pixels: int,
) -> RateReport:
    """Estimated-rate summary for one quantized image.

    The Gaussian terms are evaluated in float64 so the per-channel split sums
    to the whole-tensor figure far below reporting tolerance.
    """
    t64 = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float64)).unsqueeze(0)
    t32 = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32)).unsqueeze(0)
    as64 = lambda p: EntropyParams(p.mu.double(), p.sigma.double(), p.sigma_floor)
    bits_lb = gaussian_rate(t64(pack.l_b_hat), as64(params_b)).sum().item()
    bits_zb = system.prior_b.bits(t32(pack.z_b_hat)).sum().item()
    bits_zs = system.prior_s.bits(t32(pack.z_s_hat)).sum().item()
    per_channel = (
        gaussian_rate(t64(pack.l_s_hat), as64(params_s))
        .sum(dim=(0, 2, 3))
        .cpu()
        .numpy()
    )
    return RateReport(
        bits_base=bits_lb + bits_zb,
        z_s_bits=bits_zs,
        per_channel_bits=per_channel,
        n_pixels=n_pixels,
    )
