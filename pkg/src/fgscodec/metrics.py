"""Image quality metrics on [0, 1]-ranged arrays or tensors."""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 100.0
_MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN_SIZE = 11
_WIN_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _as_batched_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    t = t.to(torch.float64)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise ValueError("expected an image shaped (H, W), (C, H, W) or (B, C, H, W)")
    return t


def mse_255(a, b) -> float:
    """Mean squared error on the 0..255 scale for [0, 1]-ranged inputs."""
    ta, tb = _as_batched_tensor(a), _as_batched_tensor(b)
    if ta.shape != tb.shape:
        raise ValueError("image shapes differ")
    return float(torch.mean((255.0 * (ta - tb)) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical inputs."""
    err = mse_255(a, b)
    if err <= 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(255.0**2 / err), PSNR_CAP)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=torch.float64) - half
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # separable valid-mode Gaussian, one pass per axis
    c = x.shape[1]
    kh = win.reshape(1, 1, 1, -1).expand(c, 1, 1, -1)
    kv = win.reshape(1, 1, -1, 1).expand(c, 1, -1, 1)
    return F.conv2d(F.conv2d(x, kh, groups=c), kv, groups=c)


def _ssim_and_cs(a: torch.Tensor, b: torch.Tensor, win: torch.Tensor,
                 data_range: float) -> tuple[torch.Tensor, torch.Tensor]:
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    var_a = _blur(a * a, win) - mu_a * mu_a
    var_b = _blur(b * b, win) - mu_b * mu_b
    cov = _blur(a * b, win) - mu_a * mu_b
    cs_map = (2.0 * cov + c2) / (var_a + var_b + c2)
    ssim_map = ((2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)) * cs_map
    return ssim_map.mean(), cs_map.mean()


def ms_ssim(a, b, data_range: float = 1.0) -> float:
    """Multi-scale SSIM with the standard five scale weights.

    Images too small for five dyadic scales are scored over as many scales as
    fit (weights renormalized), with a warning.
    """
    ta, tb = _as_batched_tensor(a), _as_batched_tensor(b)
    return float(ms_ssim_tensor(ta, tb, data_range))


def ms_ssim_tensor(ta: torch.Tensor, tb: torch.Tensor,
                   data_range: float = 1.0) -> torch.Tensor:
    """Differentiable MS-SSIM on (B, C, H, W) tensors; see ms_ssim."""
    if ta.shape != tb.shape:
        raise ValueError("image shapes differ")
    min_side = min(ta.shape[-2], ta.shape[-1])
    levels = len(_MS_SSIM_WEIGHTS)
    while levels > 1 and (_WIN_SIZE - 1) * 2 ** (levels - 1) + 1 > min_side:
        levels -= 1
    if (_WIN_SIZE - 1) * 2 ** (levels - 1) + 1 > min_side:
        raise ValueError(f"images of min side {min_side} are too small to score")
    if levels < len(_MS_SSIM_WEIGHTS):
        warnings.warn(
            f"image min side {min_side} supports only {levels} of "
            f"{len(_MS_SSIM_WEIGHTS)} scales; weights renormalized",
            stacklevel=2,
        )
    weights = torch.tensor(_MS_SSIM_WEIGHTS[:levels], dtype=ta.dtype)
    weights = weights / weights.sum()
    win = _gaussian_window(_WIN_SIZE, _WIN_SIGMA).to(ta.dtype)

    vals = []
    for lvl in range(levels):
        ssim_mean, cs_mean = _ssim_and_cs(ta, tb, win, data_range)
        vals.append(ssim_mean if lvl == levels - 1 else cs_mean)
        if lvl < levels - 1:
            pad = (ta.shape[-2] % 2, ta.shape[-1] % 2)
            ta = F.avg_pool2d(ta, kernel_size=2, padding=pad)
            tb = F.avg_pool2d(tb, kernel_size=2, padding=pad)
    stack = torch.clamp(torch.stack(vals), min=0.0)
    return torch.prod(stack**weights)
