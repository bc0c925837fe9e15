"""Two-branch scalable image codec: basic latent plus a residual scalable latent.

The basic branch carries a coarse reconstruction on its own.  The scalable
branch encodes what the basic reconstruction missed; any channel prefix of it
refines the picture, and absent channels are treated as zeros everywhere.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from fgscodec.config import ModelConfig
from fgscodec.entropy import (
    EntropyParams,
    EntropySystem,
    LatentPack,
    RateReport,
    gaussian_rate,
    quantize,
    rate_report,
)
from fgscodec.layers import (
    GDN,
    ResidualBlock,
    ResidualDown,
    ResidualUp,
    SubpixelUpsample,
    conv1x1,
    conv3x3,
)


def zero_pad_channels(l_s: torch.Tensor, units: int, half_channel: bool = False) -> torch.Tensor:
    """Keep the first ``units`` scalable units of l_s and zero the rest.

    A unit is one channel, or half a channel when ``half_channel`` is set; the
    kept half of a split channel is the first ceil(h*w/2) positions in raster
    order.  Returns a new tensor; the input is never modified.
    """
    c2 = l_s.shape[-3]
    n_units = 2 * c2 if half_channel else c2
    if not 0 <= units <= n_units:
        raise ValueError(f"units must be in [0, {n_units}], got {units}")
    out = torch.zeros_like(l_s)
    whole = units // 2 if half_channel else units
    if whole:
        out[..., :whole, :, :] = l_s[..., :whole, :, :]
    if half_channel and units % 2:
        h, w = l_s.shape[-2:]
        keep = (h * w + 1) // 2
        flat = l_s[..., whole, :, :].reshape(*l_s.shape[:-3], h * w)
        mask = torch.zeros(h * w, dtype=l_s.dtype, device=l_s.device)
        mask[:keep] = 1
        out[..., whole, :, :] = (flat * mask).reshape(*l_s.shape[:-3], h, w)
    return out


class AnalysisTransform(nn.Module):
    """Stack of stride-2 residual stages with GDN between them."""

    def __init__(self, in_ch: int, out_ch: int, width: int, stages: int):
        super().__init__()
        layers: list[nn.Module] = []
        ch = in_ch
        for i in range(stages):
            last = i == stages - 1
            nxt = out_ch if last else width
            layers.append(ResidualDown(ch, nxt))
            if not last:
                layers.append(GDN(nxt))
            ch = nxt
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ChannelSpatialGate(nn.Module):
    """Sigmoid gates computed from another tensor's statistics.

    The channel gate pools the conditioning tensor globally and maps it through
    a two-layer MLP to one gate per output channel; the spatial gate maps the
    per-position channel mean through two 3x3 convs to one gate per position.
    """

    def __init__(self, stat_ch: int, gate_ch: int, hidden: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(stat_ch, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, gate_ch),
        )
        self.spatial = nn.Sequential(
            conv3x3(1, hidden),
            nn.ReLU(inplace=True),
            conv3x3(hidden, 1),
        )

    def gates(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pooled = cond.mean(dim=(-2, -1))
        ch_gate = torch.sigmoid(self.mlp(pooled))[..., :, None, None]
        sp_gate = torch.sigmoid(self.spatial(cond.mean(dim=-3, keepdim=True)))
        return ch_gate, sp_gate

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        ch_gate, sp_gate = self.gates(cond)
        return x * ch_gate * sp_gate


class SharedDecoder(nn.Module):
    """Single decoder for every quality level.

    Input is the basic latent concatenated with the (possibly zero-padded)
    scalable latent.  A gate block at the head re-weights the concatenation
    using the scalable part's statistics before the upsampling trunk.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.c1 + cfg.c2
        self.fuse_gate = ChannelSpatialGate(cfg.c2, c, cfg.base_width)
        layers: list[nn.Module] = [ResidualBlock(c)]
        ch = c
        for _ in range(cfg.stages - 1):
            layers.append(ResidualUp(ch, cfg.base_width))
            layers.append(GDN(cfg.base_width, inverse=True))
            ch = cfg.base_width
        layers.append(SubpixelUpsample(ch, 3))
        self.trunk = nn.Sequential(*layers)

    def forward(self, l_b: torch.Tensor, l_s: torch.Tensor) -> torch.Tensor:
        fused = torch.cat([l_b, l_s], dim=-3)
        if self.cfg.toggles.ffm_enabled:
            fused = self.fuse_gate(fused, l_s)
        return self.trunk(fused)


class ScalableCodec(nn.Module):
    """Full model: encoders, gating, entropy system and the shared decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.basic_encoder = AnalysisTransform(3, cfg.c1, cfg.base_width, cfg.stages)
        self.residual_squeeze = conv3x3(6, 3)
        self.scalable_encoder = AnalysisTransform(3, cfg.c2, cfg.base_width, cfg.stages)
        self.redundancy_gate = ChannelSpatialGate(cfg.c1, cfg.c2, cfg.base_width)
        self.decoder = SharedDecoder(cfg)
        self.entropy = EntropySystem(cfg)
        # survives checkpoints; lets downstream tools warn on untrained weights
        self.register_buffer("train_step_count", torch.zeros((), dtype=torch.long))

    # ---- encoding-side pieces -------------------------------------------

    def basic_encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.basic_encoder(x)

    def residual_features(self, x: torch.Tensor, x_hat_base: torch.Tensor) -> torch.Tensor:
        if x.shape != x_hat_base.shape:
            raise ValueError("image and base reconstruction shapes differ")
        return self.residual_squeeze(torch.cat([x, x_hat_base], dim=-3))

    def scalable_encode(self, x_s: torch.Tensor, l_b_hat: torch.Tensor) -> torch.Tensor:
        l_s = self.scalable_encoder(x_s)
        if self.cfg.toggles.frr_enabled:
            l_s = self.redundancy_gate(l_s, l_b_hat)
        return l_s

    # ---- decoding -------------------------------------------------------

    def shared_decode(
        self, l_b_hat: torch.Tensor, l_s_hat: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Reconstruction in [0, 1]; a missing scalable latent means all zeros."""
        if l_s_hat is None:
            shape = list(l_b_hat.shape)
            shape[-3] = self.cfg.c2
            l_s_hat = torch.zeros(shape, dtype=l_b_hat.dtype, device=l_b_hat.device)
        return self.decoder(l_b_hat, l_s_hat).clamp(0.0, 1.0)

    # ---- training forward -----------------------------------------------

    def forward_train(self, x: torch.Tensor, j: int) -> dict:
        """One noisy-quantization pass; j is the sampled scalable channel count."""
        cfg = self.cfg
        if not 0 <= j <= cfg.c2:
            raise ValueError(f"j must be in [0, {cfg.c2}]")
        l_b = self.basic_encode(x)
        l_b_q = quantize(l_b, "train_noise")
        x_base = self.decoder(
            l_b_q, l_b_q.new_zeros(l_b_q.shape[0], cfg.c2, *l_b_q.shape[-2:]))
        x_s = self.residual_features(x, x_base)
        l_s = self.scalable_encode(x_s, l_b_q)
        l_s_q = quantize(l_s, "train_noise")

        z_b = self.entropy.hyper_encode(l_b, "basic")
        z_b_q = quantize(z_b, "train_noise")
        params_b = self.entropy.gaussian_params_base(
            self.entropy.hyper_decode(z_b_q, "basic"))
        z_s = self.entropy.hyper_encode(l_s, "scalable")
        z_s_q = quantize(z_s, "train_noise")
        params_s = self.entropy.gaussian_params_mem(
            self.entropy.hyper_decode(z_s_q, "scalable"), l_b_q)

        x_hat_j = self.decoder(l_b_q, zero_pad_channels(l_s_q, j))

        dims = (-3, -2, -1)
        return {
            "x_base": x_base,
            "x_hat_j": x_hat_j,
            "bits_l_b": gaussian_rate(l_b_q, params_b).sum(dim=dims),
            "bits_z_b": self.entropy.prior_b.bits(z_b_q).sum(dim=dims),
            "bits_z_s": self.entropy.prior_s.bits(z_s_q).sum(dim=dims),
            "bits_l_s_channel": gaussian_rate(l_s_q, params_s).sum(dim=(-2, -1)),
            "j": j,
        }

    # ---- evaluation helpers ---------------------------------------------

    @torch.no_grad()
    def encode_latents(self, x: torch.Tensor) -> tuple[LatentPack, dict]:
        """Deterministic quantized latents and their coding distributions."""
        if x.dim() != 4 or x.shape[0] != 1:
            raise ValueError("expected a single image as a (1, 3, H, W) tensor")
        l_b = self.basic_encode(x)
        l_b_q = quantize(l_b, "eval_round")
        x_base = self.decoder(
            l_b_q, l_b_q.new_zeros(1, self.cfg.c2, *l_b_q.shape[-2:]))
        x_s = self.residual_features(x, x_base)
        l_s = self.scalable_encode(x_s, l_b_q)
        l_s_q = quantize(l_s, "eval_round")

        z_b_q = quantize(self.entropy.hyper_encode(l_b, "basic"), "eval_round")
        z_s_q = quantize(self.entropy.hyper_encode(l_s, "scalable"), "eval_round")
        pack = LatentPack(
            l_b_hat=l_b_q[0].cpu().numpy().astype(np.int32),
            l_s_hat=l_s_q[0].cpu().numpy().astype(np.int32),
            z_b_hat=z_b_q[0].cpu().numpy().astype(np.int32),
            z_s_hat=z_s_q[0].cpu().numpy().astype(np.int32),
        )
        return pack, self.params_for_pack(pack)

    @torch.no_grad()
    def params_for_pack(self, pack: LatentPack) -> dict:
        """Coding distributions recomputed from the quantized hyper-latents only."""
        z_b_q = torch.from_numpy(pack.z_b_hat.astype(np.float32)).unsqueeze(0)
        z_s_q = torch.from_numpy(pack.z_s_hat.astype(np.float32)).unsqueeze(0)
        l_b_q = torch.from_numpy(pack.l_b_hat.astype(np.float32)).unsqueeze(0)
        params_b = self.entropy.gaussian_params_base(
            self.entropy.hyper_decode(z_b_q, "basic"))
        params_s = self.entropy.gaussian_params_mem(
            self.entropy.hyper_decode(z_s_q, "scalable"), l_b_q)
        return {"l_b": params_b, "l_s": params_s}

    @torch.no_grad()
    def reconstruct(
        self,
        pack: LatentPack,
        units: Optional[int] = None,
        half_channel: bool = False,
    ) -> torch.Tensor:
        """Image in [0, 1] from a latent pack, truncated to ``units`` if given."""
        l_b = torch.from_numpy(pack.l_b_hat.astype(np.float32)).unsqueeze(0)
        l_s = torch.from_numpy(pack.l_s_hat.astype(np.float32)).unsqueeze(0)
        if units is not None:
            l_s = zero_pad_channels(l_s, units, half_channel=half_channel)
        return self.shared_decode(l_b, l_s)

    @torch.no_grad()
    def rate_report(self, pack: LatentPack, n_pixels: int) -> RateReport:
        params = self.params_for_pack(pack)
        return rate_report(self.entropy, pack, params["l_b"], params["l_s"], n_pixels)
