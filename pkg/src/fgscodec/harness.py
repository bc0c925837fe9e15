"""Evaluation and reporting: RD curves, progressive/entropy reports, the
six-case ablation runner, and the bandwidth streaming simulator.

CSV files are the contract; plots are optional renderings of the same rows.
Every report here derives from the container/codec layer, so numbers reflect
what a receiver of the bitstream would actually measure.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from fgscodec.container import (
    decode_stream_latents,
    encode_stream,
    latents_to_image,
    parse_container,
)
from fgscodec.metrics import ms_ssim, psnr
from fgscodec.model import ScalableCodec, zero_pad_channels
from fgscodec.training import TrainConfig, Trainer, weight_w

GAP_PSNR = 0.0  # score recorded when a step delivers no image


def _chw(image: np.ndarray) -> np.ndarray:
    # metrics expect channel-first; harness images are (H, W, 3)
    return np.ascontiguousarray(image.transpose(2, 0, 1))


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    ms_ssim: float
    units_decoded: int


def _load_images(images) -> list[np.ndarray]:
    if isinstance(images, (str, Path)):
        from PIL import Image

        paths = sorted(
            p for p in Path(images).iterdir()
            if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".ppm"))
        if not paths:
            raise ValueError(f"no images found in {images}")
        return [
            np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
            for p in paths
        ]
    out = list(images)
    if not out:
        raise ValueError("empty image list")
    return out


def _write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _plot(path, draw) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError(
            "plot output needs matplotlib; install the 'plots' extra") from exc
    fig, ax = plt.subplots(figsize=(6, 4))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@dataclass
class _DecodedStream:
    """One image's stream, entropy-decoded once and re-truncatable in memory."""

    model: ScalableCodec
    original: np.ndarray
    data: bytes
    l_b: np.ndarray
    l_s: np.ndarray
    n_units: int
    offsets: list  # truncation byte offsets indexed by unit count
    half_channel: bool

    def image_at(self, units: int) -> np.ndarray:
        l_s_t = torch.from_numpy(self.l_s.astype(np.float32))
        l_s = zero_pad_channels(l_s_t, units, half_channel=self.half_channel)
        return latents_to_image(self.model, self.l_b, l_s.numpy())

    def bytes_at(self, units: int) -> int:
        return self.offsets[units]


def _prepare_stream(model: ScalableCodec, image: np.ndarray,
                    half_channel: bool = False) -> _DecodedStream:
    data = encode_stream(model, image, half_channel=half_channel)
    l_b, l_s, present, hdr = decode_stream_latents(data, model)
    info = parse_container(data)
    offsets = [off for _, off in info.truncation_points]
    return _DecodedStream(
        model=model, original=image, data=data, l_b=l_b, l_s=l_s,
        n_units=present, offsets=offsets, half_channel=half_channel)


def rd_curve(
    model: ScalableCodec,
    images,
    step_units: int = 8,
    half_channel: bool = False,
    csv_path=None,
    plot_path=None,
) -> list[RDPoint]:
    """Mean RD points at unit counts 0, step, 2*step, ..., n_units."""
    if step_units < 1:
        raise ValueError("step_units must be >= 1")
    imgs = _load_images(images)
    streams = [_prepare_stream(model, im, half_channel) for im in imgs]
    n_units = streams[0].n_units
    points = sorted(set(range(0, n_units + 1, step_units)) | {n_units})
    out = []
    for j in points:
        psnrs, ssims, bpps = [], [], []
        for s in streams:
            rec = s.image_at(j)
            px = s.original.shape[0] * s.original.shape[1]
            psnrs.append(psnr(_chw(s.original), _chw(rec)))
            ssims.append(ms_ssim(_chw(s.original), _chw(rec)))
            bpps.append(8.0 * s.bytes_at(j) / px)
        out.append(RDPoint(
            bpp=float(np.mean(bpps)),
            psnr=float(np.mean(psnrs)),
            ms_ssim=float(np.mean(ssims)),
            units_decoded=j,
        ))
    if csv_path:
        _write_csv(csv_path, ("units", "bpp", "psnr", "ms_ssim"),
                   [(p.units_decoded, f"{p.bpp:.6f}", f"{p.psnr:.4f}",
                     f"{p.ms_ssim:.6f}") for p in out])
    if plot_path:
        _plot(plot_path, lambda ax: (
            ax.plot([p.bpp for p in out], [p.psnr for p in out], "o-"),
            ax.set_xlabel("bpp"), ax.set_ylabel("PSNR (dB)"),
            ax.set_title("rate-distortion")))
    return out


def group_bounds(c2: int, n_groups: int) -> list[int]:
    """Channel counts after each of n_groups balanced groups; last == c2."""
    return [round((g + 1) * c2 / n_groups) for g in range(n_groups)]


def progressive_quality_report(
    model: ScalableCodec,
    image: np.ndarray,
    n_groups: int = 24,
    csv_path=None,
    plot_path=None,
) -> list[tuple[int, int, float]]:
    """(group index n, channels used, PSNR) for the first n groups, n=1..24."""
    stream = _prepare_stream(model, image)
    bounds = group_bounds(model.cfg.c2, n_groups)
    rows = []
    for n, j in enumerate(bounds, start=1):
        rows.append((n, j, psnr(_chw(image), _chw(stream.image_at(j)))))
    if csv_path:
        _write_csv(csv_path, ("groups", "channels", "psnr"),
                   [(n, j, f"{p:.4f}") for n, j, p in rows])
    if plot_path:
        _plot(plot_path, lambda ax: (
            ax.plot([r[0] for r in rows], [r[2] for r in rows], "o-"),
            ax.set_xlabel("groups decoded"), ax.set_ylabel("PSNR (dB)"),
            ax.set_title("progressive quality")))
    return rows


def channel_entropy_report(
    model: ScalableCodec,
    image: np.ndarray,
    n_groups: int = 24,
    csv_path=None,
    plot_path=None,
):
    """Estimated bits of each scalable channel, aggregated into groups.

    Returns (per_channel_bits, per_group_bits).
    """
    x = torch.from_numpy(
        np.ascontiguousarray(image.transpose(2, 0, 1))).unsqueeze(0)
    pack, _ = model.encode_latents(x)
    report = model.rate_report(pack, image.shape[0] * image.shape[1])
    per_channel = report.per_channel_bits
    bounds = [0] + group_bounds(model.cfg.c2, n_groups)
    per_group = np.array([
        per_channel[bounds[g] : bounds[g + 1]].sum() for g in range(n_groups)])
    if csv_path:
        _write_csv(
            csv_path, ("group", "first_channel", "last_channel", "bits"),
            [(g + 1, bounds[g], bounds[g + 1] - 1, f"{per_group[g]:.4f}")
             for g in range(n_groups)])
    if plot_path:
        _plot(plot_path, lambda ax: (
            ax.bar(range(1, n_groups + 1), per_group),
            ax.set_xlabel("channel group"), ax.set_ylabel("estimated bits"),
            ax.set_title("per-group entropy")))
    return per_channel, per_group


ABLATION_CASES = (
    ("case1", True, True, True),
    ("case2", True, True, False),
    ("case3", True, False, True),
    ("case4", False, True, False),
    ("case5", False, False, True),
    ("case6", False, False, False),
)


@torch.no_grad()
def heldout_loss(model: ScalableCodec, images: list[np.ndarray]) -> dict:
    """Deterministic objective on held-out images at the full channel count.

    Uses eval rounding and j = c2, so the number is comparable across runs of
    identical budget; returns the mean loss plus rate/quality components.
    """
    cfg = model.cfg
    losses, bpps, psnr_full, psnr_base = [], [], [], []
    for image in images:
        x = torch.from_numpy(
            np.ascontiguousarray(image.transpose(2, 0, 1))).unsqueeze(0)
        pack, _ = model.encode_latents(x)
        n_px = image.shape[0] * image.shape[1]
        report = model.rate_report(pack, n_px)
        rec_full = model.reconstruct(pack)
        rec_base = model.reconstruct(pack, units=0)
        d_full = float(((255.0 * (x - rec_full)) ** 2).mean())
        d_base = float(((255.0 * (x - rec_base)) ** 2).mean())
        r_b = report.bits_base / n_px
        r_s = float(report.bits_scalable_prefix[cfg.c2]) / n_px
        w = weight_w(cfg.c2, cfg.w_schedule)
        losses.append(r_b + cfg.lmbda * d_base + r_b + r_s + cfg.lmbda * w * d_full)
        bpps.append(r_b + r_s)
        psnr_full.append(psnr(x, rec_full))
        psnr_base.append(psnr(x, rec_base))
    return {
        "loss": float(np.mean(losses)),
        "bpp_full": float(np.mean(bpps)),
        "psnr_full": float(np.mean(psnr_full)),
        "psnr_base": float(np.mean(psnr_base)),
    }


def ablation_run(
    train_cfg: TrainConfig,
    train_images: list[np.ndarray],
    heldout_images: list[np.ndarray],
    cases=ABLATION_CASES,
    csv_path=None,
) -> list[dict]:
    """Train one model per toggle case under identical budgets; report each."""
    rows = []
    for name, frr, ffm, mem in cases:
        cfg = replace(train_cfg, frr_enabled=frr, ffm_enabled=ffm, mem_enabled=mem)
        model = ScalableCodec(cfg.model_config())
        trainer = Trainer(model, cfg, images=train_images)
        trainer.run()
        stats = heldout_loss(model, heldout_images)
        rows.append({"case": name, "frr": frr, "ffm": ffm, "mem": mem, **stats})
    if csv_path:
        _write_csv(
            csv_path,
            ("case", "frr", "ffm", "mem", "loss", "bpp_full", "psnr_full",
             "psnr_base"),
            [(r["case"], int(r["frr"]), int(r["ffm"]), int(r["mem"]),
              f"{r['loss']:.6f}", f"{r['bpp_full']:.6f}",
              f"{r['psnr_full']:.4f}", f"{r['psnr_base']:.4f}") for r in rows])
    return rows


def coarse_points(n_units: int, n_layers: int = 4) -> list[int]:
    """The fixed truncation points a few-layer codec would offer."""
    return sorted({round(i * n_units / (n_layers - 1)) for i in range(n_layers)})


@dataclass
class SimulationStep:
    step: int
    budget: int
    mode: str
    bytes_sent: int
    units: int
    delivered: bool
    psnr: float


@dataclass
class SimulationReport:
    rows: list

    def mean_psnr(self, mode: str) -> float:
        vals = [r.psnr if r.delivered else GAP_PSNR
                for r in self.rows if r.mode == mode]
        return float(np.mean(vals))

    def mode_rows(self, mode: str) -> list:
        return [r for r in self.rows if r.mode == mode]


def bandwidth_simulate(
    model: ScalableCodec,
    images,
    trace: Sequence[int],
    modes: Sequence[str] = ("fine", "coarse", "nonscalable"),
    n_coarse_layers: int = 4,
    csv_path=None,
) -> SimulationReport:
    """Stream under a byte-budget trace in each delivery mode.

    fine sends the largest decodable prefix within budget; coarse may only
    use n_coarse_layers fixed truncation points of the same stream;
    nonscalable sends the full stream or nothing.  Undeliverable steps score
    GAP_PSNR.
    """
    imgs = _load_images(images)
    streams = [_prepare_stream(model, im) for im in imgs]
    quality = {}

    def psnr_at(idx: int, units: int) -> float:
        if (idx, units) not in quality:
            s = streams[idx]
            quality[(idx, units)] = psnr(_chw(s.original), _chw(s.image_at(units)))
        return quality[(idx, units)]

    rows = []
    for t, budget in enumerate(trace):
        if budget < 0:
            raise ValueError("budgets must be >= 0")
        idx = t % len(streams)
        s = streams[idx]
        candidates = {
            "fine": list(range(s.n_units + 1)),
            "coarse": coarse_points(s.n_units, n_coarse_layers),
            "nonscalable": [s.n_units],
        }
        for mode in modes:
            if mode not in candidates:
                raise ValueError(f"unknown mode {mode!r}")
            feasible = [u for u in candidates[mode] if s.bytes_at(u) <= budget]
            if feasible:
                u = max(feasible)
                rows.append(SimulationStep(
                    step=t, budget=int(budget), mode=mode,
                    bytes_sent=s.bytes_at(u), units=u, delivered=True,
                    psnr=psnr_at(idx, u)))
            else:
                rows.append(SimulationStep(
                    step=t, budget=int(budget), mode=mode, bytes_sent=0,
                    units=0, delivered=False, psnr=GAP_PSNR))
    report = SimulationReport(rows=rows)
    if csv_path:
        _write_csv(
            csv_path,
            ("step", "budget", "mode", "bytes_sent", "units", "delivered",
             "psnr"),
            [(r.step, r.budget, r.mode, r.bytes_sent, r.units,
              int(r.delivered), f"{r.psnr:.4f}") for r in rows])
    return report


def load_trace(path) -> list[int]:
    """One byte budget per line; blank lines and # comments ignored."""
    budgets = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            budgets.append(int(line))
    return budgets
