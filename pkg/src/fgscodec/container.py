"""Truncatable bitstream container: header, segment table, coded segments.

Layout (all integers big-endian):
  header    magic "FGS1", version u8, flags u8 (bit0: half-channel units),
            width u16, height u16, c1 u16, c2 u16, hyper_channels u16
  table     one entry per segment: i16 symbol-min, i16 symbol-max, u32 length
  payloads  segment byte strings, in table order

Segments appear as z_b, l_b, z_s, then one per scalable unit.  Each segment is
an independently flushed range-coder run, so any cut at a segment boundary
leaves a decodable stream; a cut inside a segment wastes only that segment.
The header and table always survive truncation untouched, which lets readers
report what a truncated stream is missing.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from fgscodec.entropy import LatentPack
from fgscodec.model import ScalableCodec
from fgscodec.rangecoder import (
    CdfTableSet,
    RangeEncoder,
    build_cdf_batch,
    freqs_from_masses,
    rc_decode,
    rc_encode,
    tableset_from_freqs,
)

MAGIC = b"FGS1"
VERSION = 1
_HEADER_FMT = ">4sBBHHHHH"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)  # 16
_ENTRY_FMT = ">hhI"
ENTRY_SIZE = struct.calcsize(_ENTRY_FMT)  # 8
_MANDATORY = 3  # z_b, l_b, z_s


@dataclass(frozen=True)
class StreamHeader:
    width: int
    height: int
    c1: int
    c2: int
    hyper_channels: int
    half_channel: bool

    @property
    def n_units(self) -> int:
        return 2 * self.c2 if self.half_channel else self.c2

    @property
    def n_segments(self) -> int:
        return _MANDATORY + self.n_units


@dataclass
class SegmentInfo:
    name: str
    lo: int
    hi: int
    declared_len: int
    present_len: int
    offset: int  # into the container, where this payload starts

    @property
    def complete(self) -> bool:
        return self.present_len == self.declared_len


@dataclass
class StreamInfo:
    header: StreamHeader
    segments: list
    total_bytes: int

    @property
    def units_present(self) -> int:
        n = 0
        for seg in self.segments[_MANDATORY:]:
            if not seg.complete:
                break
            n += 1
        return n

    @property
    def bpp_increments(self) -> list:
        px = self.header.width * self.header.height
        return [8.0 * s.declared_len / px for s in self.segments[_MANDATORY:]]

    @property
    def truncation_points(self) -> list:
        """(units, byte offset) pairs available in this stream."""
        points = []
        for j in range(self.units_present + 1):
            seg = self.segments[_MANDATORY + j - 1] if j else self.segments[_MANDATORY - 1]
            points.append((j, seg.offset + seg.declared_len))
        return points

    def format(self) -> str:
        h = self.header
        lines = [
            f"container: {self.total_bytes} bytes, {h.width}x{h.height}",
            f"channels: basic {h.c1}, scalable {h.c2}, hyper {h.hyper_channels}",
            f"units: {'half-channel' if h.half_channel else 'channel'}, "
            f"{self.units_present}/{h.n_units} present",
        ]
        px = h.width * h.height
        for seg in self.segments:
            state = "" if seg.complete else (
                f" (present {seg.present_len})" if seg.present_len else " (missing)")
            lines.append(
                f"  {seg.name}: {seg.declared_len} B{state}, "
                f"symbols [{seg.lo}, {seg.hi}], {8.0 * seg.declared_len / px:.4f} bpp")
        pts = ", ".join(f"{j}@{off}" for j, off in self.truncation_points)
        lines.append(f"truncation points (units@byte): {pts}")
        return "\n".join(lines)


def _segment_names(header: StreamHeader) -> list:
    names = ["z_b", "l_b", "z_s"]
    for u in range(header.n_units):
        if header.half_channel:
            part = "first" if u % 2 == 0 else "second"
            names.append(f"unit {u} (channel {u // 2} {part} half)")
        else:
            names.append(f"unit {u} (channel {u})")
    return names


def parse_container(data: bytes) -> StreamInfo:
    """Header and segment accounting; tolerates truncated payloads only."""
    if len(data) < HEADER_SIZE:
        raise ValueError("container header truncated")
    magic, version, flags, width, height, c1, c2, hyper = struct.unpack_from(
        _HEADER_FMT, data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    header = StreamHeader(width, height, c1, c2, hyper, bool(flags & 1))
    table_end = HEADER_SIZE + ENTRY_SIZE * header.n_segments
    if len(data) < table_end:
        raise ValueError("segment table truncated")
    names = _segment_names(header)
    segments = []
    offset = table_end
    remaining = len(data) - table_end
    for i in range(header.n_segments):
        lo, hi, length = struct.unpack_from(_ENTRY_FMT, data, HEADER_SIZE + i * ENTRY_SIZE)
        if lo > hi:
            raise ValueError(f"segment {names[i]}: symbol bounds {lo} > {hi}")
        present = min(length, max(remaining, 0))
        segments.append(SegmentInfo(names[i], lo, hi, length, present, offset))
        offset += present
        remaining -= present
    if remaining > 0:
        raise ValueError(f"{remaining} trailing bytes beyond declared segments")
    return StreamInfo(header=header, segments=segments, total_bytes=len(data))


def _check_i16(values: np.ndarray, name: str) -> tuple[int, int]:
    lo, hi = int(values.min()), int(values.max())
    if lo < -(2**15) or hi >= 2**15:
        raise ValueError(f"{name} symbols [{lo}, {hi}] exceed the 16-bit table range")
    return lo, hi


def _prior_tables(prior, lo: int, hi: int) -> CdfTableSet:
    return tableset_from_freqs(lo, hi, freqs_from_masses(prior.bin_masses(lo, hi)))


def _gaussian_tables(mu: np.ndarray, sigma: np.ndarray, lo: int, hi: int) -> CdfTableSet:
    return build_cdf_batch(mu, sigma, lo, hi)


def _params_np(params) -> tuple[np.ndarray, np.ndarray]:
    mu = params.mu[0].detach().cpu().numpy().astype(np.float64)
    sigma = params.sigma[0].detach().cpu().numpy().astype(np.float64)
    return mu, sigma


def _unit_slices(values: np.ndarray, half_channel: bool) -> list:
    """Flattened symbol runs, one per scalable unit, in raster order."""
    c2, h, w = values.shape
    runs = []
    for c in range(c2):
        flat = values[c].reshape(-1)
        if half_channel:
            split = (h * w + 1) // 2
            runs.append(flat[:split])
            runs.append(flat[split:])
        else:
            runs.append(flat)
    return runs


def encode_stream(model: ScalableCodec, image: np.ndarray, half_channel: bool = False) -> bytes:
    """One forward pass, then every segment coded and framed."""
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image array")
    h, w = image.shape[:2]
    align = model.cfg.alignment
    if h % align or w % align:
        raise ValueError(f"image dims {w}x{h} not divisible by {align}")
    if int(model.train_step_count) == 0:
        warnings.warn("model has no recorded training steps; output will be poor")

    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).unsqueeze(0)
    pack, params = model.encode_latents(x)
    mu_b, sig_b = _params_np(params["l_b"])
    mu_s, sig_s = _params_np(params["l_s"])

    entries = []
    payloads = []

    def code(symbols: np.ndarray, make_tables) -> None:
        if symbols.size == 0:
            entries.append((0, 0))
            payloads.append(RangeEncoder().finish())
            return
        lo, hi = _check_i16(symbols, "segment")
        tables, idx = make_tables(lo, hi)
        entries.append((lo, hi))
        payloads.append(rc_encode(symbols.reshape(-1), tables, idx))

    hw = pack.z_b_hat.shape[1] * pack.z_b_hat.shape[2]
    prior_idx = np.repeat(np.arange(model.cfg.hyper_channels), hw)
    code(pack.z_b_hat, lambda lo, hi: (
        _prior_tables(model.entropy.prior_b, lo, hi), prior_idx))
    code(pack.l_b_hat, lambda lo, hi: (
        _gaussian_tables(mu_b.reshape(-1), sig_b.reshape(-1), lo, hi), None))
    code(pack.z_s_hat, lambda lo, hi: (
        _prior_tables(model.entropy.prior_s, lo, hi), prior_idx))

    mu_runs = _unit_slices(mu_s, half_channel)
    sig_runs = _unit_slices(sig_s, half_channel)
    for run, mu_run, sig_run in zip(
            _unit_slices(pack.l_s_hat, half_channel), mu_runs, sig_runs):
        code(run, lambda lo, hi, m=mu_run, s=sig_run: (
            _gaussian_tables(m, s, lo, hi), None))

    flags = 1 if half_channel else 0
    out = [struct.pack(_HEADER_FMT, MAGIC, VERSION, flags, w, h,
                       model.cfg.c1, model.cfg.c2, model.cfg.hyper_channels)]
    for (lo, hi), payload in zip(entries, payloads):
        out.append(struct.pack(_ENTRY_FMT, lo, hi, len(payload)))
    out.extend(payloads)
    return b"".join(out)


def _decode_segment(data: bytes, seg: SegmentInfo, tables: CdfTableSet,
                    count: int, table_idx=None) -> np.ndarray:
    payload = data[seg.offset : seg.offset + seg.present_len]
    return rc_decode(payload, tables, count, table_idx)


@torch.no_grad()
def decode_stream_latents(data: bytes, model: ScalableCodec):
    """Entropy-decode all complete segments of a stream.

    Returns (l_b, l_s, units_present, header) with integer numpy latents;
    scalable channels beyond the present units are zero.
    """
    info = parse_container(data)
    hdr = info.header
    cfg = model.cfg
    if (hdr.c1, hdr.c2, hdr.hyper_channels) != (cfg.c1, cfg.c2, cfg.hyper_channels):
        raise ValueError(
            f"stream channels ({hdr.c1}, {hdr.c2}, {hdr.hyper_channels}) do not "
            f"match the model ({cfg.c1}, {cfg.c2}, {cfg.hyper_channels})")
    lh, lw = cfg.latent_shape(hdr.height, hdr.width)
    zh, zw = lh // 4, lw // 4
    for seg in info.segments[:_MANDATORY]:
        if not seg.complete:
            raise ValueError(f"mandatory segment {seg.name} is incomplete "
                             f"({seg.present_len}/{seg.declared_len} bytes)")

    segs = info.segments
    hw_z = zh * zw
    prior_idx = np.repeat(np.arange(cfg.hyper_channels), hw_z)

    z_b = _decode_segment(
        data, segs[0], _prior_tables(model.entropy.prior_b, segs[0].lo, segs[0].hi),
        cfg.hyper_channels * hw_z, prior_idx).reshape(cfg.hyper_channels, zh, zw)
    z_b_t = torch.from_numpy(z_b.astype(np.float32)).unsqueeze(0)
    params_b = model.entropy.gaussian_params_base(
        model.entropy.hyper_decode(z_b_t, "basic"))
    mu_b, sig_b = _params_np(params_b)

    l_b = _decode_segment(
        data, segs[1],
        _gaussian_tables(mu_b.reshape(-1), sig_b.reshape(-1), segs[1].lo, segs[1].hi),
        cfg.c1 * lh * lw).reshape(cfg.c1, lh, lw)
    l_b_t = torch.from_numpy(l_b.astype(np.float32)).unsqueeze(0)

    z_s = _decode_segment(
        data, segs[2], _prior_tables(model.entropy.prior_s, segs[2].lo, segs[2].hi),
        cfg.hyper_channels * hw_z, prior_idx).reshape(cfg.hyper_channels, zh, zw)
    z_s_t = torch.from_numpy(z_s.astype(np.float32)).unsqueeze(0)
    params_s = model.entropy.gaussian_params_mem(
        model.entropy.hyper_decode(z_s_t, "scalable"), l_b_t)
    mu_s, sig_s = _params_np(params_s)

    mu_runs = _unit_slices(mu_s, hdr.half_channel)
    sig_runs = _unit_slices(sig_s, hdr.half_channel)
    present = info.units_present

    l_s = np.zeros((cfg.c2, lh, lw), dtype=np.int32)
    flat = l_s.reshape(cfg.c2, lh * lw)
    split = (lh * lw + 1) // 2
    for u in range(present):
        seg = segs[_MANDATORY + u]
        run = _decode_segment(
            data, seg, _gaussian_tables(mu_runs[u], sig_runs[u], seg.lo, seg.hi),
            len(mu_runs[u]))
        if hdr.half_channel:
            c = u // 2
            if u % 2 == 0:
                flat[c, :split] = run
            else:
                flat[c, split:] = run
        else:
            flat[u] = run
    return l_b, l_s, present, hdr


@torch.no_grad()
def latents_to_image(model: ScalableCodec, l_b: np.ndarray, l_s: np.ndarray) -> np.ndarray:
    """shared_decode on integer latents, returned as float32 (H, W, 3)."""
    l_b_t = torch.from_numpy(l_b.astype(np.float32)).unsqueeze(0)
    l_s_t = torch.from_numpy(l_s.astype(np.float32)).unsqueeze(0)
    image = model.shared_decode(l_b_t, l_s_t)[0]
    return np.ascontiguousarray(
        image.cpu().numpy().transpose(1, 2, 0).astype(np.float32))


def decode_stream(data: bytes, model: ScalableCodec, max_units=None):
    """Reconstruct from whatever scalable prefix is present.

    Returns (image as float32 (H, W, 3) in [0, 1], units actually used).
    """
    from fgscodec.model import zero_pad_channels

    l_b, l_s, present, hdr = decode_stream_latents(data, model)
    usable = present if max_units is None else min(present, max_units)
    if usable < (2 * model.cfg.c2 if hdr.half_channel else model.cfg.c2):
        l_s_t = torch.from_numpy(l_s.astype(np.float32))
        l_s = zero_pad_channels(
            l_s_t, usable, half_channel=hdr.half_channel).numpy().astype(np.int32)
    return latents_to_image(model, l_b, l_s), usable


def mandatory_prefix_size(data: bytes) -> int:
    info = parse_container(data)
    seg = info.segments[_MANDATORY - 1]
    return seg.offset + seg.declared_len


def truncate_stream(data: bytes, budget_bytes=None, target_units=None) -> bytes:
    """Prefix of the container ending at a scalable-unit boundary."""
    if (budget_bytes is None) == (target_units is None):
        raise ValueError("give exactly one of budget_bytes or target_units")
    info = parse_container(data)
    points = info.truncation_points
    if target_units is not None:
        if not 0 <= target_units <= info.header.n_units:
            raise ValueError(
                f"target_units must be in [0, {info.header.n_units}]")
        if target_units > info.units_present:
            raise ValueError(
                f"stream holds only {info.units_present} complete units")
        return data[: points[target_units][1]]
    minimum = points[0][1]
    if budget_bytes < minimum:
        raise ValueError(
            f"budget {budget_bytes} is below the mandatory prefix of {minimum} bytes")
    cut = minimum
    for _, off in points:
        if off <= budget_bytes:
            cut = off
    return data[:cut]


def inspect_stream(data: bytes) -> StreamInfo:
    return parse_container(data)
