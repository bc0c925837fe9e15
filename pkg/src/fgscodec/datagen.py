"""Deterministic synthetic image corpus for tests and demos.

Images mix low-frequency color fields, oriented sinusoid textures and soft
geometric shapes, so they are compressible but not trivial.  Everything is a
pure function of the seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def synth_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """One (H, W, 3) float32 image in [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= height
    xx /= width

    lum = np.zeros((height, width))
    for _ in range(4):
        fx, fy = rng.uniform(0.5, 4.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        lum += rng.uniform(0.1, 0.35) * np.sin(
            2.0 * np.pi * (fx * xx + fy * yy) + phase)

    for _ in range(3):
        freq = rng.uniform(6.0, 24.0)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        carrier = np.sin(
            2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        rad = rng.uniform(0.08, 0.3)
        envelope = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * rad**2))
        lum += rng.uniform(0.1, 0.3) * carrier * envelope

    for _ in range(3):
        y0, x0 = rng.uniform(0.0, 0.7, size=2)
        hgt, wid = rng.uniform(0.1, 0.4, size=2)
        soft = 1.0 / (1.0 + np.exp(-(xx - x0) * 60.0))
        soft *= 1.0 / (1.0 + np.exp((xx - x0 - wid) * 60.0))
        soft *= 1.0 / (1.0 + np.exp(-(yy - y0) * 60.0))
        soft *= 1.0 / (1.0 + np.exp((yy - y0 - hgt) * 60.0))
        lum += rng.uniform(-0.35, 0.35) * soft

    img = np.empty((height, width, 3))
    tint = rng.uniform(-0.15, 0.15, size=3)
    gain = rng.uniform(0.7, 1.0, size=3)
    for c in range(3):
        chroma = rng.uniform(0.05, 0.15) * np.sin(
            2.0 * np.pi * (rng.uniform(0.5, 2.0) * xx + rng.uniform(0.5, 2.0) * yy)
            + rng.uniform(0.0, 2.0 * np.pi))
        img[..., c] = 0.5 + gain[c] * 0.5 * lum + chroma + tint[c]
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_images(count: int, height: int = 96, width: int = 96,
                 seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synth_image(rng, height, width) for _ in range(count)]


def make_dataset(out_dir, count: int, height: int = 96, width: int = 96,
                 seed: int = 0) -> list[Path]:
    """Write PNGs to out_dir; returns the file paths."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(synth_images(count, height, width, seed)):
        path = out / f"synth_{i:04d}.png"
        Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(path)
        paths.append(path)
    return paths
