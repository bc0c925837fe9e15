"""Rate-distortion training loop with deterministic, resumable state.

The per-step loss always pays for the basic branch twice: once with the base
reconstruction's distortion, once as the mandatory part of the sampled-prefix
rate.  A channel count j is drawn uniformly each step and only the first j
scalable channels contribute rate and refined distortion, weighted by w(j) so
later channels still receive gradient pressure.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from fgscodec.config import ModelConfig, Toggles
from fgscodec.entropy import quantize
from fgscodec.model import ScalableCodec
from fgscodec.metrics import psnr

LOG_COLUMNS = ("step", "loss", "bits_base", "bits_scalable", "psnr_base", "psnr_full")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Flat run description; round-trips through key=value text files."""

    steps: int = 5000
    batch_size: int = 16
    crop_size: int = 256
    lr: float = 1e-4
    lr_drop_step: int = 0  # 0 disables the drop
    lr_drop_factor: float = 0.1
    seed: int = 0
    log_every: int = 100
    data_dir: str = ""
    lmbda: float = 0.002
    distortion: str = "mse"
    w_schedule: str = "linear8"
    c1: int = 192
    c2: int = 192
    downsample: int = 16
    hyper_channels: int = 128
    base_width: int = 128
    frr_enabled: bool = True
    ffm_enabled: bool = True
    mem_enabled: bool = True

    def __post_init__(self) -> None:
        if self.crop_size % (self.downsample * 4):
            raise ValueError(
                f"crop_size must be divisible by {self.downsample * 4}")
        if self.lr <= 0 or self.lr_drop_factor <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.distortion not in ("mse", "ms_ssim"):
            raise ValueError(f"unknown distortion {self.distortion!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            c1=self.c1,
            c2=self.c2,
            downsample=self.downsample,
            hyper_channels=self.hyper_channels,
            base_width=self.base_width,
            toggles=Toggles(self.frr_enabled, self.ffm_enabled, self.mem_enabled),
            w_schedule=self.w_schedule,
            lmbda=self.lmbda,
        )

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls(**_parse_kv_text(Path(path).read_text(), cls))

    def to_file(self, path) -> None:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        Path(path).write_text("\n".join(lines) + "\n")


def _parse_kv_text(text: str, cls) -> dict:
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, type(defaults[key]), key)
    return out


def _coerce(value: str, typ, key: str):
    if typ is bool:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if typ is int:
        return int(value)
    if typ is float:
        return float(value)
    return value


def weight_w(j: int, schedule: str) -> float:
    """Distortion weight for training with j scalable channels kept."""
    if schedule == "linear8":
        return 1.0 + j / 8.0
    if schedule == "quad64":
        return 1.0 + (j * j) / 64.0
    raise ValueError(f"unknown schedule {schedule!r}")


def sample_channels(rng: np.random.Generator, c2: int) -> int:
    """Uniform draw over {0, 1, ..., c2} inclusive."""
    return int(rng.integers(0, c2 + 1))


def load_training_images(data_dir, min_size: int) -> list[np.ndarray]:
    """Load every image under data_dir as float32 (3, H, W) in [0, 1].

    Images smaller than min_size on either side are skipped with a warning.
    """
    from PIL import Image

    paths = sorted(
        p for p in Path(data_dir).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".ppm")
    )
    if not paths:
        raise ValueError(f"no images found in {data_dir}")
    images = []
    for p in paths:
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        if min(arr.shape[0], arr.shape[1]) < min_size:
            warnings.warn(f"skipping {p.name}: smaller than {min_size}px crop")
            continue
        images.append(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    if not images:
        raise ValueError(f"no image in {data_dir} is at least {min_size}px per side")
    return images


def ingest_crops(
    images: list[np.ndarray], crop_size: int, batch_size: int, rng: np.random.Generator
) -> torch.Tensor:
    """One training batch of random crops, stacked as (B, 3, crop, crop)."""
    batch = np.empty((batch_size, 3, crop_size, crop_size), dtype=np.float32)
    for i in range(batch_size):
        img = images[int(rng.integers(0, len(images)))]
        _, h, w = img.shape
        top = int(rng.integers(0, h - crop_size + 1))
        left = int(rng.integers(0, w - crop_size + 1))
        batch[i] = img[:, top : top + crop_size, left : left + crop_size]
    return torch.from_numpy(batch)


def rd_loss(
    x: torch.Tensor, out: dict, lmbda: float, w_schedule: str,
    distortion: str = "mse",
) -> tuple[torch.Tensor, dict]:
    """Loss for one noisy forward pass; also returns detached log values."""
    n_pix = x.shape[-2] * x.shape[-1]
    j = out["j"]
    dims = (-3, -2, -1)
    if distortion == "mse":
        d_base = ((255.0 * (x - out["x_base"])) ** 2).mean(dim=dims)
        d_j = ((255.0 * (x - out["x_hat_j"])) ** 2).mean(dim=dims)
    elif distortion == "ms_ssim":
        from fgscodec.metrics import ms_ssim_tensor

        d_base = (1.0 - ms_ssim_tensor(x, out["x_base"])).expand(x.shape[0])
        d_j = (1.0 - ms_ssim_tensor(x, out["x_hat_j"])).expand(x.shape[0])
    else:
        raise ValueError(f"unknown distortion {distortion!r}")
    r_base = (out["bits_l_b"] + out["bits_z_b"]) / n_pix
    r_prefix = (out["bits_z_s"] + out["bits_l_s_channel"][:, :j].sum(dim=1)) / n_pix
    w = weight_w(j, w_schedule)
    loss = (r_base + lmbda * d_base + r_base + r_prefix + lmbda * w * d_j).mean()
    parts = {
        "bits_base": float(r_base.detach().mean()),
        "bits_scalable": float(r_prefix.detach().mean()),
        "d_base": float(d_base.detach().mean()),
        "d_j": float(d_j.detach().mean()),
        "w": w,
    }
    return loss, parts


class Trainer:
    """Runs the loop; all randomness flows from the config seed so a run can
    be stopped, saved and resumed with bit-identical results."""

    def __init__(
        self,
        model: ScalableCodec,
        cfg: TrainConfig,
        images: Optional[list[np.ndarray]] = None,
        log_path=None,
    ):
        torch.set_num_threads(1)  # keeps reductions order-stable across runs
        self.model = model
        self.cfg = cfg
        if images is None:
            images = load_training_images(cfg.data_dir, cfg.crop_size)
        self.images = images
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        self.step = 0
        self.log_path = Path(log_path) if log_path else None
        self._log_started = self.log_path is not None and self.log_path.exists()

    def _current_lr(self) -> float:
        lr = self.cfg.lr
        if self.cfg.lr_drop_step and self.step >= self.cfg.lr_drop_step:
            lr *= self.cfg.lr_drop_factor
        return lr

    def _log_row(self, loss: float, parts: dict, batch: torch.Tensor) -> None:
        if self.log_path is None:
            return
        with torch.no_grad():
            was_training = self.model.training
            self.model.eval()
            c2 = self.model.cfg.c2
            l_b_q = quantize(self.model.basic_encode(batch), "eval_round")
            x_base_raw = self.model.decoder(
                l_b_q, l_b_q.new_zeros(batch.shape[0], c2, *l_b_q.shape[-2:]))
            x_base = x_base_raw.clamp(0.0, 1.0)
            x_s = self.model.residual_features(batch, x_base_raw)
            l_s_q = quantize(self.model.scalable_encode(x_s, l_b_q), "eval_round")
            x_full = self.model.shared_decode(l_b_q, l_s_q)
            if was_training:
                self.model.train()
        row = [
            self.step,
            f"{loss:.6f}",
            f"{parts['bits_base']:.6f}",
            f"{parts['bits_scalable']:.6f}",
            f"{psnr(batch, x_base):.4f}",
            f"{psnr(batch, x_full):.4f}",
        ]
        mode = "a" if self._log_started else "w"
        with open(self.log_path, mode, newline="") as fh:
            writer = csv.writer(fh)
            if not self._log_started:
                writer.writerow(LOG_COLUMNS)
                self._log_started = True
            writer.writerow(row)

    def train_steps(self, n_steps: int) -> float:
        """Run n_steps updates; returns the final step's loss."""
        self.model.train()
        last = float("nan")
        for _ in range(n_steps):
            lr = self._current_lr()
            for group in self.optimizer.param_groups:
                group["lr"] = lr
            j = sample_channels(self.rng, self.model.cfg.c2)
            batch = ingest_crops(
                self.images, self.cfg.crop_size, self.cfg.batch_size, self.rng)
            out = self.model.forward_train(batch, j)
            loss, parts = rd_loss(
                batch, out, self.model.cfg.lmbda, self.model.cfg.w_schedule,
                self.cfg.distortion)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at step {self.step + 1} (j={j}): {parts}")
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.step += 1
            self.model.train_step_count += 1
            last = float(loss.detach())
            if self.cfg.log_every and self.step % self.cfg.log_every == 0:
                self._log_row(last, parts, batch)
        self.model.eval()
        return last

    def run(self) -> float:
        return self.train_steps(self.cfg.steps - self.step)

    # ---- persistence ----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "optimizer": self.optimizer.state_dict(),
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.step = state["step"]
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["numpy_rng"]
        torch.set_rng_state(state["torch_rng"])

    def save(self, path) -> None:
        save_checkpoint(path, self.model, train_cfg=self.cfg,
                        trainer_state=self.state_dict())

    @classmethod
    def resume(cls, path, images: Optional[list[np.ndarray]] = None,
               log_path=None) -> "Trainer":
        model, payload = load_checkpoint(path)
        cfg = TrainConfig(**payload["train_config"])
        trainer = cls(model, cfg, images=images, log_path=log_path)
        trainer.load_state_dict(payload["trainer_state"])
        return trainer


def save_checkpoint(path, model: ScalableCodec, train_cfg: Optional[TrainConfig] = None,
                    trainer_state: Optional[dict] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
    }
    if train_cfg is not None:
        payload["train_config"] = {
            f.name: getattr(train_cfg, f.name) for f in fields(train_cfg)}
    if trainer_state is not None:
        payload["trainer_state"] = trainer_state
    torch.save(payload, path)


def load_checkpoint(path, expected: Optional[ModelConfig] = None):
    """Rebuild the model from a checkpoint; returns (model, payload).

    If ``expected`` is given, any differing architecture field is an error.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg = ModelConfig.from_dict(payload["model_config"])
    if expected is not None and expected != cfg:
        diffs = []
        for f in fields(ModelConfig):
            a, b = getattr(expected, f.name), getattr(cfg, f.name)
            if a != b:
                diffs.append(f"{f.name}: expected {a!r}, checkpoint has {b!r}")
        raise ValueError("model configuration mismatch; " + "; ".join(diffs))
    model = ScalableCodec(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
