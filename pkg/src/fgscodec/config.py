"""Architecture configuration shared by the model, entropy system and codec."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

_W_SCHEDULES = ("linear8", "quad64")


@dataclass(frozen=True)
class Toggles:
    """Module switches for ablation: redundancy gate, fusion gate, mutual prior."""

    frr_enabled: bool = True
    ffm_enabled: bool = True
    mem_enabled: bool = True


@dataclass(frozen=True)
class ModelConfig:
    c1: int = 192  # basic latent channels
    c2: int = 192  # scalable latent channels
    downsample: int = 16
    hyper_channels: int = 128
    base_width: int = 128
    toggles: Toggles = field(default_factory=Toggles)
    w_schedule: str = "linear8"
    lmbda: float = 0.002

    def __post_init__(self) -> None:
        if self.c1 < 1 or self.c2 < 1:
            raise ValueError("c1 and c2 must both be >= 1")
        if self.downsample not in (4, 8, 16):
            raise ValueError("downsample must be one of 4, 8, 16")
        if self.hyper_channels < 1:
            raise ValueError("hyper_channels must be >= 1")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if self.w_schedule not in _W_SCHEDULES:
            raise ValueError(f"unknown w_schedule {self.w_schedule!r}")
        if not self.lmbda > 0:
            raise ValueError("lambda must be positive")

    @property
    def stages(self) -> int:
        return self.downsample.bit_length() - 1

    @property
    def alignment(self) -> int:
        """Required image-side divisor: main stride times the two hyper strides."""
        return self.downsample * 4

    def latent_shape(self, height: int, width: int) -> tuple[int, int]:
        if height % self.alignment or width % self.alignment:
            raise ValueError(
                f"image dims {height}x{width} not divisible by {self.alignment}"
            )
        return height // self.downsample, width // self.downsample

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        tog = d.pop("toggles", {})
        if not isinstance(tog, Toggles):
            tog = Toggles(**tog)
        return cls(toggles=tog, **d)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Small CPU-trainable instance exercising every code path."""
        base = dict(
            c1=32,
            c2=32,
            downsample=8,
            hyper_channels=16,
            base_width=32,
            lmbda=0.002,
        )
        base.update(overrides)
        return cls(**base)
