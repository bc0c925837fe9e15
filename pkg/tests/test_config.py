"""Configuration dataclass validation and round-trips."""

import dataclasses

import pytest

from fgscodec.config import ModelConfig, Toggles


def test_defaults_are_valid():
    cfg = ModelConfig()
    assert cfg.c1 == 192
    assert cfg.c2 == 192
    assert cfg.downsample == 16
    assert cfg.hyper_channels == 128
    assert cfg.toggles == Toggles(True, True, True)
    assert cfg.w_schedule == "linear8"
    assert cfg.lmbda == pytest.approx(0.002)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"c1": 0},
        {"c2": -3},
        {"downsample": 7},
        {"downsample": 32},
        {"hyper_channels": 0},
        {"base_width": 0},
        {"w_schedule": "cubic"},
        {"lmbda": 0.0},
        {"lmbda": -1.0},
    ],
)
def test_invalid_values_rejected(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


@pytest.mark.parametrize("downsample,stages", [(4, 2), (8, 3), (16, 4)])
def test_stage_count_matches_stride(downsample, stages):
    assert ModelConfig(downsample=downsample).stages == stages


def test_alignment_is_stride_times_hyper_strides():
    assert ModelConfig(downsample=16).alignment == 64
    assert ModelConfig(downsample=8).alignment == 32


def test_latent_shape():
    cfg = ModelConfig(downsample=16)
    assert cfg.latent_shape(768, 512) == (48, 32)
    with pytest.raises(ValueError, match="divisible"):
        cfg.latent_shape(768, 500)
    # divisible by the stride but not by the hyper path's extra factor of 4
    with pytest.raises(ValueError):
        cfg.latent_shape(48, 48)


def test_dict_round_trip():
    cfg = ModelConfig(
        c1=8, c2=24, downsample=8, toggles=Toggles(True, False, True),
        w_schedule="quad64", lmbda=0.01)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert isinstance(again.toggles, Toggles)


def test_from_dict_accepts_toggles_instance():
    cfg = ModelConfig.from_dict({"c1": 8, "toggles": Toggles(False, False, False)})
    assert cfg.c1 == 8
    assert cfg.toggles.frr_enabled is False


def test_toy_config():
    cfg = ModelConfig.toy()
    assert (cfg.c1, cfg.c2) == (32, 32)
    assert cfg.downsample == 8
    assert cfg.alignment == 32
    assert cfg.latent_shape(96, 96) == (12, 12)
    small = ModelConfig.toy(c2=16)
    assert small.c2 == 16 and small.c1 == 32


def test_config_is_frozen():
    cfg = ModelConfig()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.c1 = 5
