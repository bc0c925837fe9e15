"""Quantization, rate estimation and the conditional parameter heads."""

import math

import numpy as np
import pytest
import torch

from fgscodec.config import ModelConfig, Toggles
from fgscodec.entropy import (
    SIGMA_FLOOR,
    EntropyParams,
    EntropySystem,
    FactorizedDensity,
    LatentPack,
    gaussian_rate,
    quantize,
    rate_report,
)
from fgscodec.model import ScalableCodec

# unit-bin mass of N(0,1) around 0, frozen from an independent high-precision
# computation of Phi(0.5) - Phi(-0.5)
CENTRAL_MASS = 0.3829249225480261
# same for the bin at v=5: Phi(-4.5) - Phi(-5.5)
TAIL5_MASS = 3.378683562264173e-06


def test_eval_round_examples():
    x = torch.tensor([-2.5, -1.5, -0.5, -0.49, 0.0, 0.49, 0.5, 1.5, 2.49])
    out = quantize(x, "eval_round")
    assert torch.equal(out, torch.tensor([-3.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 2.0]))


def test_eval_round_idempotent():
    x = torch.randn(1000) * 5
    once = quantize(x, "eval_round")
    assert torch.equal(quantize(once, "eval_round"), once)


def test_train_noise_support_is_open():
    torch.manual_seed(0)
    x = torch.zeros(200_000)
    d = quantize(x, "train_noise") - x
    assert d.min() > -0.5
    assert d.max() < 0.5
    assert abs(d.mean().item()) < 3 * (1 / math.sqrt(12 * d.numel()))


def test_quantize_rejects_nonfinite_and_unknown_mode():
    with pytest.raises(ValueError, match="finite"):
        quantize(torch.tensor([float("nan")]), "eval_round")
    with pytest.raises(ValueError, match="mode"):
        quantize(torch.zeros(3), "midtread")


def test_gaussian_rate_spot_values():
    p = EntropyParams(mu=torch.zeros(3), sigma=torch.ones(3))
    bits = gaussian_rate(torch.tensor([0.0, 5.0, -5.0]), p)
    assert bits[0].item() == pytest.approx(-math.log2(CENTRAL_MASS), abs=1e-6)
    assert bits[0].item() == pytest.approx(1.3849, abs=1e-3)
    assert bits[1].item() == pytest.approx(-math.log2(TAIL5_MASS), rel=1e-5)
    assert bits[2].item() == pytest.approx(bits[1].item(), rel=1e-6)

    # at the scale floor nearly all mass sits in the central bin
    p_floor = EntropyParams(mu=torch.zeros(1), sigma=torch.full((1,), SIGMA_FLOOR))
    tight = gaussian_rate(torch.zeros(1, dtype=torch.float64), p_floor)
    assert 0 < tight.item() < 1e-5


def test_gaussian_rate_matches_numeric_integration():
    integrate = pytest.importorskip("scipy.integrate")
    rng = np.random.default_rng(3)
    for _ in range(10):
        mu = float(rng.uniform(-3, 3))
        sigma = float(rng.uniform(0.11, 3.0))
        v = float(rng.integers(-6, 7))
        mass, _ = integrate.quad(
            lambda t: math.exp(-0.5 * ((t - mu) / sigma) ** 2)
            / (sigma * math.sqrt(2 * math.pi)),
            v - 0.5,
            v + 0.5,
            epsabs=1e-14,
        )
        p = EntropyParams(
            mu=torch.tensor([mu], dtype=torch.float64),
            sigma=torch.tensor([sigma], dtype=torch.float64),
        )
        got = gaussian_rate(torch.tensor([float(v)], dtype=torch.float64), p).item()
        assert got == pytest.approx(-math.log2(max(mass, 1e-12)), rel=1e-6)


def test_gaussian_rate_is_symmetric_and_bounded():
    p = EntropyParams(mu=torch.zeros(1), sigma=torch.ones(1))
    far = gaussian_rate(torch.tensor([40.0]), p).item()
    # likelihood clamp keeps the rate finite even deep in the tail
    assert far == pytest.approx(-math.log2(1e-12), rel=1e-6)


def test_factorized_density_masses_behave_like_a_distribution():
    torch.manual_seed(0)
    fd = FactorizedDensity(8)
    wide = fd.bin_masses(-200, 200)
    assert wide.shape == (8, 401)
    assert (wide >= 0).all()
    assert np.abs(wide.sum(axis=1) - 1.0).max() < 1e-6
    core = fd.bin_masses(-30, 30)
    assert (core.sum(axis=1) > 0.5).all()


def test_factorized_density_cdf_monotone():
    torch.manual_seed(1)
    fd = FactorizedDensity(4)
    grid = torch.linspace(-60, 60, 241).repeat(4, 1).unsqueeze(1)
    cdf = fd.cdf(grid)
    assert (cdf.diff(dim=-1) >= 0).all()
    assert (cdf > 0).all() and (cdf < 1).all()


def test_factorized_density_bits_match_likelihood():
    torch.manual_seed(2)
    fd = FactorizedDensity(5)
    v = torch.randn(2, 5, 3, 4) * 10
    bits = fd.bits(v)
    assert bits.shape == v.shape
    flat = v.permute(1, 0, 2, 3).reshape(5, -1)
    manual = -torch.log2(torch.clamp(fd.likelihood(flat), min=1e-12))
    manual = manual.reshape(5, 2, 3, 4).permute(1, 0, 2, 3)
    assert torch.allclose(bits, manual)
    # unbatched input round-trips through the same path
    assert torch.allclose(fd.bits(v[0]), bits[0])


def test_factorized_density_gradients():
    torch.manual_seed(3)
    fd = FactorizedDensity(2).double()
    v = torch.randn(2, 6, dtype=torch.float64, requires_grad=True) * 3
    assert torch.autograd.gradcheck(
        lambda t: fd.likelihood(t).sum(), (v,), eps=1e-6, atol=1e-5)


def _toy_system(mem=True):
    cfg = ModelConfig.toy(toggles=Toggles(True, True, mem))
    torch.manual_seed(0)
    return cfg, EntropySystem(cfg)


def test_entropy_system_shapes_and_sigma_floor():
    cfg, sys_ = _toy_system()
    lat = torch.randn(1, cfg.c1, 12, 12)
    z = sys_.hyper_encode(lat, "basic")
    assert z.shape == (1, cfg.hyper_channels, 3, 3)
    ctx = sys_.hyper_decode(z, "basic")
    assert ctx.shape == (1, 2 * cfg.c1, 12, 12)
    p = sys_.gaussian_params_base(ctx)
    assert p.mu.shape == (1, cfg.c1, 12, 12)
    assert p.sigma.shape == (1, cfg.c1, 12, 12)
    assert p.sigma.min().item() >= SIGMA_FLOOR

    ctx_s = sys_.hyper_decode(torch.randn(1, cfg.hyper_channels, 3, 3), "scalable")
    ps = sys_.gaussian_params_mem(ctx_s, torch.randn(1, cfg.c1, 12, 12))
    assert ps.mu.shape == (1, cfg.c2, 12, 12)
    assert ps.sigma.min().item() >= SIGMA_FLOOR


def test_mem_requires_spatial_alignment():
    cfg, sys_ = _toy_system()
    ctx_s = torch.randn(1, 2 * cfg.c2, 12, 12)
    with pytest.raises(ValueError, match="align"):
        sys_.gaussian_params_mem(ctx_s, torch.randn(1, cfg.c1, 6, 6))


@pytest.fixture(scope="module")
def toy_codec_and_pack():
    cfg = ModelConfig.toy()
    torch.manual_seed(0)
    model = ScalableCodec(cfg).eval()
    g = torch.Generator().manual_seed(42)
    x = torch.rand(1, 3, 96, 96, generator=g)
    pack, params = model.encode_latents(x)
    return cfg, model, x, pack, params


def test_scalable_params_ignore_scalable_latent(toy_codec_and_pack):
    # coding distributions for l_s must come from z_s and l_b only, or any
    # truncated prefix would decode against the wrong distributions
    cfg, model, x, pack, params = toy_codec_and_pack
    shuffled = LatentPack(
        l_b_hat=pack.l_b_hat,
        l_s_hat=pack.l_s_hat[::-1].copy(),
        z_b_hat=pack.z_b_hat,
        z_s_hat=pack.z_s_hat,
    )
    p2 = model.params_for_pack(shuffled)
    assert torch.equal(p2["l_s"].mu, params["l_s"].mu)
    assert torch.equal(p2["l_s"].sigma, params["l_s"].sigma)
    assert torch.equal(p2["l_b"].mu, params["l_b"].mu)


def test_scalable_params_do_use_basic_latent(toy_codec_and_pack):
    cfg, model, x, pack, params = toy_codec_and_pack
    zeroed = LatentPack(
        l_b_hat=np.zeros_like(pack.l_b_hat),
        l_s_hat=pack.l_s_hat,
        z_b_hat=pack.z_b_hat,
        z_s_hat=pack.z_s_hat,
    )
    p2 = model.params_for_pack(zeroed)
    assert not torch.equal(p2["l_s"].mu, params["l_s"].mu)


def test_scalable_params_without_mutual_prior_ignore_basic_latent():
    cfg = ModelConfig.toy(toggles=Toggles(True, True, False))
    torch.manual_seed(0)
    model = ScalableCodec(cfg).eval()
    g = torch.Generator().manual_seed(1)
    x = torch.rand(1, 3, 96, 96, generator=g)
    pack, params = model.encode_latents(x)
    zeroed = LatentPack(
        l_b_hat=np.zeros_like(pack.l_b_hat),
        l_s_hat=pack.l_s_hat,
        z_b_hat=pack.z_b_hat,
        z_s_hat=pack.z_s_hat,
    )
    p2 = model.params_for_pack(zeroed)
    assert torch.equal(p2["l_s"].mu, params["l_s"].mu)
    assert torch.equal(p2["l_s"].sigma, params["l_s"].sigma)


def test_rate_report_decomposition(toy_codec_and_pack):
    cfg, model, x, pack, params = toy_codec_and_pack
    n_pixels = 96 * 96
    report = model.rate_report(pack, n_pixels)

    assert report.per_channel_bits.shape == (cfg.c2,)
    assert (report.per_channel_bits >= 0).all()
    prefix = report.bits_scalable_prefix
    assert prefix.shape == (cfg.c2 + 1,)
    assert prefix[0] == pytest.approx(report.z_s_bits)
    assert (np.diff(prefix) >= 0).all()

    # the per-channel split must sum to an independently computed whole-tensor rate
    ps = params["l_s"]
    whole = gaussian_rate(
        torch.from_numpy(pack.l_s_hat.astype(np.float64)).unsqueeze(0),
        EntropyParams(ps.mu.double(), ps.sigma.double()),
    ).sum().item()
    assert prefix[-1] - report.z_s_bits == pytest.approx(whole, rel=1e-9)

    assert report.total_bits(0) == pytest.approx(report.bits_base + report.z_s_bits)
    assert report.bpp(cfg.c2) == pytest.approx(report.total_bits(cfg.c2) / n_pixels)
    assert report.bits_base > 0


def test_rate_report_standalone_matches_model_method(toy_codec_and_pack):
    cfg, model, x, pack, params = toy_codec_and_pack
    direct = rate_report(
        model.entropy, pack, params["l_b"], params["l_s"], 96 * 96)
    via_model = model.rate_report(pack, 96 * 96)
    assert direct.bits_base == pytest.approx(via_model.bits_base)
    np.testing.assert_allclose(direct.per_channel_bits, via_model.per_channel_bits)
