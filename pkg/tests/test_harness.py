"""Evaluation harness: curves, reports, ablation runner, bandwidth simulator."""

import csv

import numpy as np
import pytest
import torch

from fgscodec.config import ModelConfig
from fgscodec.datagen import make_dataset, synth_image, synth_images
from fgscodec.harness import (
    ABLATION_CASES,
    GAP_PSNR,
    SimulationReport,
    ablation_run,
    bandwidth_simulate,
    channel_entropy_report,
    coarse_points,
    group_bounds,
    heldout_loss,
    load_trace,
    progressive_quality_report,
    rd_curve,
)
from fgscodec.container import inspect_stream, encode_stream
from fgscodec.model import ScalableCodec
from fgscodec.training import TrainConfig


@pytest.fixture(scope="module")
def toy():
    cfg = ModelConfig.toy()
    torch.manual_seed(0)
    model = ScalableCodec(cfg).eval()
    model.train_step_count += 1  # silence the untrained-encoder warning
    images = synth_images(2, 96, 96, seed=7)
    return cfg, model, images


# ---- index helpers -------------------------------------------------------


def test_group_bounds_balanced():
    assert group_bounds(192, 24) == [8 * (g + 1) for g in range(24)]
    b = group_bounds(32, 24)
    assert len(b) == 24
    assert b[-1] == 32
    assert all(x <= y for x, y in zip(b, b[1:]))
    assert group_bounds(8, 4) == [2, 4, 6, 8]


def test_coarse_points_values():
    assert coarse_points(192) == [0, 64, 128, 192]
    assert coarse_points(32) == [0, 11, 21, 32]
    assert coarse_points(32, n_layers=2) == [0, 32]
    # tiny streams collapse duplicate rounded points
    assert coarse_points(2, n_layers=4) == [0, 1, 2]


def test_load_trace(tmp_path):
    p = tmp_path / "trace.txt"
    p.write_text("# warmup\n1000\n\n2500  # burst\n0\n")
    assert load_trace(p) == [1000, 2500, 0]


# ---- rd_curve ------------------------------------------------------------


def test_rd_curve_point_grid(toy, tmp_path):
    cfg, model, images = toy
    csv_path = tmp_path / "rd.csv"
    points = rd_curve(model, images, step_units=8, csv_path=csv_path)
    assert [p.units_decoded for p in points] == [0, 8, 16, 24, 32]
    bpps = [p.bpp for p in points]
    assert all(x < y for x, y in zip(bpps, bpps[1:]))
    assert bpps[0] > 0  # mandatory prefix is never free
    for p in points:
        assert 0 < p.ms_ssim <= 1
        assert p.psnr > 0

    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["units", "bpp", "psnr", "ms_ssim"]
    assert len(rows) == 1 + len(points)
    assert [int(r[0]) for r in rows[1:]] == [0, 8, 16, 24, 32]
    assert float(rows[1][1]) == pytest.approx(points[0].bpp, abs=1e-6)


def test_rd_curve_uneven_step_includes_endpoint(toy):
    cfg, model, images = toy
    points = rd_curve(model, images[:1], step_units=5)
    assert [p.units_decoded for p in points] == [0, 5, 10, 15, 20, 25, 30, 32]


def test_rd_curve_half_channel_grid(toy):
    cfg, model, images = toy
    points = rd_curve(model, images[:1], step_units=16, half_channel=True)
    assert [p.units_decoded for p in points] == [0, 16, 32, 48, 64]


def test_rd_curve_validation(toy):
    cfg, model, images = toy
    with pytest.raises(ValueError, match="step_units"):
        rd_curve(model, images, step_units=0)
    with pytest.raises(ValueError, match="empty"):
        rd_curve(model, [], step_units=8)


def test_load_images_from_directory(toy, tmp_path):
    cfg, model, _ = toy
    make_dataset(tmp_path, 2, height=96, width=96, seed=3)
    points = rd_curve(model, tmp_path, step_units=32)
    assert [p.units_decoded for p in points] == [0, 32]
    empty = tmp_path / "none"
    empty.mkdir()
    with pytest.raises(ValueError, match="no images"):
        rd_curve(model, empty, step_units=8)


# ---- per-image reports ---------------------------------------------------


def test_progressive_report_rows(toy, tmp_path):
    cfg, model, images = toy
    csv_path = tmp_path / "prog.csv"
    rows = progressive_quality_report(model, images[0], csv_path=csv_path)
    assert len(rows) == 24
    assert [j for _, j, _ in rows] == group_bounds(cfg.c2, 24)
    assert [n for n, _, _ in rows] == list(range(1, 25))
    with open(csv_path) as fh:
        parsed = list(csv.reader(fh))
    assert parsed[0] == ["groups", "channels", "psnr"]
    assert len(parsed) == 25
    short = progressive_quality_report(model, images[0], n_groups=4)
    assert [j for _, j, _ in short] == [8, 16, 24, 32]


def test_entropy_report_partitions_channels(toy, tmp_path):
    cfg, model, images = toy
    csv_path = tmp_path / "entropy.csv"
    per_channel, per_group = channel_entropy_report(
        model, images[0], csv_path=csv_path)
    assert per_channel.shape == (cfg.c2,)
    assert per_group.shape == (24,)
    assert (per_channel >= 0).all()
    assert per_group.sum() == pytest.approx(per_channel.sum(), rel=1e-12)
    with open(csv_path) as fh:
        parsed = list(csv.reader(fh))
    assert parsed[0] == ["group", "first_channel", "last_channel", "bits"]
    firsts = [int(r[1]) for r in parsed[1:]]
    lasts = [int(r[2]) for r in parsed[1:]]
    assert firsts[0] == 0
    assert lasts[-1] == cfg.c2 - 1
    for prev_last, nxt_first in zip(lasts, firsts[1:]):
        assert nxt_first == prev_last + 1


# ---- heldout objective and ablation -------------------------------------


def test_heldout_loss_deterministic(toy):
    cfg, model, images = toy
    a = heldout_loss(model, images)
    b = heldout_loss(model, images)
    assert set(a) == {"loss", "bpp_full", "psnr_full", "psnr_base"}
    assert a == b
    assert a["loss"] > 0
    assert a["bpp_full"] > 0


def test_ablation_cases_table():
    names = [c[0] for c in ABLATION_CASES]
    assert names == [f"case{i}" for i in range(1, 7)]
    assert ABLATION_CASES[0][1:] == (True, True, True)
    assert ABLATION_CASES[5][1:] == (False, False, False)
    # every toggle combination is distinct
    assert len({c[1:] for c in ABLATION_CASES}) == 6


def test_ablation_run_tiny_budget(tmp_path):
    train_cfg = TrainConfig(
        steps=2, batch_size=1, crop_size=16, lr=1e-4, seed=0, log_every=0,
        c1=8, c2=8, downsample=4, hyper_channels=8, base_width=16)
    train_images = [im.transpose(2, 0, 1) for im in synth_images(2, 32, 32, seed=1)]
    heldout = synth_images(1, 32, 32, seed=2)
    csv_path = tmp_path / "ablation.csv"
    rows = ablation_run(
        train_cfg, train_images, heldout,
        cases=(ABLATION_CASES[0], ABLATION_CASES[5]), csv_path=csv_path)
    assert [r["case"] for r in rows] == ["case1", "case6"]
    for r in rows:
        assert r["loss"] > 0
        assert {"frr", "ffm", "mem", "bpp_full", "psnr_full", "psnr_base"} <= set(r)
    with open(csv_path) as fh:
        parsed = list(csv.reader(fh))
    assert parsed[0][:4] == ["case", "frr", "ffm", "mem"]
    assert len(parsed) == 3


# ---- bandwidth simulator -------------------------------------------------


@pytest.fixture(scope="module")
def sim_setup(toy):
    cfg, model, images = toy
    data = encode_stream(model, images[0])
    offsets = [off for _, off in inspect_stream(data).truncation_points]
    return model, images[:1], offsets


def test_simulator_prefers_finer_modes(sim_setup):
    model, images, offsets = sim_setup
    trace = [offsets[0] - 1, offsets[0], offsets[4] + 2, offsets[-1], 10**9]
    report = bandwidth_simulate(model, images, trace)
    assert len(report.rows) == len(trace) * 3
    by_mode = {m: report.mode_rows(m) for m in ("fine", "coarse", "nonscalable")}
    for rows in by_mode.values():
        assert len(rows) == len(trace)
    for t in range(len(trace)):
        f, c, n = (by_mode[m][t] for m in ("fine", "coarse", "nonscalable"))
        # finer candidate sets are supersets, so they deliver at least as
        # much whenever anything is feasible
        assert f.delivered >= c.delivered >= n.delivered
        if c.delivered:
            assert f.units >= c.units
        if n.delivered:
            assert c.units >= n.units == model.cfg.c2
        for r in (f, c, n):
            if r.delivered:
                assert r.bytes_sent <= r.budget
            else:
                assert r.bytes_sent == 0
                assert r.psnr == GAP_PSNR


def test_simulator_gap_scoring(sim_setup):
    model, images, offsets = sim_setup
    report = bandwidth_simulate(model, images, [0, 10**9], modes=("fine",))
    first, second = report.rows
    assert not first.delivered
    assert second.delivered
    assert second.units == model.cfg.c2
    assert report.mean_psnr("fine") == pytest.approx(
        (GAP_PSNR + second.psnr) / 2)


def test_simulator_round_robin_and_csv(sim_setup, tmp_path):
    model, images, offsets = sim_setup
    csv_path = tmp_path / "sim.csv"
    trace = [10**9] * 3
    report = bandwidth_simulate(
        model, images, trace, modes=("fine",), csv_path=csv_path)
    sent = [r.bytes_sent for r in report.rows]
    assert sent[0] == sent[1] == sent[2]  # one image cycles
    with open(csv_path) as fh:
        parsed = list(csv.reader(fh))
    assert parsed[0] == [
        "step", "budget", "mode", "bytes_sent", "units", "delivered", "psnr"]
    assert len(parsed) == 1 + 3


def test_simulator_validation(sim_setup):
    model, images, offsets = sim_setup
    with pytest.raises(ValueError, match="unknown mode"):
        bandwidth_simulate(model, images, [100], modes=("medium",))
    with pytest.raises(ValueError, match=">= 0"):
        bandwidth_simulate(model, images, [-5])
