"""Command-line front end: encode, decode, truncate, inspect, evaluate, train."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np


def _load_model(path):
    from fgscodec.training import load_checkpoint

    model, _ = load_checkpoint(path)
    return model


def _read_image(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def _write_image(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _cmd_encode(args) -> int:
    from fgscodec.container import encode_stream

    model = _load_model(args.model)
    data = encode_stream(model, _read_image(args.infile),
                         half_channel=args.half_channel)
    Path(args.outfile).write_bytes(data)
    print(f"wrote {len(data)} bytes to {args.outfile}")
    return 0


def _cmd_decode(args) -> int:
    from fgscodec.container import decode_stream

    model = _load_model(args.model)
    image, units = decode_stream(
        Path(args.infile).read_bytes(), model, max_units=args.units)
    _write_image(args.outfile, image)
    print(f"decoded {args.infile} using {units} scalable units -> {args.outfile}")
    return 0


def _cmd_truncate(args) -> int:
    from fgscodec.container import truncate_stream

    data = Path(args.infile).read_bytes()
    out = truncate_stream(data, budget_bytes=args.budget_bytes,
                          target_units=args.units)
    Path(args.outfile).write_bytes(out)
    print(f"truncated {len(data)} -> {len(out)} bytes ({args.outfile})")
    return 0


def _cmd_inspect(args) -> int:
    from fgscodec.container import inspect_stream

    print(inspect_stream(Path(args.infile).read_bytes()).format())
    return 0


def _cmd_train(args) -> int:
    from fgscodec.model import ScalableCodec
    from fgscodec.training import TrainConfig, Trainer

    cfg = TrainConfig.from_file(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = ScalableCodec(cfg.model_config())
    trainer = Trainer(model, cfg, log_path=out_dir / "train_log.csv")
    if args.resume:
        trainer = Trainer.resume(args.resume, log_path=out_dir / "train_log.csv")
    loss = trainer.run()
    ckpt = out_dir / "model.pt"
    trainer.save(ckpt)
    print(f"finished at step {trainer.step}, loss {loss:.4f}; saved {ckpt}")
    return 0


def _cmd_evaluate(args) -> int:
    from fgscodec import harness

    model = _load_model(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    plot = lambda name: (out_dir / name) if args.plots else None

    if args.report == "rd":
        points = harness.rd_curve(
            model, args.images, step_units=args.step,
            csv_path=out_dir / "rd_curve.csv", plot_path=plot("rd_curve.png"))
        for p in points:
            print(f"units {p.units_decoded:4d}  bpp {p.bpp:.4f}  "
                  f"psnr {p.psnr:.2f}  ms_ssim {p.ms_ssim:.4f}")
    elif args.report == "progressive":
        image = harness._load_images(args.images)[0]
        rows = harness.progressive_quality_report(
            model, image, csv_path=out_dir / "progressive.csv",
            plot_path=plot("progressive.png"))
        for n, ch, val in rows:
            print(f"groups {n:2d} (channels {ch:4d})  psnr {val:.2f}")
    elif args.report == "entropy":
        image = harness._load_images(args.images)[0]
        _, per_group = harness.channel_entropy_report(
            model, image, csv_path=out_dir / "entropy.csv",
            plot_path=plot("entropy.png"))
        for g, bits in enumerate(per_group, start=1):
            print(f"group {g:2d}  bits {bits:.1f}")
    elif args.report == "simulate":
        if not args.trace:
            print("simulate needs --trace", file=sys.stderr)
            return 2
        trace = harness.load_trace(args.trace)
        report = harness.bandwidth_simulate(
            model, args.images, trace, csv_path=out_dir / "simulate.csv")
        for mode in ("fine", "coarse", "nonscalable"):
            print(f"{mode}: mean psnr {report.mean_psnr(mode):.2f}")
    else:
        print(f"unknown report {args.report}", file=sys.stderr)
        return 2
    return 0


def _cmd_evaluate_ablation(args) -> int:
    from fgscodec import harness
    from fgscodec.training import TrainConfig, load_training_images

    cfg = TrainConfig.from_file(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = load_training_images(cfg.data_dir, cfg.crop_size)
    heldout = harness._load_images(args.images)
    rows = harness.ablation_run(
        cfg, images, heldout, csv_path=out_dir / "ablation.csv")
    for r in rows:
        print(f"{r['case']}: loss {r['loss']:.4f}  bpp {r['bpp_full']:.4f}  "
              f"psnr {r['psnr_full']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgscodec",
        description="Fine-grained scalable learned image codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress an image to a scalable stream")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.add_argument("--half-channel", action="store_true",
                   help="double truncation granularity with half-channel units")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="reconstruct an image from a stream")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.add_argument("--units", type=int, default=None,
                   help="use at most this many scalable units")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("truncate", help="cut a stream at a unit boundary")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--budget-bytes", type=int, default=None)
    g.add_argument("--units", type=int, default=None)
    p.set_defaults(func=_cmd_truncate)

    p = sub.add_parser("inspect", help="describe a stream's segments")
    p.add_argument("--in", dest="infile", required=True)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="reports: rd, progressive, entropy, "
                                        "ablation, simulate")
    p.add_argument("report", choices=(
        "rd", "progressive", "entropy", "ablation", "simulate"))
    p.add_argument("--model", help="checkpoint (all reports except ablation)")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--step", type=int, default=8, help="rd: unit step size")
    p.add_argument("--trace", default=None, help="simulate: budget file")
    p.add_argument("--config", default=None, help="ablation: training config")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--plots", action="store_true", help="also write PNG plots")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "report", None) == "ablation":
        if not args.config:
            print("ablation needs --config", file=sys.stderr)
            return 2
        return _cmd_evaluate_ablation(args)
    if args.command == "evaluate" and not args.model:
        print(f"{args.report} needs --model", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
