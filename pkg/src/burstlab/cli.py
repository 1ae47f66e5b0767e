"""Command-line entry point.

Subcommands: synth, dataproc, train, finetune, infer, eval, ablate,
selftest. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure. Every run writes its resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .common import DataError, NumericError, UsageError
from .config import RunConfig, resolve

SYNTH_DEFAULTS = {
    "count": 16,
    "burst_size": 8,
    "scale": 4,
    "crop": 96,
    "source_size": 512,
    "no_shift": False,
    "zero_noise": False,
    "shot_range": (1e-4, 1e-2),
    "read_range": (1e-6, 1e-4),
}

TRAIN_DEFAULTS = {
    "iterations": 10_000,
    "burst_size": 8,
    "lr": 1e-4,
    "batch_size": 2,
    "crop": 96,
    "flips": True,
    "random_crop": True,
    "embed_dim": 64,
    "scale": 4,
    "alignment": "flow",
    "fusion": "attention",
    "wp_inputs": "residual_base_flow",
    "val_interval": 0,
}

FINETUNE_DEFAULTS = {
    "iterations": 2_000,
    "burst_size": 8,
    "lr": 1e-4,
    "batch_size": 2,
    "crop": 160,
    "flips": True,
    "random_crop": True,
    "mask_tau": 0.05,
    "smooth_sigma": 1.0,
    "val_interval": 0,
}

DATAPROC_DEFAULTS = {
    "crop": 160,
    "stride": 80,
    "ncc_threshold": 0.9,
    "scale": 4,
}

EVAL_DEFAULTS = {
    "burst_size": 8,
    "protocol": "direct",
    "flow_method": "oracle",
    "max_samples": 0,
}


def _cmd_synth(args) -> int:
    from .synth import SynthConfig, generate_burst, write_sample
    from .textures import random_texture

    cfg = resolve("synth", SYNTH_DEFAULTS, args.config, {
        "count": args.count, "burst_size": args.burst_size, "scale": args.scale,
        "crop": args.crop, "no_shift": args.no_shift or None,
        "zero_noise": args.zero_noise or None,
    }, seed=args.seed)
    out = Path(args.out)
    scfg = SynthConfig(
        burst_size=cfg["burst_size"], scale=cfg["scale"], crop=cfg["crop"],
        shot_range=tuple(cfg["shot_range"]), read_range=tuple(cfg["read_range"]),
        zero_noise=cfg["zero_noise"])
    scfg.motion.no_shift = cfg["no_shift"]
    size = (cfg["source_size"], cfg["source_size"])
    for i in range(cfg["count"]):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, i)))
        sample = generate_burst(random_texture(rng, size), cfg["burst_size"],
                                cfg["scale"], rng, scfg)
        write_sample(out / f"sample_{i:05d}", sample)
    cfg.write_resolved(out)
    print(f"wrote {cfg['count']} samples to {out}")
    return 0


def _cmd_dataproc(args) -> int:
    from .dataproc import ExtractConfig, extract_pairs, fit_homography, \
        match_correspondences, warp_homography
    from .flow import FlowField
    from .losses import upsample_bilinear
    from .rawmodel import CameraPipelineParams, LinearRGB, NoiseParams, load_raw, \
        load_rgb, pack_bayer, rgb_proxy
    from .synth import BurstSample, MotionParams, SampleMeta, read_meta, sample_dirs, \
        write_sample

    cfg = resolve("dataproc", DATAPROC_DEFAULTS, args.config, {
        "crop": args.crop, "stride": args.stride,
    }, seed=args.seed)
    out = Path(args.out)
    n_written = 0
    for sdir in sample_dirs(args.data):
        _, n = read_meta(sdir)
        frames = [load_raw(sdir / f"frame_{i:02d}")[0] for i in range(n)]
        gt = load_rgb(sdir / "gt")
        s = cfg["scale"]

        # global alignment: reference -> base frame field of view
        proxy_up = LinearRGB(
            upsample_bilinear(rgb_proxy(pack_bayer(frames[0])).data, 2 * s).astype(np.float32),
            clipped=False)
        try:
            hom = fit_homography(match_correspondences(gt, proxy_up))
            gt = warp_homography(gt, hom)
        except DataError:
            pass  # already aligned inputs are fine
        pairs = extract_pairs(frames, gt, s, ExtractConfig(
            crop=cfg["crop"], stride=cfg["stride"], ncc_threshold=cfg["ncc_threshold"]))
        for pair in pairs:
            pdir = out / f"{sdir.name}_crop{n_written:04d}"
            grid = (cfg["crop"] // 2, cfg["crop"] // 2)
            meta = SampleMeta(scale=s, crop_origin=pair.origin,
                              hr_size=(gt.shape[1], gt.shape[0]),
                              motions=[MotionParams() for _ in pair.burst_crop],
                              noise=NoiseParams(0, 0),
                              pipeline=CameraPipelineParams.identity())
            write_sample(pdir, BurstSample(
                frames=pair.burst_crop, gt=pair.gt_crop,
                oracle_flows=[FlowField.zero(grid) for _ in pair.burst_crop],
                meta=meta))
            n_written += 1
    cfg.write_resolved(out)
    print(f"wrote {n_written} crop pairs to {out}")
    return 0


def _cmd_train(args) -> int:
    from .losses import TrainConfig, train_synthetic
    from .net import NetConfig, desk_config

    cfg = resolve("train", TRAIN_DEFAULTS, args.config, {
        "iterations": args.iterations, "burst_size": args.burst_size, "lr": args.lr,
    }, seed=args.seed)
    out = Path(args.out)
    net_cfg = desk_config(
        scale=cfg["scale"], embed_dim=cfg["embed_dim"], fusion=cfg["fusion"],
        alignment=cfg["alignment"], wp_inputs=cfg["wp_inputs"],
        burst_size=cfg["burst_size"] if cfg["fusion"] == "concat" else None)
    tc = TrainConfig(iterations=cfg["iterations"], burst_size=cfg["burst_size"],
                     lr=cfg["lr"], batch_size=cfg["batch_size"], crop=cfg["crop"],
                     flips=cfg["flips"], random_crop=cfg["random_crop"],
                     val_interval=cfg["val_interval"])
    cfg.write_resolved(out)
    result = train_synthetic(net_cfg, tc, args.data, out, seed=cfg.seed,
                             resume=args.resume, val_dir=args.val_data)
    print(f"checkpoint: {result.checkpoint}")
    return 0


def _cmd_finetune(args) -> int:
    from .losses import TrainConfig, finetune_real

    cfg = resolve("finetune", FINETUNE_DEFAULTS, args.config, {
        "iterations": args.iterations, "burst_size": args.burst_size, "lr": args.lr,
    }, seed=args.seed)
    out = Path(args.out)
    tc = TrainConfig(iterations=cfg["iterations"], burst_size=cfg["burst_size"],
                     lr=cfg["lr"], batch_size=cfg["batch_size"], crop=cfg["crop"],
                     flips=cfg["flips"], random_crop=cfg["random_crop"],
                     mask_tau=cfg["mask_tau"], smooth_sigma=cfg["smooth_sigma"],
                     loss_mode="real", val_interval=cfg["val_interval"])
    cfg.write_resolved(out)
    result = finetune_real(tc, args.data, out, args.ckpt, seed=cfg.seed, resume=args.resume)
    print(f"checkpoint: {result.checkpoint}")
    return 0


def _cmd_infer(args) -> int:
    from .datasets import SampleDataset
    from .evaluate import infer_example, save_flow_visualization, save_triptych, \
        save_weight_visualization
    from .net import load_checkpoint
    from .rawmodel import LinearRGB, save_rgb, rgb_proxy, PackedFrame
    import torch

    model, _, _ = load_checkpoint(args.ckpt)
    model.eval()
    data = SampleDataset(Path(args.burst).parent) if (Path(args.burst) / "meta.txt").exists() \
        else SampleDataset(args.burst)
    if (Path(args.burst) / "meta.txt").exists():
        idx = data.dirs.index(Path(args.burst))
    else:
        idx = 0
    ex = data.load_eval_example(idx, burst_size=args.burst_size)
    pred = infer_example(model, ex, flow_method=args.flow_method)
    out = Path(args.out)
    save_rgb(out.with_suffix(""), pred)
    print(f"prediction {pred.data.shape} -> {out.with_suffix('')}.bin")
    if args.debug:
        dbg = out.parent / (out.stem + "_debug")
        flows = ex.flows.numpy()
        for i in range(flows.shape[0]):
            save_flow_visualization(dbg / f"flow_{i:02d}.png", flows[i])
        with torch.no_grad():
            _, aux = model(ex.packed.unsqueeze(0),
                           ex.flows.unsqueeze(0) if model.cfg.alignment == "flow" else None)
        if aux["weights"] is not None:
            save_weight_visualization(dbg / "weights.png", aux["weights"][0].numpy())
        gt = LinearRGB(ex.gt.numpy().transpose(1, 2, 0))
        base = rgb_proxy(PackedFrame(ex.packed[0].numpy().transpose(1, 2, 0)))
        save_triptych(dbg / "triptych.png", base, pred, gt)
        print(f"diagnostics -> {dbg}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import evaluate_checkpoint

    cfg = resolve("eval", EVAL_DEFAULTS, args.config, {
        "burst_size": args.burst_size, "protocol": args.protocol,
        "flow_method": args.flow_method,
    }, seed=args.seed)
    rep = evaluate_checkpoint(args.ckpt, args.data, burst_size=cfg["burst_size"],
                              protocol=cfg["protocol"], flow_method=cfg["flow_method"],
                              max_samples=cfg["max_samples"] or None)
    print(f"protocol={rep.protocol} psnr={rep.psnr:.3f} dB ssim={rep.ssim:.5f} "
          f"({len(rep.per_image)} images)")
    if args.out:
        out = Path(args.out)
        cfg.write_resolved(out.parent if out.suffix else out)
        import csv as _csv
        with open(out if out.suffix else out / "scores.csv", "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["index", "psnr", "ssim"])
            for i, (p, s) in enumerate(rep.per_image):
                writer.writerow([i, f"{p:.4f}", f"{s:.5f}"])
    return 0


def _cmd_ablate(args) -> int:
    from .evaluate import run_ablation

    suite = json.loads(Path(args.suite).read_text())
    rows = run_ablation(suite, args.data, out_csv=args.out,
                        max_samples=args.max_samples or None)
    for r in rows:
        ref = f" (full-scale ref {r.reference_psnr})" if r.reference_psnr else ""
        print(f"{r.name:24s} N={r.burst_size:<3d} psnr={r.psnr:8.3f} ssim={r.ssim:.5f}"
              f"{ref} {r.note}")
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="burstlab",
                                     description="burst super-resolution laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic burst dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int)
    p.add_argument("--burst-size", dest="burst_size", type=int)
    p.add_argument("--scale", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--no-shift", dest="no_shift", action="store_true", default=False)
    p.add_argument("--zero-noise", dest="zero_noise", action="store_true", default=False)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("dataproc", help="extract aligned crop pairs from burst/reference data")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=_cmd_dataproc)

    p = sub.add_parser("train", help="synthetic pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume")
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burst-size", dest="burst_size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune", help="fine-tune with the misalignment-robust loss")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burst-size", dest="burst_size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("infer", help="super-resolve one burst")
    p.add_argument("--burst", required=True, help="sample directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--burst-size", dest="burst_size", type=int)
    p.add_argument("--flow-method", dest="flow_method", default="oracle",
                   choices=["oracle", "pyramidal"])
    p.add_argument("--debug", action="store_true")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--burst-size", dest="burst_size", type=int)
    p.add_argument("--protocol", choices=["direct", "aligned"])
    p.add_argument("--flow-method", dest="flow_method", choices=["oracle", "pyramidal"])
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="evaluate a suite of variant checkpoints")
    p.add_argument("--suite", required=True, help="JSON list of {name, checkpoint, burst_sizes}")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--max-samples", dest="max_samples", type=int, default=0)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("selftest", help="run the built-in property suite")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
