"""Fidelity metrics, aligned scoring, and the ablation table runner.

All metrics operate in linear sensor space. Direct scoring compares
prediction and ground truth pixel-wise; aligned scoring first warps the
prediction onto the ground truth with estimated flow and applies a fitted
color matrix, then scores only valid pixels away from the warp border (the
protocol used when ground truth comes from a different camera).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .common import DataError, DimensionError, UsageError, gaussian_blur, require
from .datasets import SampleDataset
from .flow import FlowField, estimate_flow, resize_flow, warp_image
from .losses import compute_mask, estimate_ccm, gaussian_smooth_np
from .net import load_checkpoint
from .rawmodel import LinearRGB
from .synth import downsample

PSNR_INF = float("inf")


def psnr(a: np.ndarray | LinearRGB, b: np.ndarray | LinearRGB, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf sentinel for identical inputs."""
    av = a.data if isinstance(a, LinearRGB) else np.asarray(a)
    bv = b.data if isinstance(b, LinearRGB) else np.asarray(b)
    require(av.shape == bv.shape, DimensionError, "psnr needs equal shapes")
    mse = float(np.mean((av.astype(np.float64) - bv.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a: np.ndarray | LinearRGB, b: np.ndarray | LinearRGB, peak: float = 1.0) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), standard constants.

    Color images are reduced to their channel mean first.
    """
    av = a.data if isinstance(a, LinearRGB) else np.asarray(a)
    bv = b.data if isinstance(b, LinearRGB) else np.asarray(b)
    require(av.shape == bv.shape, DimensionError, "ssim needs equal shapes")
    x = av.mean(axis=2) if av.ndim == 3 else av
    y = bv.mean(axis=2) if bv.ndim == 3 else bv
    require(min(x.shape) >= 11, DimensionError, "image smaller than the 11x11 ssim window")
    x = x.astype(np.float64)
    y = y.astype(np.float64)

    blur = lambda im: gaussian_blur(im, 1.5, radius=5)
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class ScoreReport:
    psnr: float
    ssim: float
    protocol: str                      # "direct" or "aligned"
    per_image: list[tuple[float, float]] = field(default_factory=list)


def aligned_score(pred: LinearRGB, gt: LinearRGB, flow_method: str = "pyramidal",
                  border: int = 16, tau: float = 0.05, sigma: float = 1.0,
                  lr_factor: int = 8) -> ScoreReport:
    """Warp pred onto gt, fit and apply a color matrix, score valid pixels only.

    A `border`-pixel frame and mask-invalid pixels are excluded to keep warp
    boundary effects out of the metrics.
    """
    require(pred.shape == gt.shape, DimensionError, "aligned_score needs equal shapes")
    f = estimate_flow(pred, gt, method=flow_method)
    warped = warp_image(pred, f)

    pred_lr = downsample(LinearRGB(warped.data.astype(np.float64), clipped=False), lr_factor)
    gt_lr = downsample(gt, lr_factor)
    pred_bar = gaussian_smooth_np(pred_lr.data, sigma)
    gt_bar = gaussian_smooth_np(gt_lr.data, sigma)
    ccm = estimate_ccm(pred_bar, gt_bar)
    mapped = np.clip(ccm.apply(warped.data.astype(np.float64)), 0.0, 1.0)

    mask = compute_mask(gt_bar, ccm.apply(pred_bar), tau, lr_factor).m.astype(bool)
    h, w = mask.shape
    require(h > 2 * border and w > 2 * border, DimensionError, "image too small for border")
    valid = np.zeros_like(mask)
    valid[border:-border, border:-border] = True
    valid &= mask
    if not valid.any():
        raise DataError("aligned_score: no valid pixels after masking")

    diff = mapped - gt.data.astype(np.float64)
    mse = float(np.mean(diff[valid] ** 2))
    p = PSNR_INF if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
    inner = (slice(border, -border), slice(border, -border))
    s = ssim(mapped[inner], gt.data[inner])
    return ScoreReport(psnr=p, ssim=s, protocol="aligned")


def evaluate_checkpoint(ckpt: str | Path, data_dir: str | Path,
                        burst_size: int | None = None, protocol: str = "direct",
                        flow_method: str = "oracle", max_samples: int | None = None,
                        ) -> ScoreReport:
    """Mean PSNR/SSIM of a checkpoint over a dataset directory."""
    require(protocol in ("direct", "aligned"), UsageError, f"unknown protocol {protocol!r}")
    model, _, _ = load_checkpoint(ckpt)
    model.eval()
    data = SampleDataset(data_dir)
    count = len(data) if max_samples is None else min(max_samples, len(data))
    per_image: list[tuple[float, float]] = []
    with torch.no_grad():
        for i in range(count):
            ex = data.load_eval_example(i, burst_size=burst_size)
            pred = infer_example(model, ex, flow_method)
            gt = LinearRGB(ex.gt.numpy().transpose(1, 2, 0))
            if protocol == "aligned":
                rep = aligned_score(pred, gt, lr_factor=2 * ex.scale)
                per_image.append((rep.psnr, rep.ssim))
            else:
                per_image.append((psnr(pred, gt), ssim(pred, gt)))
    finite = [p for p, _ in per_image if math.isfinite(p)]
    mean_psnr = float(np.mean(finite)) if finite else PSNR_INF
    return ScoreReport(psnr=mean_psnr, ssim=float(np.mean([s for _, s in per_image])),
                       protocol=protocol, per_image=per_image)


def infer_example(model, ex, flow_method: str = "oracle") -> LinearRGB:
    """Run the model on one loaded example; returns the clipped prediction."""
    from .rawmodel import PackedFrame, rgb_proxy

    flows = None
    if model.cfg.alignment == "flow":
        if flow_method == "oracle":
            flows = ex.flows.unsqueeze(0)
        elif flow_method == "pyramidal":
            n = ex.packed.shape[0]
            base = rgb_proxy(PackedFrame(ex.packed[0].numpy().transpose(1, 2, 0)))
            fields = [np.zeros((*base.shape, 2), dtype=np.float32)]
            for i in range(1, n):
                proxy = rgb_proxy(PackedFrame(ex.packed[i].numpy().transpose(1, 2, 0)))
                fields.append(estimate_flow(proxy, base, method="pyramidal").data)
            flows = torch.from_numpy(np.stack(fields)).unsqueeze(0)
        else:
            raise UsageError(f"unsupported flow method for inference: {flow_method!r}")
    with torch.no_grad():
        out, _ = model(ex.packed.unsqueeze(0), flows)
    return LinearRGB(out[0].clamp(0, 1).numpy().transpose(1, 2, 0))


# Full-scale reference PSNR rows (synthetic test set) for context in reports.
REFERENCE_PSNR = {
    "single": 36.42,
    "burst2": 34.90,
    "burst4": 37.18,
    "burst8": 38.61,
    "burst14": 39.09,
    "no_alignment": 36.66,
    "maxpool": 36.24,
    "avgpool": 35.45,
    "concat": 37.80,
    "recmerge": 37.55,
    "wp_feature": 37.46,
    "wp_residual": 38.14,
    "wp_residual_base": 38.41,
    "wp_residual_base_flow": 38.61,
    "no_shift": 37.00,
}


@dataclass
class AblationRow:
    name: str
    burst_size: int
    psnr: float
    ssim: float
    reference_psnr: float | None = None
    note: str = ""


def run_ablation(suite: list[dict], data_dir: str | Path, out_csv: str | Path | None = None,
                 flow_method: str = "oracle", max_samples: int | None = None) -> list[AblationRow]:
    """Evaluate a list of {name, checkpoint, burst_sizes} entries on one set.

    Missing checkpoints are reported in the table, not fatal. Reference
    full-scale PSNR values are attached as metadata where a row name matches.
    """
    rows: list[AblationRow] = []
    for entry in suite:
        name = entry["name"]
        sizes = entry.get("burst_sizes", [entry.get("burst_size", 8)])
        ckpt = Path(entry["checkpoint"])
        for n in sizes:
            key = name if len(sizes) == 1 else f"burst{n}"
            ref = REFERENCE_PSNR.get(key)
            if not ckpt.exists():
                rows.append(AblationRow(name, n, float("nan"), float("nan"), ref,
                                        note="missing checkpoint"))
                continue
            rep = evaluate_checkpoint(ckpt, data_dir, burst_size=n,
                                      flow_method=entry.get("flow_method", flow_method),
                                      max_samples=max_samples)
            rows.append(AblationRow(name, n, rep.psnr, rep.ssim, ref))
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with out_csv.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "burst_size", "psnr", "ssim",
                             "reference_fullscale_psnr", "note"])
            for r in rows:
                writer.writerow([r.name, r.burst_size, f"{r.psnr:.4f}", f"{r.ssim:.5f}",
                                 "" if r.reference_psnr is None else r.reference_psnr, r.note])
    return rows


def save_triptych(path: str | Path, base_proxy: LinearRGB, pred: LinearRGB,
                  gt: LinearRGB, gamma: float = 2.2) -> None:
    """Side-by-side (input base frame, prediction, ground truth) PNG."""
    from PIL import Image

    from .losses import upsample_bilinear

    h, w = gt.shape
    up = upsample_bilinear(base_proxy.data, h // base_proxy.shape[0])

    def to8(img: np.ndarray) -> np.ndarray:
        x = np.clip(img, 0.0, 1.0) ** (1.0 / gamma)
        return (x * 255.0 + 0.5).astype(np.uint8)

    panel = np.concatenate([to8(up), to8(pred.data), to8(gt.data)], axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(panel).save(path)


def save_flow_visualization(path: str | Path, flow_data: np.ndarray) -> None:
    """Flow magnitude/direction rendered as an RGB PNG (diagnostic output)."""
    from PIL import Image

    mag = np.linalg.norm(flow_data, axis=-1)
    ang = np.arctan2(flow_data[..., 1], flow_data[..., 0])
    scale = mag / (mag.max() + 1e-9)
    rgb = np.stack([
        0.5 + 0.5 * scale * np.cos(ang),
        0.5 + 0.5 * scale * np.sin(ang),
        1.0 - scale,
    ], axis=-1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


def save_weight_visualization(path: str | Path, weights: np.ndarray) -> None:
    """Per-frame mean fusion weight maps tiled horizontally as grayscale PNG."""
    from PIL import Image

    maps = [w.mean(axis=0) for w in weights]  # channel-mean per frame
    panel = np.concatenate(maps, axis=1)
    panel = panel / (panel.max() + 1e-9)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((panel * 255).astype(np.uint8)).save(path)
