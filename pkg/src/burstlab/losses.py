"""Training losses, the optimizer, and the synthetic/real training loops.

Synthetic pre-training minimizes plain L1 in linear sensor space against
exact ground truth. Real-data fine-tuning cannot do that: the ground truth
comes from a different device, so it is spatially misaligned and color
shifted. The robust loss therefore (1) warps the prediction onto the ground
truth with estimated flow, (2) fits a 3x3 color matrix between the
(smoothed, downsampled) base frame and ground truth by least squares and
applies it to the warped prediction, and (3) masks out pixels whose
post-mapping error exceeds a threshold. Gradients reach the prediction
only; flow estimation and the color fit are constants of the backward pass.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .common import DataError, DimensionError, NumericError, UsageError, require
from .flow import FlowField, estimate_flow, pyramidal_flow, resize_flow, warp
from .net import BurstSRNet, NetConfig, load_checkpoint, save_checkpoint
from .rawmodel import LinearRGB, PackedFrame, pack_bayer, rgb_proxy
from . import datasets


@dataclass
class ColorMatrix:
    """3x3 linear map from a source color space to a target color space."""

    m: np.ndarray
    rank_warning: bool = False

    def apply(self, rgb: np.ndarray) -> np.ndarray:
        return rgb @ self.m.T

    def apply_torch(self, rgb: torch.Tensor) -> torch.Tensor:
        m = torch.as_tensor(self.m, dtype=rgb.dtype, device=rgb.device)
        return torch.einsum("ij,jhw->ihw", m, rgb)


@dataclass
class ValidMask:
    """Binary mask at prediction resolution plus the error map it came from."""

    m: np.ndarray
    r_lr: np.ndarray
    r_up: np.ndarray


def synthetic_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute error in linear sensor space, no tone mapping."""
    if pred.shape != gt.shape:
        raise DimensionError(f"loss shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def estimate_ccm(src, dst, eps: float = 1e-6) -> ColorMatrix:
    """Least-squares 3x3 matrix M minimizing sum ||M s_n - d_n||^2.

    Accepts (..., 3) arrays or LinearRGB. The normal equations carry a
    Tikhonov term eps*I; a rank warning is flagged when the source colors do
    not span all three channels.
    """
    s = (src.data if isinstance(src, LinearRGB) else np.asarray(src)).reshape(-1, 3)
    d = (dst.data if isinstance(dst, LinearRGB) else np.asarray(dst)).reshape(-1, 3)
    require(s.shape == d.shape, DimensionError, "ccm fit needs equally many src/dst pixels")
    s = s.astype(np.float64)
    d = d.astype(np.float64)
    gram = s.T @ s
    cross = d.T @ s
    eigvals = np.linalg.eigvalsh(gram)
    warning = bool(eigvals[0] < 1e-8 * max(eigvals[-1], 1e-12))
    m = np.linalg.solve(gram + eps * np.eye(3), cross.T).T
    return ColorMatrix(m=m, rank_warning=warning)


def upsample_bilinear(img: np.ndarray, factor: int) -> np.ndarray:
    """Half-pixel-aligned bilinear upsampling (inverse grid of `downsample`)."""
    from scipy.ndimage import map_coordinates

    h, w = img.shape[:2]
    ys = (np.arange(h * factor) + 0.5) / factor - 0.5
    xs = (np.arange(w * factor) + 0.5) / factor - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        return map_coordinates(img.astype(np.float64), grid, order=1, mode="nearest")
    out = np.empty((h * factor, w * factor, img.shape[2]))
    for c in range(img.shape[2]):
        out[..., c] = map_coordinates(img[..., c].astype(np.float64), grid, order=1,
                                      mode="nearest")
    return out


def compute_mask(gt_lr_smooth: np.ndarray, mapped_base: np.ndarray, tau: float,
                 up_factor: int) -> ValidMask:
    """Indicator of the bilinearly upsampled color-mapping error map against tau."""
    require(gt_lr_smooth.shape == mapped_base.shape, DimensionError,
            "mask inputs must share the LR shape")
    r = np.linalg.norm(gt_lr_smooth.astype(np.float64) - mapped_base.astype(np.float64), axis=-1)
    r_up = upsample_bilinear(r, up_factor)
    return ValidMask(m=(r_up <= tau).astype(np.float32), r_lr=r, r_up=r_up)


def gaussian_smooth_np(img: np.ndarray, sigma: float) -> np.ndarray:
    """5x5 Gaussian smoothing (sigma=1 default elsewhere), replicate borders."""
    from .common import gaussian_blur

    return gaussian_blur(img, sigma, radius=2)


@dataclass
class RealLossDiag:
    flow: FlowField
    ccm: ColorMatrix
    mask: ValidMask
    skipped: bool


def real_loss(pred: torch.Tensor, gt: torch.Tensor, base: PackedFrame,
              flow_method: str = "pyramidal", tau: float = 0.05, sigma: float = 1.0,
              scale: int = 4) -> tuple[torch.Tensor, RealLossDiag]:
    """Misalignment-robust masked L1 between prediction and real ground truth.

    pred, gt: (3, H, W) tensors at s x RAW resolution; base: the packed base
    frame of the input burst. Only `pred` receives gradients.
    """
    require(pred.dim() == 3 and gt.dim() == 3, DimensionError, "real_loss takes single images")
    require(pred.shape == gt.shape, DimensionError, "pred/gt shapes differ")
    up_factor = 2 * scale
    require(pred.shape[-1] == base.data.shape[1] * up_factor, DimensionError,
            "prediction resolution does not match base frame at this scale")

    pred_np = pred.detach().cpu().numpy().transpose(1, 2, 0)
    gt_np = gt.detach().cpu().numpy().transpose(1, 2, 0)

    # (1) align prediction to ground truth ("zero" asserts known-perfect
    # alignment, the oracle for synthetically constructed pairs)
    if flow_method == "zero":
        f_pred_gt = FlowField.zero(pred.shape[-2:])
        warped_pred = pred
    else:
        f_pred_gt = estimate_flow(LinearRGB(np.clip(pred_np, 0, 1), clipped=True),
                                  LinearRGB(np.clip(gt_np, 0, 1), clipped=True),
                                  method=flow_method)
        flow_t = torch.as_tensor(f_pred_gt.data, dtype=pred.dtype, device=pred.device)
        warped_pred = warp(pred, flow_t)

    # (2) color fit between the processed base frame and the LR ground truth.
    # The downsampled gt is viewed through the same CFA sampling as the
    # proxy (mosaic -> pack -> proxy), so both sides of the fit sample the
    # scene at identical positions and identical color spaces give exactly
    # the identity matrix.
    proxy = rgb_proxy(base).data
    flow_lr = resize_flow(f_pred_gt.data, proxy.shape[:2])
    from .flow import warp_image
    from .rawmodel import mosaic

    base_aligned = warp_image(proxy, FlowField(flow_lr))
    gt_raw = _downsample_np(gt_np, scale)
    gt_lr = rgb_proxy(pack_bayer(mosaic(LinearRGB(np.ascontiguousarray(gt_raw),
                                                  clipped=False)))).data
    base_bar = gaussian_smooth_np(base_aligned, sigma)
    gt_bar = gaussian_smooth_np(gt_lr, sigma)
    ccm = estimate_ccm(base_bar, gt_bar)

    # (3) mask from the color-mapped error, upsampled to prediction resolution
    mask = compute_mask(gt_bar, ccm.apply(base_bar), tau, up_factor)

    mapped_pred = ccm.apply_torch(warped_pred)
    m = torch.as_tensor(mask.m, dtype=pred.dtype, device=pred.device)
    denom = m.sum() * 3
    diag = RealLossDiag(flow=f_pred_gt, ccm=ccm, mask=mask, skipped=bool(denom.item() == 0))
    if diag.skipped:
        return pred.sum() * 0.0, diag
    loss = ((mapped_pred - gt).abs() * m).sum() / denom
    return loss, diag


def _downsample_np(img: np.ndarray, factor: int) -> np.ndarray:
    from .rawmodel import LinearRGB as RGB
    from .synth import downsample

    return downsample(RGB(np.ascontiguousarray(img), clipped=False), factor).data


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """Standard bias-corrected Adam update, in place on `params`.

    A step with any non-finite gradient is skipped entirely and counted in
    `state.skipped`.
    """
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            state.skipped += 1
            return state
    state.t += 1
    t = state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            state.m[name].mul_(beta1).add_(g, alpha=1 - beta1)
            state.v[name].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = state.m[name] / (1 - beta1**t)
            v_hat = state.v[name] / (1 - beta2**t)
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))
    return state


# --- training loops ----------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 100_000
    burst_size: int = 8
    lr: float = 1e-4
    batch_size: int = 2
    crop: int = 96              # RAW pixels (real data default: 160)
    random_crop: bool = True
    flips: bool = True
    mask_tau: float = 0.05
    smooth_sigma: float = 1.0
    loss_mode: str = "l1"       # "l1" or "real"
    flow_method: str = "oracle"  # flow source for the model's alignment
    lr_milestones: tuple[float, float] = (0.6, 0.85)
    log_interval: int = 50
    val_interval: int = 0        # 0 disables periodic validation
    val_samples: int = 8
    nonfinite_abort: int = 3

    def __post_init__(self) -> None:
        require(self.iterations >= 0, UsageError, "iterations must be >= 0")
        require(self.burst_size >= 1 and self.batch_size >= 1 and self.crop > 0,
                UsageError, "positive burst/batch/crop required")
        require(self.loss_mode in ("l1", "real"), UsageError,
                f"unknown loss mode {self.loss_mode!r}")


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    lr = cfg.lr
    for frac in cfg.lr_milestones:
        if iteration >= frac * cfg.iterations:
            lr *= 0.5
    return lr


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float]
    val_psnrs: list[tuple[int, float]]


def _named_params(model: BurstSRNet) -> dict[str, torch.Tensor]:
    return dict(model.named_parameters())


def train(net_cfg: NetConfig, cfg: TrainConfig, data_dir: str | Path, out_dir: str | Path,
          seed: int = 0, init_checkpoint: str | Path | None = None,
          resume: str | Path | None = None, val_dir: str | Path | None = None,
          stop_iteration: int | None = None) -> TrainResult:
    """Deterministic training loop shared by `train_synthetic` and `finetune_real`.

    The batch composition and augmentation draws at iteration t are pure
    functions of (seed, t), so resuming from a checkpoint reproduces the
    uninterrupted trajectory. `stop_iteration` interrupts the run early
    (schedule still follows cfg.iterations) leaving a resumable checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = datasets.SampleDataset(data_dir)

    torch.manual_seed(seed)
    if resume is not None:
        model, extra, state = load_checkpoint(resume)
        start = int(state.get("iteration", 0))
        adam = AdamState(t=int(state.get("adam_t", 0)),
                         skipped=int(state.get("adam_skipped", 0)))
        for key, tensor in extra.items():
            kind, name = key.split(".", 1)
            getattr(adam, kind)[name] = tensor
    else:
        if init_checkpoint is not None:
            model, _, _ = load_checkpoint(init_checkpoint)
        else:
            model = BurstSRNet(net_cfg)
        start = 0
        adam = AdamState()
    model.train()
    params = _named_params(model)

    losses: list[float] = []
    val_psnrs: list[tuple[int, float]] = []
    curve_path = out_dir / "loss_curve.csv"
    curve_rows: list[tuple[int, float, float]] = []
    nonfinite_streak = 0
    end = cfg.iterations if stop_iteration is None else min(stop_iteration, cfg.iterations)

    for t in range(start, end):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xB0057, t)))
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        batch = [data.load_training_example(int(i), cfg, rng) for i in idx]

        model.zero_grad(set_to_none=True)
        if cfg.loss_mode == "l1":
            packed = torch.stack([ex.packed for ex in batch])
            gts = torch.stack([ex.gt for ex in batch])
            flows = None
            if model.cfg.alignment == "flow":
                flows = torch.stack([ex.flows for ex in batch])
            out, _ = model(packed, flows)
            loss = synthetic_loss(out, gts)
        else:
            total = None
            used = 0
            for ex in batch:
                flows = ex.flows.unsqueeze(0) if model.cfg.alignment == "flow" else None
                out, _ = model(ex.packed.unsqueeze(0), flows)
                sample_loss, diag = real_loss(out[0], ex.gt, ex.base_packed,
                                              flow_method="pyramidal", tau=cfg.mask_tau,
                                              sigma=cfg.smooth_sigma, scale=ex.scale)
                if diag.skipped:
                    continue
                total = sample_loss if total is None else total + sample_loss
                used += 1
            loss = total / used if used else None
            if loss is None:
                curve_rows.append((t, float("nan"), lr_at(cfg, t)))
                continue

        loss_val = float(loss.item())
        if not math.isfinite(loss_val):
            nonfinite_streak += 1
            if nonfinite_streak >= cfg.nonfinite_abort:
                raise NumericError(
                    f"non-finite loss for {nonfinite_streak} consecutive iterations at t={t}")
            continue
        nonfinite_streak = 0
        losses.append(loss_val)

        loss.backward()
        grads = {k: p.grad for k, p in params.items()}
        adam_step(params, grads, adam, lr_at(cfg, t))

        if t % cfg.log_interval == 0 or t == end - 1:
            curve_rows.append((t, loss_val, lr_at(cfg, t)))
        if cfg.val_interval and val_dir is not None and (t + 1) % cfg.val_interval == 0:
            val_psnrs.append((t + 1, validation_psnr(model, val_dir, cfg)))
            model.train()

    with curve_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "lr"])
        writer.writerows(curve_rows)

    ckpt = out_dir / "model.ckpt"
    extra = {f"m.{k}": v for k, v in adam.m.items()}
    extra.update({f"v.{k}": v for k, v in adam.v.items()})
    save_checkpoint(ckpt, model, extra_tensors=extra, state={
        "iteration": str(end),
        "adam_t": str(adam.t),
        "adam_skipped": str(adam.skipped),
        "seed": str(seed),
    })
    return TrainResult(checkpoint=ckpt, losses=losses, val_psnrs=val_psnrs)


def validation_psnr(model: BurstSRNet, val_dir: str | Path, cfg: TrainConfig) -> float:
    from .evaluate import psnr

    data = datasets.SampleDataset(val_dir)
    model.eval()
    vals = []
    with torch.no_grad():
        for i in range(min(cfg.val_samples, len(data))):
            ex = data.load_eval_example(i, burst_size=cfg.burst_size)
            flows = ex.flows.unsqueeze(0) if model.cfg.alignment == "flow" else None
            out, _ = model(ex.packed.unsqueeze(0), flows)
            pred = out[0].clamp(0, 1).numpy().transpose(1, 2, 0)
            vals.append(psnr(pred, ex.gt.numpy().transpose(1, 2, 0)))
    return float(np.mean(vals))


def train_synthetic(net_cfg: NetConfig, cfg: TrainConfig, data_dir, out_dir, seed: int = 0,
                    resume=None, val_dir=None) -> TrainResult:
    """Pre-training on synthetic bursts with plain L1 in linear space."""
    cfg = replace(cfg, loss_mode="l1")
    return train(net_cfg, cfg, data_dir, out_dir, seed=seed, resume=resume, val_dir=val_dir)


def finetune_real(cfg: TrainConfig, data_dir, out_dir, init_checkpoint, seed: int = 0,
                  resume=None, val_dir=None) -> TrainResult:
    """Fine-tuning with the misalignment-robust loss, starting from a checkpoint."""
    model_cfg = load_checkpoint(init_checkpoint)[0].cfg
    cfg = replace(cfg, loss_mode="real")
    return train(model_cfg, cfg, data_dir, out_dir, seed=seed,
                 init_checkpoint=init_checkpoint, resume=resume, val_dir=val_dir)


# --- gradient check ----------------------------------------------------------

@dataclass
class NetGradcheckReport:
    worst_tensor: str
    worst_rel_err: float
    warp_image_err: float
    warp_flow_err: float
    tolerance: float
    passed: bool


def net_gradcheck(net_cfg: NetConfig | None = None, n_frames: int = 3, crop: int = 8,
                  tol: float = 1e-3, eps: float = 1e-6, seed: int = 0,
                  atol: float = 1e-6) -> NetGradcheckReport:
    """Directional finite-difference check of d(L1 loss)/d(theta) for every tensor.

    Runs the full forward pass plus loss on a tiny double-precision model.
    Parameters are first nudged off their init symmetry points (zero biases
    with exactly-zero base flow phases sit on ReLU kinks where one-sided
    derivatives differ). Gradients below `atol` are compared with that floor
    in the denominator, since central differences bottom out near 1e-10.
    """
    from .net import tiny_config
    from .flow import flow_gradcheck

    cfg = net_cfg or tiny_config()
    torch.manual_seed(seed)
    model = BurstSRNet(cfg).double()
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.02 * torch.randn(p.shape, generator=gen, dtype=torch.float64))

    h = crop // 2
    packed = torch.rand(1, n_frames, 4, h, h, dtype=torch.float64, generator=gen)
    flows = torch.rand(1, n_frames, h, h, 2, dtype=torch.float64, generator=gen) * 2 - 1
    flows[:, 0] = 0
    up = 2 * cfg.scale
    gt = torch.rand(1, 3, h * up, h * up, dtype=torch.float64, generator=gen)

    def loss_fn():
        out, _ = model(packed, flows)
        return synthetic_loss(out, gt)

    loss = loss_fn()
    loss.backward()

    worst_name, worst = "", 0.0
    for name, p in model.named_parameters():
        v = torch.randn(p.shape, generator=gen, dtype=torch.float64)
        v /= v.norm()
        analytic = float((p.grad * v).sum())
        with torch.no_grad():
            p.add_(eps * v)
            lp = float(loss_fn())
            p.add_(-2 * eps * v)
            lm = float(loss_fn())
            p.add_(eps * v)
        fd = (lp - lm) / (2 * eps)
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), atol)
        if rel > worst:
            worst_name, worst = name, rel

    rng = np.random.default_rng(seed)
    wrep = flow_gradcheck(rng.standard_normal((8, 8)),
                          rng.uniform(-1.5, 1.5, (8, 8, 2)), tol=tol)
    return NetGradcheckReport(
        worst_tensor=worst_name,
        worst_rel_err=worst,
        warp_image_err=wrep.max_rel_err_image,
        warp_flow_err=wrep.max_rel_err_flow,
        tolerance=tol,
        passed=bool(worst < tol and wrep.max_rel_err_image < tol and wrep.max_rel_err_flow < tol),
    )
