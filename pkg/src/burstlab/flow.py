"""Dense flow fields, differentiable backward warping, and flow estimation.

Flow convention used everywhere in this package: a field f on the target
grid maps output pixel p to the sampling location p + f(p) in the source
image (backward warping, bilinear kernel, replicate boundary). Components
are stored (x, y) = (column, row) displacement in the grid's own pixel
units; for burst frames that grid is the 2x2-packed grid.

The built-in coarse-to-fine Lucas-Kanade estimator plays the role of a
pretrained flow network: it is a frozen black box, no gradients ever flow
through estimation. Gradients do flow through :func:`warp` with respect to
both the image and the flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .common import DataError, DimensionError, UsageError, gaussian_blur, require
from .rawmodel import LinearRGB
from . import tensorio

FLOW_CONVENTION = "backward_xy"


@dataclass
class FlowField:
    """Dense displacement map, h x w x 2, (x, y) order, backward-warp convention."""

    data: np.ndarray

    def __post_init__(self) -> None:
        require(
            self.data.ndim == 3 and self.data.shape[2] == 2,
            DimensionError,
            "flow field must be h x w x 2",
        )
        require(bool(np.isfinite(self.data).all()), DataError, "flow has non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @staticmethod
    def zero(shape: tuple[int, int]) -> "FlowField":
        return FlowField(np.zeros((shape[0], shape[1], 2), dtype=np.float32))


def warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp `x` by `flow` with a bilinear kernel and replicate boundary.

    x: (B, C, H, W) or (C, H, W); flow: (B, H, W, 2) or (H, W, 2) matching
    spatially. out(p) = x(p + flow(p)). Differentiable w.r.t. both inputs;
    at integer sampling locations the flow gradient follows the one-sided
    (right-cell) convention of floor-based interpolation.
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    if x.dim() != 4 or flow.dim() != 4 or flow.shape[-1] != 2:
        raise DimensionError("warp expects (B,C,H,W) input and (B,H,W,2) flow")
    b, _, h, w = x.shape
    if flow.shape[0] != b or flow.shape[1] != h or flow.shape[2] != w:
        raise DimensionError(f"flow shape {tuple(flow.shape)} does not match image {tuple(x.shape)}")

    device, dtype = x.device, x.dtype
    gy, gx = torch.meshgrid(
        torch.arange(h, device=device, dtype=dtype),
        torch.arange(w, device=device, dtype=dtype),
        indexing="ij",
    )
    xs = gx.unsqueeze(0) + flow[..., 0]
    ys = gy.unsqueeze(0) + flow[..., 1]

    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    wx = (xs - x0).unsqueeze(1)
    wy = (ys - y0).unsqueeze(1)

    x0i = x0.long().clamp(0, w - 1)
    x1i = (x0.long() + 1).clamp(0, w - 1)
    y0i = y0.long().clamp(0, h - 1)
    y1i = (y0.long() + 1).clamp(0, h - 1)

    bi = torch.arange(b, device=device).view(b, 1, 1)
    flat = x.permute(0, 2, 3, 1)  # B,H,W,C
    v00 = flat[bi, y0i, x0i].permute(0, 3, 1, 2)
    v01 = flat[bi, y0i, x1i].permute(0, 3, 1, 2)
    v10 = flat[bi, y1i, x0i].permute(0, 3, 1, 2)
    v11 = flat[bi, y1i, x1i].permute(0, 3, 1, 2)

    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    out = top + wy * (bot - top)
    return out.squeeze(0) if squeeze else out


def warp_image(img, flow: FlowField):
    """Numpy convenience wrapper around :func:`warp` for LinearRGB or HW(C) arrays."""
    wrapped = isinstance(img, LinearRGB)
    data = img.data if wrapped else np.asarray(img)
    chan_last = data.ndim == 3
    arr = data[None] if not chan_last else np.moveaxis(data, -1, 0)
    with torch.no_grad():
        out = warp(torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64)),
                   torch.from_numpy(flow.data.astype(np.float64))).numpy()
    out = np.moveaxis(out, 0, -1) if chan_last else out[0]
    out = out.astype(data.dtype)
    return LinearRGB(out, clipped=False) if wrapped else out


def resize_flow(flow: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize a flow map and rescale its displacement values."""
    from scipy.ndimage import map_coordinates

    h, w = flow.shape[:2]
    nh, nw = shape
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((nh, nw, 2), dtype=flow.dtype)
    out[..., 0] = map_coordinates(flow[..., 0], grid, order=1, mode="nearest") * (nw / w)
    out[..., 1] = map_coordinates(flow[..., 1], grid, order=1, mode="nearest") * (nh / h)
    return out


def _to_gray(img: LinearRGB | np.ndarray) -> np.ndarray:
    data = img.data if isinstance(img, LinearRGB) else np.asarray(img)
    gray = data.mean(axis=2) if data.ndim == 3 else data
    gray = gray.astype(np.float64)
    std = gray.std()
    return (gray - gray.mean()) / (std + 1e-8)


def _lk_refine(frame: np.ndarray, base: np.ndarray, flow: np.ndarray,
               iters: int, window_sigma: float, reg: float) -> np.ndarray:
    """Iterative dense Lucas-Kanade updates of `flow` at a single pyramid level."""
    for _ in range(iters):
        warped = warp_image(frame, FlowField(flow.astype(np.float64)))
        ix = np.gradient(warped, axis=1)
        iy = np.gradient(warped, axis=0)
        it = warped - base
        a11 = gaussian_blur(ix * ix, window_sigma)
        a12 = gaussian_blur(ix * iy, window_sigma)
        a22 = gaussian_blur(iy * iy, window_sigma)
        b1 = gaussian_blur(ix * it, window_sigma)
        b2 = gaussian_blur(iy * it, window_sigma)
        lam = reg * (a11 + a22).mean() + 1e-12
        det = (a11 + lam) * (a22 + lam) - a12 * a12
        du = -((a22 + lam) * b1 - a12 * b2) / det
        dv = -((a11 + lam) * b2 - a12 * b1) / det
        step = np.stack([du, dv], axis=-1)
        np.clip(step, -2.0, 2.0, out=step)
        flow = flow + step
    return flow


def pyramidal_flow(frame: LinearRGB | np.ndarray, base: LinearRGB | np.ndarray,
                   levels: int = 3, iters: int = 4,
                   window_sigma: float = 2.0, reg: float = 1e-3) -> FlowField:
    """Coarse-to-fine dense Lucas-Kanade flow such that warp(frame, f) ~ base."""
    f = _to_gray(frame)
    b = _to_gray(base)
    require(f.shape == b.shape, DimensionError, "flow estimation needs equal shapes")

    pyr_f, pyr_b = [f], [b]
    for _ in range(levels - 1):
        prev_f, prev_b = pyr_f[-1], pyr_b[-1]
        if min(prev_f.shape) < 16:
            break
        sm_f = gaussian_blur(prev_f, 1.0)
        sm_b = gaussian_blur(prev_b, 1.0)
        pyr_f.append(sm_f[::2, ::2].copy())
        pyr_b.append(sm_b[::2, ::2].copy())

    flow = np.zeros(pyr_f[-1].shape + (2,), dtype=np.float64)
    for lv in range(len(pyr_f) - 1, -1, -1):
        if lv != len(pyr_f) - 1:
            flow = resize_flow(flow, pyr_f[lv].shape)
        flow = _lk_refine(pyr_f[lv], pyr_b[lv], flow, iters, window_sigma, reg)
    return FlowField(flow.astype(np.float32))


def estimate_flow(frame: LinearRGB, base: LinearRGB, method: str = "pyramidal", *,
                  oracle_flow: FlowField | None = None,
                  external_path: str | Path | None = None) -> FlowField:
    """Dense flow from `frame` to `base` under the backward-warp convention.

    Methods: "pyramidal" (built-in Lucas-Kanade), "oracle" (stored analytic
    flow of a synthetic sample; `oracle_flow` must be supplied), "external"
    (binary flow file on disk, see :func:`load_flow`).
    """
    require(frame.shape == base.shape, DimensionError, "frame/base shapes differ")
    if method == "pyramidal":
        return pyramidal_flow(frame, base)
    if method == "oracle":
        if oracle_flow is None:
            raise DataError("oracle flow method is only valid on synthetic samples")
        return oracle_flow
    if method == "external":
        if external_path is None or not Path(external_path).with_suffix(
                Path(external_path).suffix + ".bin").exists():
            raise DataError(f"external flow file not found: {external_path}")
        return load_flow(external_path)
    raise UsageError(f"unknown flow method: {method}")


def save_flow(base: str | Path, flow: FlowField) -> None:
    tensorio.write_tensor(base, flow.data.astype(np.float32),
                          {"kind": "flow", "convention": FLOW_CONVENTION})


def load_flow(base: str | Path) -> FlowField:
    data, meta = tensorio.read_tensor(base)
    conv = meta.get("convention", FLOW_CONVENTION)
    if conv != FLOW_CONVENTION:
        raise DataError(f"flow file uses convention {conv!r}, expected {FLOW_CONVENTION!r}")
    if data.ndim == 4:  # stacked per-frame flows
        return [FlowField(d) for d in data]
    return FlowField(data)


@dataclass
class GradcheckReport:
    max_rel_err_image: float
    max_rel_err_flow: float
    tolerance: float
    passed: bool
    checked_flow_elements: int


def flow_gradcheck(x: np.ndarray, flow: np.ndarray, tol: float = 1e-4,
                   eps: float = 1e-6, seed: int = 0) -> GradcheckReport:
    """Compare warp's analytic gradients against central finite differences.

    Runs in double precision on a scalar projection of the warp output.
    Flow elements whose sampling coordinate sits on the integer lattice are
    skipped: bilinear interpolation is only one-sided differentiable there.
    """
    rng = np.random.default_rng(seed)
    xt = torch.tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    ft = torch.tensor(np.asarray(flow, dtype=np.float64), requires_grad=True)
    if xt.dim() == 2:
        xt = xt.unsqueeze(0).detach().requires_grad_(True)
    proj = torch.tensor(rng.standard_normal(xt.shape[-2:]))

    def objective(xv: torch.Tensor, fv: torch.Tensor) -> torch.Tensor:
        return (warp(xv, fv) * proj).sum()

    loss = objective(xt, ft)
    gx, gf = torch.autograd.grad(loss, [xt, ft])

    def central_diff(t: torch.Tensor, which: int) -> np.ndarray:
        g = np.zeros(t.shape, dtype=np.float64)
        flat = t.detach().clone().reshape(-1)
        for i in range(flat.numel()):
            for sgn in (1.0, -1.0):
                pert = flat.clone()
                pert[i] += sgn * eps
                args = [xt.detach(), ft.detach()]
                args[which] = pert.reshape(t.shape)
                g.reshape(-1)[i] += sgn * objective(args[0], args[1]).item()
        return g / (2 * eps)

    fd_x = central_diff(xt, 0)
    fd_f = central_diff(ft, 1)

    def rel_err(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
        err = np.abs(a - b) / denom
        if mask is not None:
            err = err[mask]
        return float(err.max()) if err.size else 0.0

    h, w = ft.shape[0], ft.shape[1]
    gy, gx_grid = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([gx_grid + flow[..., 0], gy + flow[..., 1]], axis=-1)
    off_lattice = np.abs(coords - np.round(coords)) > 10 * eps
    mask = np.repeat(off_lattice.all(axis=-1)[..., None], 2, axis=-1)

    err_x = rel_err(gx.numpy(), fd_x)
    err_f = rel_err(gf.numpy(), fd_f, mask)
    return GradcheckReport(
        max_rel_err_image=err_x,
        max_rel_err_flow=err_f,
        tolerance=tol,
        passed=bool(err_x < tol and err_f < tol),
        checked_flow_elements=int(mask.sum()),
    )
