"""Pairing pipeline for real burst/HR-reference data.

Mirrors the processing used to turn raw phone bursts plus a tripod
reference into training pairs: estimate a global homography from block-match
correspondences, crop the matching field of view, slide fixed-size crops
with half-crop stride, re-fit a local homography per crop, and keep only
crops whose normalized cross correlation against the reference clears 0.9.

Feature descriptors are deliberately out of scope: a grid-seeded,
multi-scale NCC block matcher provides correspondences, and externally
computed correspondence files can be substituted for real data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .common import DataError, DimensionError, NumericError, UsageError, gaussian_blur, require
from .rawmodel import LinearRGB, RawImage, pack_bayer, rgb_proxy
from .synth import downsample
from .losses import upsample_bilinear


@dataclass
class Homography:
    """3x3 projective transform, normalized so h[2,2] = 1."""

    h: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.h, dtype=np.float64)
        require(m.shape == (3, 3), DimensionError, "homography must be 3x3")
        require(abs(np.linalg.det(m)) > 1e-12, NumericError, "homography is singular")
        object.__setattr__(self, "h", m / m[2, 2])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 2) xy points."""
        ph = np.hstack([pts, np.ones((len(pts), 1))])
        q = ph @ self.h.T
        return q[:, :2] / q[:, 2:3]

    def inv(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean, unit-norm correlation in [-1, 1]. Errors on constant input."""
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    require(av.shape == bv.shape, DimensionError, "ncc needs equal shapes")
    av = av - av.mean()
    bv = bv - bv.mean()
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise DataError("ncc undefined for constant input")
    return float(np.clip(av @ bv / (na * nb), -1.0, 1.0))


def _to_gray(img: LinearRGB | np.ndarray) -> np.ndarray:
    data = img.data if isinstance(img, LinearRGB) else np.asarray(img)
    return data.mean(axis=2).astype(np.float64) if data.ndim == 3 else data.astype(np.float64)


@dataclass
class MatchConfig:
    patch: int = 16
    grid_step: int = 16
    search: int = 12          # +- pixels at the coarsest level
    levels: int = 3
    min_std: float = 1e-3
    min_score: float = 0.55
    min_matches: int = 8


def _best_offset(patch: np.ndarray, win: np.ndarray) -> tuple[int, int, float]:
    """Exhaustive NCC of `patch` over all placements inside `win`."""
    ph, pw = patch.shape
    p = patch - patch.mean()
    pn = np.linalg.norm(p)
    best = (0, 0, -2.0)
    for dy in range(win.shape[0] - ph + 1):
        for dx in range(win.shape[1] - pw + 1):
            cand = win[dy:dy + ph, dx:dx + pw]
            c = cand - cand.mean()
            cn = np.linalg.norm(c)
            if cn < 1e-9 or pn < 1e-9:
                continue
            score = float((p * c).sum() / (pn * cn))
            if score > best[2]:
                best = (dx, dy, score)
    return best


def match_correspondences(a: LinearRGB, b: LinearRGB,
                          config: MatchConfig | None = None) -> np.ndarray:
    """Grid-seeded multi-scale block matching; returns (N, 4) rows (xa, ya, xb, yb).

    Coarse-to-fine: a downsampled pass locates each patch to within a couple
    of pixels, then the full-resolution pass refines in a narrow window.
    Raises when fewer than `min_matches` textured patches match.
    """
    cfg = config or MatchConfig()
    ga, gb = _to_gray(a), _to_gray(b)
    require(ga.shape == gb.shape, DimensionError, "match inputs must share shape")
    pairs = []
    half = cfg.patch // 2
    scale = 2 ** (cfg.levels - 1)
    ca = gaussian_blur(ga, scale / 2.0)[::scale, ::scale]
    cb = gaussian_blur(gb, scale / 2.0)[::scale, ::scale]
    for cy in range(half + cfg.search, ga.shape[0] - half - cfg.search, cfg.grid_step):
        for cx in range(half + cfg.search, ga.shape[1] - half - cfg.search, cfg.grid_step):
            patch = ga[cy - half:cy + half, cx - half:cx + half]
            if patch.std() < cfg.min_std:
                continue
            # coarse search
            qy, qx = cy // scale, cx // scale
            hc = max(2, half // scale)
            sc = max(2, cfg.search // scale + 1)
            cpatch = ca[qy - hc:qy + hc, qx - hc:qx + hc]
            y0, x0 = qy - hc - sc, qx - hc - sc
            if y0 < 0 or x0 < 0 or qy + hc + sc > cb.shape[0] or qx + hc + sc > cb.shape[1]:
                continue
            win = cb[y0:qy + hc + sc, x0:qx + hc + sc]
            dx, dy, _ = _best_offset(cpatch, win)
            off_x, off_y = (x0 + dx - (qx - hc)) * scale, (y0 + dy - (qy - hc)) * scale
            # fine refinement around the coarse estimate
            ref = 3
            by0, bx0 = cy - half + off_y - ref, cx - half + off_x - ref
            by1, bx1 = cy + half + off_y + ref, cx + half + off_x + ref
            if by0 < 0 or bx0 < 0 or by1 > gb.shape[0] or bx1 > gb.shape[1]:
                continue
            dx, dy, score = _best_offset(patch, gb[by0:by1, bx0:bx1])
            if score < cfg.min_score:
                continue
            pairs.append((cx, cy, bx0 + dx + half, by0 + dy + half, score))
    if len(pairs) < cfg.min_matches:
        raise DataError(f"too few correspondences: {len(pairs)} < {cfg.min_matches}")
    pairs.sort(key=lambda r: -r[4])
    return np.array([(r[0], r[1], r[2], r[3]) for r in pairs], dtype=np.float64)


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform with Hartley normalization; >= 4 point pairs."""

    def normalize(pts):
        c = pts.mean(axis=0)
        d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
        s = np.sqrt(2.0) / max(d, 1e-12)
        t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
        ph = np.hstack([pts, np.ones((len(pts), 1))]) @ t.T
        return ph[:, :2], t

    ns, ts = normalize(src)
    nd, td = normalize(dst)
    rows = []
    for (x, y), (xp, yp) in zip(ns, nd):
        rows.append([-x, -y, -1, 0, 0, 0, x * xp, y * xp, xp])
        rows.append([0, 0, 0, -x, -y, -1, x * yp, y * yp, yp])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    return h / h[2, 2]


@dataclass
class RansacConfig:
    iterations: int = 1000
    inlier_threshold: float = 2.0  # px reprojection
    min_inlier_ratio: float = 0.25
    seed: int = 0


def fit_homography(pairs: np.ndarray, config: RansacConfig | None = None) -> Homography:
    """RANSAC over 4-point DLT hypotheses with a final least-squares refit."""
    cfg = config or RansacConfig()
    pairs = np.asarray(pairs, dtype=np.float64)
    require(pairs.ndim == 2 and pairs.shape[1] == 4, DimensionError,
            "pairs must be (N, 4) rows (xa, ya, xb, yb)")
    n = len(pairs)
    require(n >= 4, DataError, f"homography needs >= 4 pairs, got {n}")
    src, dst = pairs[:, :2], pairs[:, 2:]

    rng = np.random.default_rng(cfg.seed)
    best_inliers = np.zeros(n, dtype=bool)
    for _ in range(cfg.iterations):
        idx = rng.choice(n, 4, replace=False)
        try:
            h = _dlt(src[idx], dst[idx])
        except np.linalg.LinAlgError:
            continue
        if abs(np.linalg.det(h)) < 1e-12:
            continue
        err = np.linalg.norm(Homography(h).apply(src) - dst, axis=1)
        inliers = err < cfg.inlier_threshold
        if inliers.sum() > best_inliers.sum():
            best_inliers = inliers
    if best_inliers.sum() < max(4, cfg.min_inlier_ratio * n):
        raise DataError(
            f"homography fit failed: {int(best_inliers.sum())}/{n} inliers")
    return Homography(_dlt(src[best_inliers], dst[best_inliers]))


def warp_homography(img: LinearRGB, hom: Homography) -> LinearRGB:
    """Backward bilinear warp under the inverse map, replicate boundary."""
    from scipy.ndimage import map_coordinates

    data = img.data.astype(np.float64)
    h, w = data.shape[:2]
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    src = hom.inv().apply(pts)
    coords = [src[:, 1].reshape(h, w), src[:, 0].reshape(h, w)]
    out = np.empty_like(data)
    for c in range(data.shape[2]):
        out[..., c] = map_coordinates(data[..., c], coords, order=1, mode="nearest")
    return LinearRGB(out.astype(img.data.dtype), clipped=img.clipped)


@dataclass
class CropPair:
    burst_crop: list[RawImage]
    gt_crop: LinearRGB
    ncc: float
    local_h: Homography
    origin: tuple[int, int]  # (x, y) RAW pixels in the source burst


@dataclass
class ExtractConfig:
    crop: int = 160
    stride: int = 80
    ncc_threshold: float = 0.9
    smooth_sigma: float = 1.0
    local_refit: bool = True


def extract_pairs(burst: list[RawImage], gt_hr: LinearRGB, s: int,
                  config: ExtractConfig | None = None) -> list[CropPair]:
    """Sliding-window crop pairs from a globally pre-aligned (burst, reference).

    gt_hr must already cover the burst's field of view at s x RAW
    resolution. Crops start on even RAW offsets (stride must be even) to
    preserve the CFA phase. Each retained pair carries the local homography
    and its NCC score; pairs below the threshold are dropped.
    """
    cfg = config or ExtractConfig()
    require(cfg.crop % 2 == 0 and cfg.stride % 2 == 0, UsageError,
            "crop and stride must be even (CFA phase)")
    raw_h, raw_w = burst[0].shape
    require(gt_hr.shape == (raw_h * s, raw_w * s), DimensionError,
            "reference must be s x RAW resolution over the same field of view")

    pairs: list[CropPair] = []
    for oy in range(0, raw_h - cfg.crop + 1, cfg.stride):
        for ox in range(0, raw_w - cfg.crop + 1, cfg.stride):
            crops = [RawImage(f.data[oy:oy + cfg.crop, ox:ox + cfg.crop].copy())
                     for f in burst]
            gt_region = LinearRGB(np.ascontiguousarray(
                gt_hr.data[oy * s:(oy + cfg.crop) * s, ox * s:(ox + cfg.crop) * s]),
                clipped=gt_hr.clipped)

            proxy = rgb_proxy(pack_bayer(crops[0]))
            proxy_up = LinearRGB(upsample_bilinear(proxy.data, 2 * s).astype(np.float32),
                                 clipped=False)
            local_h = Homography.identity()
            if cfg.local_refit:
                try:
                    matches = match_correspondences(gt_region, proxy_up)
                    local_h = fit_homography(matches)
                    gt_region = warp_homography(gt_region, local_h)
                except (DataError, NumericError):
                    pass  # fall back to global alignment for this crop

            gt_lr = downsample(gt_region, 2 * s)
            a = gaussian_blur(_to_gray(proxy), cfg.smooth_sigma)
            b = gaussian_blur(_to_gray(gt_lr), cfg.smooth_sigma)
            try:
                score = ncc(a, b)
            except DataError:
                continue
            if score >= cfg.ncc_threshold:
                pairs.append(CropPair(burst_crop=crops, gt_crop=gt_region, ncc=score,
                                      local_h=local_h, origin=(ox, oy)))
    return pairs
