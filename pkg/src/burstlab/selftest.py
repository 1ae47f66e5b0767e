"""Fast built-in property suite; `burstlab selftest` runs every check.

Each check returns silently on success and raises AssertionError with a
diagnostic on failure. The pytest suite wraps the same functions, so CLI
self-testing and CI share one implementation.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from . import dataproc, flow, losses, net, rawmodel, synth
from .evaluate import psnr, ssim


def check_pack_roundtrip() -> None:
    rng = np.random.default_rng(0)
    raw = rawmodel.RawImage(rng.uniform(0, 1, (32, 48)).astype(np.float32))
    back = rawmodel.unpack_bayer(rawmodel.pack_bayer(raw))
    assert np.array_equal(back.data, raw.data), "pack/unpack round trip not exact"


def check_mosaic_layout() -> None:
    rgb = rawmodel.LinearRGB(np.tile(np.array([1.0, 0.5, 0.0], np.float32), (4, 4, 1)))
    raw = rawmodel.mosaic(rgb).data
    expected = np.array([[1.0, 0.5], [0.5, 0.0]], np.float32)
    assert np.array_equal(raw[:2, :2], expected), f"RGGB tile mismatch: {raw[:2, :2]}"


def check_softmax_weights() -> None:
    rng = np.random.default_rng(1)
    raws = torch.tensor(rng.standard_normal((2, 5, 8, 4, 4)))
    w = net.normalize_weights(raws)
    err = (w.sum(dim=1) - 1).abs().max().item()
    assert err < 1e-5, f"weights sum deviates by {err}"
    assert w.min().item() >= 0 and w.max().item() <= 1, "weights outside [0, 1]"


def check_fusion_convexity() -> None:
    rng = np.random.default_rng(2)
    aligned = torch.tensor(rng.standard_normal((1, 4, 6, 5, 5)))
    w = net.normalize_weights(torch.tensor(rng.standard_normal((1, 4, 6, 5, 5))))
    fused = (w * aligned).sum(dim=1)
    lo = aligned.min(dim=1).values - 1e-12
    hi = aligned.max(dim=1).values + 1e-12
    assert bool((fused >= lo).all() and (fused <= hi).all()), "attention fusion not convex"


def check_warp_identities() -> None:
    rng = np.random.default_rng(3)
    x = torch.tensor(rng.standard_normal((1, 2, 6, 7)))
    zero = torch.zeros(1, 6, 7, 2, dtype=x.dtype)
    assert torch.equal(flow.warp(x, zero), x), "zero-flow warp is not the identity"
    one = zero.clone()
    one[..., 0] = 1.0
    shifted = flow.warp(x, one)
    assert torch.equal(shifted[..., :-1], x[..., 1:]), "integer shift not exact"


def check_flow_phase_invariance() -> None:
    torch.manual_seed(4)
    fe = net.FlowEmbed(net.tiny_config())
    f = torch.rand(1, 2, 5, 5) * 4 - 2
    shifted = f + torch.tensor([3.0, -2.0]).view(1, 2, 1, 1)
    diff = (fe(f) - fe(shifted)).abs().max().item()
    assert diff < 1e-6, f"flow embedding not integer-shift invariant: {diff}"
    phase = (torch.tensor([-0.25, 0.0]) - torch.floor(torch.tensor([-0.25, 0.0])))
    assert abs(phase[0].item() - 0.75) < 1e-12, "floor-based modulo convention violated"


def check_icnr_block_constancy() -> None:
    torch.manual_seed(5)
    up = net.SubPixelUp(8, 4, 8)
    up.init_icnr()
    y = up(torch.rand(1, 8, 5, 5))
    blocks = y.reshape(1, 4, 5, 8, 5, 8)
    dev = (blocks - blocks.mean(dim=(3, 5), keepdim=True)).abs().max().item()
    assert dev < 1e-5, f"ICNR output not block-constant: {dev}"


def check_ccm_recovery() -> None:
    rng = np.random.default_rng(6)
    m0 = np.eye(3) + rng.uniform(-0.2, 0.2, (3, 3))
    src = rng.uniform(0, 1, (500, 3))
    fit = losses.estimate_ccm(src, src @ m0.T)
    err = np.abs(fit.m - m0).max()
    assert err < 1e-6, f"ccm recovery error {err}"
    assert not fit.rank_warning, "full-rank fit raised a rank warning"


def check_mask_indicator() -> None:
    rng = np.random.default_rng(7)
    gt = rng.uniform(0, 1, (8, 8, 3))
    base = gt + rng.uniform(-0.1, 0.1, (8, 8, 3))
    tau = 0.05
    mask = losses.compute_mask(gt, base, tau, 4)
    expected = (mask.r_up <= tau).astype(np.float32)
    assert np.array_equal(mask.m, expected), "mask is not the indicator of the error map"


def check_homography_recovery() -> None:
    rng = np.random.default_rng(8)
    h0 = dataproc.Homography(np.eye(3) + np.array(
        [[0.02, 0.01, 3.0], [-0.01, 0.015, -2.0], [1e-5, -1e-5, 0.0]]))
    src = rng.uniform(0, 200, (8, 2))
    fit = dataproc.fit_homography(np.hstack([src, h0.apply(src)]))
    err = np.linalg.norm(fit.apply(src) - h0.apply(src), axis=1).max()
    assert err < 1e-6, f"exact homography recovery error {err}"

    src = rng.uniform(0, 200, (40, 2))
    dst = h0.apply(src)
    bad = dst.copy()
    bad[20:] += rng.uniform(20, 60, (20, 2)) * rng.choice([-1, 1], (20, 2))
    fit = dataproc.fit_homography(np.hstack([src, bad]))
    err = np.linalg.norm(fit.apply(src[:20]) - dst[:20], axis=1).max()
    assert err < 1e-3, f"outlier-robust recovery error {err}"


def check_psnr_ssim_identities() -> None:
    rng = np.random.default_rng(9)
    a = rng.uniform(0, 0.9, (24, 24, 3))
    val = psnr(a, a + 0.1)
    assert abs(val - 20.0) < 1e-9, f"psnr(a, a+0.1) = {val}, expected 20"
    assert psnr(a, a) == math.inf, "psnr of identical images must be the +inf sentinel"
    assert abs(ssim(a, a) - 1.0) < 1e-9, "ssim(x, x) must be 1"


def check_single_frame_softmax() -> None:
    raws = torch.tensor(np.random.default_rng(10).standard_normal((1, 1, 4, 3, 3)))
    w = net.normalize_weights(raws)
    assert torch.equal(w, torch.ones_like(w)), "N=1 softmax must be exactly 1"


CHECKS = [
    ("pack/unpack round trip", check_pack_roundtrip),
    ("mosaic RGGB layout", check_mosaic_layout),
    ("softmax weights sum to 1", check_softmax_weights),
    ("fusion convexity bound", check_fusion_convexity),
    ("warp identity and integer shift", check_warp_identities),
    ("flow embedding modulo-1 invariance", check_flow_phase_invariance),
    ("ICNR block constancy", check_icnr_block_constancy),
    ("CCM exact recovery", check_ccm_recovery),
    ("mask indicator equivalence", check_mask_indicator),
    ("homography recovery and robustness", check_homography_recovery),
    ("PSNR/SSIM identities", check_psnr_ssim_identities),
    ("N=1 softmax is 1", check_single_frame_softmax),
]


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            fn()
            if verbose:
                print(f"PASS {name}")
        except AssertionError as exc:
            ok = False
            print(f"FAIL {name}: {exc}")
    return ok
