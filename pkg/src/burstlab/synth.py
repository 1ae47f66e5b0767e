"""Synthetic RAW burst generation with known motion, noise, and oracle flow.

Pipeline per burst: unprocess the sRGB source to linear camera space, apply
a random rotation+translation per frame at high resolution (frame 1 is
always the identity), bilinearly downsample by the scale factor, add
shot/read noise, mosaic to RGGB, and crop on even pixel boundaries. The
ground truth is the motion-free, noise-free linear image over the same
field of view at full resolution.

Coordinate conventions (used consistently by the oracle flow and by the
training-time augmentation in `datasets`):

* pixel k of a factor-s downsampled image samples the source at
  (k + 0.5) * s - 0.5 (half-pixel aligned grids, per axis);
* a packed pixel x covers RAW columns (2x, 2x+1), so its center sits at
  RAW coordinate 2x + 0.5;
* motion maps points of the base frame to points of frame i:
  g(u) = R(u - c) + c + t with c the full-image center, t in HR pixels.

Oracle flow on the packed grid is then the exact affine
f(x) = hp^{-1}(g(hp(x))) - x where hp sends packed crop coordinates to
source HR coordinates. No estimation is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .common import DataError, DimensionError, UsageError, require
from .flow import FLOW_CONVENTION, FlowField
from .rawmodel import (
    CameraPipelineParams,
    LinearRGB,
    NoiseParams,
    RawImage,
    apply_noise,
    load_raw,
    load_rgb,
    mosaic,
    random_noise_params,
    random_pipeline_params,
    save_raw,
    save_rgb,
    unprocess,
)
from . import tensorio


@dataclass(frozen=True)
class Affine2D:
    """Affine map p -> a @ p + b on (x, y) points."""

    a: np.ndarray
    b: np.ndarray

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return pts @ np.asarray(self.a).T + np.asarray(self.b)

    def compose(self, other: "Affine2D") -> "Affine2D":
        """self after other: (self . other)(p) = self(other(p))."""
        a1, b1 = np.asarray(self.a), np.asarray(self.b)
        a2, b2 = np.asarray(other.a), np.asarray(other.b)
        return Affine2D(a1 @ a2, a1 @ b2 + b1)

    def inv(self) -> "Affine2D":
        ai = np.linalg.inv(np.asarray(self.a))
        return Affine2D(ai, -ai @ np.asarray(self.b))

    @staticmethod
    def identity() -> "Affine2D":
        return Affine2D(np.eye(2), np.zeros(2))

    @staticmethod
    def diag(sx: float, sy: float, bx: float, by: float) -> "Affine2D":
        return Affine2D(np.diag([sx, sy]).astype(np.float64), np.array([bx, by], np.float64))


@dataclass(frozen=True)
class MotionParams:
    """Per-frame camera motion: translation in HR pixels, rotation in degrees."""

    translation: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.translation == (0.0, 0.0) and self.rotation == 0.0


def motion_affine(m: MotionParams, center: tuple[float, float]) -> Affine2D:
    """Content map g of a moved frame: base HR point -> frame HR point."""
    th = math.radians(m.rotation)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    c = np.asarray(center, dtype=np.float64)
    t = np.asarray(m.translation, dtype=np.float64)
    return Affine2D(rot, c + t - rot @ c)


@dataclass
class MotionConfig:
    max_translation: float = 24.0  # HR pixels, sampled U[-max, max] per axis
    max_rotation: float = 1.0      # degrees
    no_shift: bool = False


def sample_motion(rng: np.random.Generator, config: MotionConfig) -> MotionParams:
    """Uniform motion sample; identity when the no-shift regime is active."""
    require(config.max_translation >= 0 and config.max_rotation >= 0,
            UsageError, "motion ranges must be >= 0")
    if config.no_shift:
        return MotionParams()
    tx = float(rng.uniform(-config.max_translation, config.max_translation))
    ty = float(rng.uniform(-config.max_translation, config.max_translation))
    rot = float(rng.uniform(-config.max_rotation, config.max_rotation))
    return MotionParams(translation=(tx, ty), rotation=rot)


def _sample_affine(img: np.ndarray, aff: Affine2D) -> np.ndarray:
    """Evaluate img at aff(grid) with bilinear interpolation, replicate boundary."""
    h, w = img.shape[:2]
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    src = aff(pts)
    coords = [src[:, 1].reshape(h, w), src[:, 0].reshape(h, w)]  # row, col
    if img.ndim == 2:
        return map_coordinates(img, coords, order=1, mode="nearest")
    out = np.empty_like(img, dtype=np.float64)
    for c in range(img.shape[2]):
        out[..., c] = map_coordinates(img[..., c], coords, order=1, mode="nearest")
    return out


def apply_motion(img: LinearRGB, m: MotionParams) -> LinearRGB:
    """Rotate about the image center, then translate; bilinear, replicate boundary."""
    if m.is_identity:
        return LinearRGB(img.data.copy(), clipped=img.clipped)
    h, w = img.shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    sampling = motion_affine(m, center).inv()
    out = _sample_affine(img.data.astype(np.float64), sampling)
    return LinearRGB(out.astype(img.data.dtype), clipped=False)


def downsample(img: LinearRGB, s: int) -> LinearRGB:
    """Bilinear decimation by integer factor s on the half-pixel aligned grid."""
    require(s >= 1, UsageError, "scale must be >= 1")
    if s == 1:
        return LinearRGB(img.data.copy(), clipped=img.clipped)
    h, w = img.shape
    require(h % s == 0 and w % s == 0, DimensionError,
            f"dims {h}x{w} not divisible by scale {s}")
    ys = (np.arange(h // s) + 0.5) * s - 0.5
    xs = (np.arange(w // s) + 0.5) * s - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((h // s, w // s, 3), dtype=np.float64)
    for c in range(3):
        out[..., c] = map_coordinates(img.data[..., c].astype(np.float64), grid,
                                      order=1, mode="nearest")
    return LinearRGB(out.astype(img.data.dtype), clipped=img.clipped)


def packed_to_hr(crop_origin: tuple[int, int], s: int) -> Affine2D:
    """Packed crop coordinates -> source HR coordinates (centers of 2x2 blocks)."""
    ox, oy = crop_origin
    return Affine2D.diag(2 * s, 2 * s, (ox + 1) * s - 0.5, (oy + 1) * s - 0.5)


def oracle_flow(m: MotionParams, s: int, grid_shape: tuple[int, int],
                crop_origin: tuple[int, int] = (0, 0),
                center: tuple[float, float] = (0.0, 0.0),
                packed_map: Affine2D | None = None) -> FlowField:
    """Analytic base->frame flow on the packed grid for an affine frame motion.

    `packed_map` overrides the default crop mapping (used by augmentation to
    account for flips); otherwise it is derived from `crop_origin`.
    """
    if m.is_identity:
        return FlowField.zero(grid_shape)
    hp = packed_map if packed_map is not None else packed_to_hr(crop_origin, s)
    g = motion_affine(m, center)
    p = hp.inv().compose(g).compose(hp)  # packed -> packed position in frame i
    h, w = grid_shape
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    disp = p(pts) - pts
    return FlowField(disp.reshape(h, w, 2).astype(np.float32))


@dataclass
class SynthConfig:
    burst_size: int = 8
    scale: int = 4
    crop: int = 96  # RAW pixels, even
    motion: MotionConfig = field(default_factory=MotionConfig)
    shot_range: tuple[float, float] = (1e-4, 1e-2)
    read_range: tuple[float, float] = (1e-6, 1e-4)
    zero_noise: bool = False
    random_pipeline: bool = True

    def __post_init__(self) -> None:
        require(self.burst_size >= 1, UsageError, "burst size must be >= 1")
        require(self.crop % 2 == 0, UsageError, "crop must be even to keep CFA phase")
        require(self.scale >= 1, UsageError, "scale must be >= 1")


@dataclass
class SampleMeta:
    scale: int
    crop_origin: tuple[int, int]          # (x, y) in RAW pixels of the source
    hr_size: tuple[int, int]              # (width, height) of the source HR image
    motions: list[MotionParams]
    noise: NoiseParams
    pipeline: CameraPipelineParams

    @property
    def center(self) -> tuple[float, float]:
        w, h = self.hr_size
        return ((w - 1) / 2.0, (h - 1) / 2.0)


@dataclass
class BurstSample:
    frames: list[RawImage]
    gt: LinearRGB
    oracle_flows: list[FlowField]
    meta: SampleMeta

    def __post_init__(self) -> None:
        require(len(self.frames) >= 1, DataError, "burst needs at least one frame")
        require(self.meta.motions[0].is_identity, DataError, "frame 1 must have identity motion")
        require(float(np.abs(self.oracle_flows[0].data).max()) == 0.0,
                DataError, "frame 1 must have zero oracle flow")

    @property
    def burst_size(self) -> int:
        return len(self.frames)


def sample_noise_params(rng: np.random.Generator, config: SynthConfig) -> NoiseParams:
    if config.zero_noise:
        return NoiseParams(0.0, 0.0)
    return random_noise_params(rng, config.shot_range, config.read_range)


def generate_burst(srgb: LinearRGB, n: int, s: int, rng: np.random.Generator,
                   config: SynthConfig | None = None) -> BurstSample:
    """Generate one synthetic burst plus ground truth and oracle flows."""
    config = replace(config, burst_size=n, scale=s) if config else SynthConfig(burst_size=n, scale=s)
    hr_h, hr_w = srgb.shape
    require(hr_h % (2 * s) == 0 and hr_w % (2 * s) == 0, DimensionError,
            f"source dims must be divisible by 2*scale, got {hr_h}x{hr_w}")

    rot_slack = math.sin(math.radians(config.motion.max_rotation)) * math.hypot(hr_h, hr_w) / 2
    margin_raw = int(math.ceil((config.motion.max_translation + rot_slack) / s)) + 1
    margin_raw += margin_raw % 2
    lr_h, lr_w = hr_h // s, hr_w // s
    max_oy = lr_h - config.crop - margin_raw
    max_ox = lr_w - config.crop - margin_raw
    if max_oy < margin_raw or max_ox < margin_raw:
        raise DimensionError(
            f"source {hr_h}x{hr_w} too small for crop {config.crop} at scale {s} "
            f"with margin {margin_raw} RAW px")

    pipeline = random_pipeline_params(rng) if config.random_pipeline else \
        CameraPipelineParams.identity()
    linear, pipeline = unprocess(srgb, pipeline)
    noise = sample_noise_params(rng, config)
    motions = [MotionParams()] + [sample_motion(rng, config.motion) for _ in range(n - 1)]

    oy = 2 * int(rng.integers(margin_raw // 2, max_oy // 2 + 1))
    ox = 2 * int(rng.integers(margin_raw // 2, max_ox // 2 + 1))

    meta = SampleMeta(scale=s, crop_origin=(ox, oy), hr_size=(hr_w, hr_h),
                      motions=motions, noise=noise, pipeline=pipeline)

    frames: list[RawImage] = []
    flows: list[FlowField] = []
    grid = (config.crop // 2, config.crop // 2)
    for m in motions:
        moved = apply_motion(linear, m)
        lr = downsample(moved, s)
        noisy = apply_noise(lr, noise, rng)
        raw = mosaic(noisy)
        frames.append(RawImage(raw.data[oy:oy + config.crop, ox:ox + config.crop].copy()))
        flows.append(oracle_flow(m, s, grid, (ox, oy), meta.center))

    gt = LinearRGB(
        linear.data[oy * s:(oy + config.crop) * s, ox * s:(ox + config.crop) * s].copy(),
        clipped=True,
    )
    return BurstSample(frames=frames, gt=gt, oracle_flows=flows, meta=meta)


# --- dataset serialization -------------------------------------------------

def write_sample(directory: str | Path, sample: BurstSample) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(sample.frames):
        save_raw(directory / f"frame_{i:02d}", frame, sample.meta.noise)
    save_rgb(directory / "gt", sample.gt)
    stacked = np.stack([f.data for f in sample.oracle_flows]).astype(np.float32)
    tensorio.write_tensor(directory / "flows", stacked,
                          {"kind": "flow", "convention": FLOW_CONVENTION})

    m = sample.meta
    lines = [
        f"n_frames={len(sample.frames)}",
        f"scale={m.scale}",
        f"crop_origin_x={m.crop_origin[0]}",
        f"crop_origin_y={m.crop_origin[1]}",
        f"hr_width={m.hr_size[0]}",
        f"hr_height={m.hr_size[1]}",
        f"noise_shot={m.noise.shot!r}",
        f"noise_read={m.noise.read!r}",
        f"red_gain={m.pipeline.red_gain!r}",
        f"blue_gain={m.pipeline.blue_gain!r}",
        f"apply_tone={int(m.pipeline.apply_tone)}",
        f"gamma={m.pipeline.gamma!r}",
        "ccm=" + " ".join(repr(float(v)) for v in m.pipeline.ccm_srgb_to_cam.ravel()),
    ]
    for i, mo in enumerate(m.motions):
        lines.append(f"motion_{i:02d}={mo.translation[0]!r} {mo.translation[1]!r} {mo.rotation!r}")
    (directory / "meta.txt").write_text("\n".join(lines) + "\n")


def read_meta(directory: str | Path) -> tuple[SampleMeta, int]:
    directory = Path(directory)
    path = directory / "meta.txt"
    if not path.exists():
        raise DataError(f"missing sample metadata: {path}")
    kv: dict[str, str] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    n = int(kv["n_frames"])
    motions = []
    for i in range(n):
        tx, ty, rot = (float(v) for v in kv[f"motion_{i:02d}"].split())
        motions.append(MotionParams(translation=(tx, ty), rotation=rot))
    ccm = np.array([float(v) for v in kv["ccm"].split()]).reshape(3, 3)
    meta = SampleMeta(
        scale=int(kv["scale"]),
        crop_origin=(int(kv["crop_origin_x"]), int(kv["crop_origin_y"])),
        hr_size=(int(kv["hr_width"]), int(kv["hr_height"])),
        motions=motions,
        noise=NoiseParams(float(kv["noise_shot"]), float(kv["noise_read"])),
        pipeline=CameraPipelineParams(
            red_gain=float(kv["red_gain"]),
            blue_gain=float(kv["blue_gain"]),
            ccm_srgb_to_cam=ccm,
            apply_tone=bool(int(kv["apply_tone"])),
            gamma=float(kv["gamma"]),
        ),
    )
    return meta, n


def read_sample(directory: str | Path) -> BurstSample:
    directory = Path(directory)
    meta, n = read_meta(directory)
    frames = [load_raw(directory / f"frame_{i:02d}")[0] for i in range(n)]
    gt = load_rgb(directory / "gt")
    stacked, _ = tensorio.read_tensor(directory / "flows")
    flows = [FlowField(stacked[i]) for i in range(n)]
    return BurstSample(frames=frames, gt=gt, oracle_flows=flows, meta=meta)


def sample_dirs(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.txt").exists())
    if not dirs:
        raise DataError(f"no samples found under {root}")
    return dirs
