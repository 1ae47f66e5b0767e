"""Bayer RAW data model and the synthetic camera pipeline.

The CFA is fixed RGGB. Packing rearranges every 2x2 Bayer tile into a
4-channel pixel (R, Gr, Gb, B) at half resolution, which keeps convolutions
translation-consistent on mosaicked data. The forward/inverse pipeline
(white balance, color matrix, gamma, tone curve) follows the usual
unprocessing recipe with all sampled parameters recorded per image so the
forward transform is exactly recoverable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .common import DataError, DimensionError, UsageError, require
from . import tensorio

CFA_RGGB = "RGGB"
PACKED_CHANNELS = ("R", "Gr", "Gb", "B")


@dataclass
class RawImage:
    """Mosaicked linear sensor values, H x W, nominally in [0, 1]."""

    data: np.ndarray
    pattern: str = CFA_RGGB
    black_level: float = 0.0
    white_level: float = 1.0

    def __post_init__(self) -> None:
        require(self.data.ndim == 2, DimensionError, "raw image must be H x W")
        h, w = self.data.shape
        require(h % 2 == 0 and w % 2 == 0, DimensionError, f"raw dims must be even, got {h}x{w}")
        require(self.pattern == CFA_RGGB, UsageError, f"only {CFA_RGGB} is supported")
        require(bool(np.isfinite(self.data).all()), DataError, "raw image has non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class PackedFrame:
    """2x2-packed Bayer data, (H/2) x (W/2) x 4, channel order (R, Gr, Gb, B)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        require(
            self.data.ndim == 3 and self.data.shape[2] == 4,
            DimensionError,
            "packed frame must be h x w x 4",
        )
        require(bool(np.isfinite(self.data).all()), DataError, "packed frame has non-finite values")


@dataclass
class LinearRGB:
    """Linear-space RGB image, h x w x 3. `clipped` marks values bounded to [0, 1]."""

    data: np.ndarray
    clipped: bool = True

    def __post_init__(self) -> None:
        require(
            self.data.ndim == 3 and self.data.shape[2] == 3,
            DimensionError,
            "rgb image must be h x w x 3",
        )
        require(bool(np.isfinite(self.data).all()), DataError, "rgb image has non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True)
class NoiseParams:
    """Gaussian approximation of sensor noise: variance = read + shot * signal."""

    shot: float
    read: float

    def __post_init__(self) -> None:
        require(self.shot >= 0.0 and self.read >= 0.0, UsageError, "noise params must be >= 0")


# Gentle sRGB->camera matrices (rows sum to 1). Random pipelines mix these
# convexly, so the sampled matrix keeps row sums and stays well conditioned.
_CCM_BANK = np.array(
    [
        [[0.74, 0.22, 0.04], [0.10, 0.78, 0.12], [0.04, 0.20, 0.76]],
        [[0.82, 0.14, 0.04], [0.16, 0.70, 0.14], [0.08, 0.16, 0.76]],
        [[0.68, 0.26, 0.06], [0.08, 0.80, 0.12], [0.06, 0.26, 0.68]],
        [[0.78, 0.16, 0.06], [0.12, 0.74, 0.14], [0.04, 0.12, 0.84]],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class CameraPipelineParams:
    """Parameters tying the linear camera space to the observed sRGB image."""

    red_gain: float = 1.0
    blue_gain: float = 1.0
    ccm_srgb_to_cam: np.ndarray = field(default_factory=lambda: np.eye(3))
    apply_tone: bool = True
    gamma: float = 2.2

    def __post_init__(self) -> None:
        require(self.red_gain > 0 and self.blue_gain > 0, UsageError, "gains must be positive")
        ccm = np.asarray(self.ccm_srgb_to_cam, dtype=np.float64)
        require(ccm.shape == (3, 3), DimensionError, "ccm must be 3x3")
        require(
            bool(np.all(np.abs(ccm.sum(axis=1) - 1.0) <= 1e-6)),
            UsageError,
            "ccm rows must sum to 1 within 1e-6",
        )
        object.__setattr__(self, "ccm_srgb_to_cam", ccm)

    @property
    def gains(self) -> np.ndarray:
        return np.array([self.red_gain, 1.0, self.blue_gain], dtype=np.float64)

    @staticmethod
    def identity() -> "CameraPipelineParams":
        return CameraPipelineParams(apply_tone=False, gamma=1.0)


def identity_pipeline() -> CameraPipelineParams:
    return CameraPipelineParams.identity()


def random_pipeline_params(rng: np.random.Generator) -> CameraPipelineParams:
    """Sample white-balance gains in [1.5, 2.5] and a convex mix of the CCM bank."""
    weights = rng.dirichlet(np.ones(len(_CCM_BANK)))
    ccm = np.tensordot(weights, _CCM_BANK, axes=1)
    return CameraPipelineParams(
        red_gain=float(rng.uniform(1.5, 2.5)),
        blue_gain=float(rng.uniform(1.5, 2.5)),
        ccm_srgb_to_cam=ccm,
    )


def random_noise_params(
    rng: np.random.Generator,
    shot_range: tuple[float, float] = (1e-4, 1e-2),
    read_range: tuple[float, float] = (1e-6, 1e-4),
) -> NoiseParams:
    """Log-uniform shot/read variance parameters."""

    def log_uniform(lo: float, hi: float) -> float:
        require(0 < lo <= hi, UsageError, "noise range must satisfy 0 < lo <= hi")
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    return NoiseParams(shot=log_uniform(*shot_range), read=log_uniform(*read_range))


def pack_bayer(raw: RawImage) -> PackedFrame:
    """Rearrange each 2x2 RGGB tile into one 4-channel pixel at half resolution."""
    d = raw.data
    packed = np.stack([d[0::2, 0::2], d[0::2, 1::2], d[1::2, 0::2], d[1::2, 1::2]], axis=-1)
    return PackedFrame(packed)


def unpack_bayer(packed: PackedFrame) -> RawImage:
    """Exact inverse of :func:`pack_bayer`."""
    p = packed.data
    h, w = p.shape[:2]
    raw = np.empty((2 * h, 2 * w), dtype=p.dtype)
    raw[0::2, 0::2] = p[..., 0]
    raw[0::2, 1::2] = p[..., 1]
    raw[1::2, 0::2] = p[..., 2]
    raw[1::2, 1::2] = p[..., 3]
    return RawImage(raw)


def mosaic(rgb: LinearRGB) -> RawImage:
    """Keep one color per pixel according to the RGGB layout."""
    d = rgb.data
    h, w = d.shape[:2]
    require(h % 2 == 0 and w % 2 == 0, DimensionError, f"mosaic needs even dims, got {h}x{w}")
    raw = np.empty((h, w), dtype=d.dtype)
    raw[0::2, 0::2] = d[0::2, 0::2, 0]
    raw[0::2, 1::2] = d[0::2, 1::2, 1]
    raw[1::2, 0::2] = d[1::2, 0::2, 1]
    raw[1::2, 1::2] = d[1::2, 1::2, 2]
    return RawImage(raw)


def rgb_proxy(packed: PackedFrame) -> LinearRGB:
    """3-channel stand-in (R, Gr, B) at packed resolution; Gb is dropped."""
    return LinearRGB(packed.data[..., (0, 1, 3)].copy(), clipped=True)


def apply_noise(img, params: NoiseParams, rng: np.random.Generator):
    """Add heteroscedastic Gaussian noise, variance read + shot * signal, then clip.

    Accepts a RawImage or LinearRGB and returns the same type. With zero
    parameters the input is returned unchanged (bit-exact).
    """
    if params.shot == 0.0 and params.read == 0.0:
        return img
    data = img.data
    var = params.read + params.shot * np.clip(data, 0.0, 1.0)
    noisy = data + rng.standard_normal(data.shape) * np.sqrt(var)
    noisy = np.clip(noisy, 0.0, 1.0).astype(data.dtype)
    if isinstance(img, RawImage):
        return RawImage(noisy, img.pattern, img.black_level, img.white_level)
    return LinearRGB(noisy, clipped=True)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return 3.0 * x**2 - 2.0 * x**3


def _inv_smoothstep(y: np.ndarray) -> np.ndarray:
    y = np.clip(y, 0.0, 1.0)
    return 0.5 - np.sin(np.arcsin(1.0 - 2.0 * y) / 3.0)


def unprocess(
    srgb: LinearRGB,
    params: CameraPipelineParams | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[LinearRGB, CameraPipelineParams]:
    """Map an sRGB-encoded image back to linear camera space.

    Order: inverse tone curve, inverse gamma, sRGB->camera color matrix,
    inverse white-balance gains. When `params` is None a random pipeline is
    sampled from `rng`. Returns the linear image and the params needed by
    :func:`process` to reproduce the input.
    """
    if params is None:
        require(rng is not None, UsageError, "unprocess needs params or an rng to sample them")
        params = random_pipeline_params(rng)
    x = srgb.data.astype(np.float64)
    if params.apply_tone:
        x = _inv_smoothstep(x)
    if params.gamma != 1.0:
        x = np.clip(x, 0.0, 1.0) ** params.gamma
    x = x @ params.ccm_srgb_to_cam.T
    x = x / params.gains
    x = np.clip(x, 0.0, 1.0)
    return LinearRGB(x.astype(srgb.data.dtype), clipped=True), params


def process(linear: LinearRGB, params: CameraPipelineParams) -> LinearRGB:
    """Forward camera pipeline; inverse of :func:`unprocess` away from clipping."""
    x = linear.data.astype(np.float64) * params.gains
    x = x @ np.linalg.inv(params.ccm_srgb_to_cam).T
    if params.gamma != 1.0:
        x = np.clip(x, 0.0, 1.0) ** (1.0 / params.gamma)
    if params.apply_tone:
        x = _smoothstep(x)
    x = np.clip(x, 0.0, 1.0)
    return LinearRGB(x.astype(linear.data.dtype), clipped=True)


def save_raw(base: str | Path, raw: RawImage, noise: NoiseParams | None = None) -> None:
    meta = {"kind": "raw", "cfa": raw.pattern}
    if noise is not None:
        meta["noise_shot"] = repr(noise.shot)
        meta["noise_read"] = repr(noise.read)
    tensorio.write_tensor(base, raw.data.astype(np.float32), meta)


def load_raw(base: str | Path) -> tuple[RawImage, NoiseParams | None]:
    data, meta = tensorio.read_tensor(base)
    if meta.get("kind", "raw") != "raw":
        raise DataError(f"{base} is not a raw tensor (kind={meta.get('kind')})")
    noise = None
    if "noise_shot" in meta:
        noise = NoiseParams(float(meta["noise_shot"]), float(meta["noise_read"]))
    return RawImage(data, meta.get("cfa", CFA_RGGB)), noise


def save_packed(base: str | Path, packed: PackedFrame) -> None:
    meta = {"kind": "packed", "cfa": CFA_RGGB, "channel_order": ",".join(PACKED_CHANNELS)}
    tensorio.write_tensor(base, packed.data.astype(np.float32), meta)


def save_rgb(base: str | Path, rgb: LinearRGB) -> None:
    tensorio.write_tensor(base, rgb.data.astype(np.float32), {"kind": "rgb"})


def load_rgb(base: str | Path) -> LinearRGB:
    data, _ = tensorio.read_tensor(base)
    return LinearRGB(data, clipped=bool(data.min() >= 0.0 and data.max() <= 1.0))
