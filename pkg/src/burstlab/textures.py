"""Procedural sRGB source images for synthetic burst generation.

Mixes smooth color fields, band-limited noise octaves, soft-edged geometric
shapes, and oriented gratings whose frequencies sit near the RAW sampling
rate. Grating content aliases under the burst pipeline's bilinear
decimation, which is exactly the signal multi-frame fusion can exploit,
while the octave roll-off keeps single-frame content smooth enough for
sub-pixel warping checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .common import gaussian_blur
from .rawmodel import LinearRGB


@dataclass
class TextureConfig:
    octave_sigmas: tuple[float, ...] = (16.0, 32.0, 64.0)
    octave_amps: tuple[float, ...] = (0.04, 0.10, 0.18)
    n_shapes: int = 10
    shape_amp: float = 0.25
    edge_sigma: float = 8.0
    n_gratings: int = 6
    grating_amp: float = 0.008  # total RMS of the summed grating field
    # cycles per HR pixel; both bands sit above the packed-grid Nyquist
    # (1/16) yet alias to near-DC there, i.e. genuinely super-resolvable
    grating_bands: tuple[tuple[float, float], ...] = ((0.108, 0.120), (0.128, 0.142))
    grating_full_field: bool = True
    base_level: tuple[float, float] = (0.25, 0.65)


def random_texture(rng: np.random.Generator, size: tuple[int, int],
                   config: TextureConfig | None = None) -> LinearRGB:
    """Deterministic pseudo-natural sRGB image of the given (height, width)."""
    cfg = config or TextureConfig()
    h, w = size
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = rng.uniform(*cfg.base_level, size=3)

    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")

    for sigma, amp in zip(cfg.octave_sigmas, cfg.octave_amps):
        noise = rng.standard_normal((h, w, 3))
        smooth = gaussian_blur(noise, sigma)
        smooth /= smooth.std() + 1e-9
        img += amp * smooth

    if cfg.n_shapes > 0:
        shapes = np.zeros((h, w, 3), dtype=np.float64)
        for _ in range(cfg.n_shapes):
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            theta = rng.uniform(0, np.pi)
            half_w = rng.uniform(0.04, 0.35) * min(h, w)
            d = np.abs((gx - cx) * np.cos(theta) + (gy - cy) * np.sin(theta))
            profile = np.clip(1.0 - d / half_w, 0.0, 1.0)[..., None]
            shapes += profile * rng.uniform(-cfg.shape_amp, cfg.shape_amp, size=3)
        img += gaussian_blur(shapes, cfg.edge_sigma)  # blur is linear, one pass suffices

    if cfg.n_gratings > 0 and cfg.grating_amp > 0:
        grating = np.zeros((h, w, 3), dtype=np.float64)
        for _ in range(cfg.n_gratings):
            band = cfg.grating_bands[rng.integers(len(cfg.grating_bands))]
            freq = rng.uniform(*band)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            kx, ky = 2 * np.pi * freq * np.cos(theta), 2 * np.pi * freq * np.sin(theta)
            wave = np.sin(kx * gx + ky * gy + phase)
            if cfg.grating_full_field:
                env = 1.0
            else:
                cx, cy = rng.uniform(0, w), rng.uniform(0, h)
                r = rng.uniform(0.15, 0.5) * min(h, w)
                env = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * r * r))
            color = rng.uniform(0.4, 1.0, size=3)
            grating += (wave * env)[..., None] * color
        # fixed total RMS so the aliased-energy level is sample-independent
        img += grating * (cfg.grating_amp / (grating.std() + 1e-9))

    img = np.clip(img, 0.02, 0.98)
    return LinearRGB(img.astype(np.float32), clipped=True)
