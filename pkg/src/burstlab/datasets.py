"""Dataset access and geometry-exact training augmentation.

Random crops land on even RAW offsets so the RGGB phase is preserved.
Flips mirror the stored RAW crop; a mirrored RGGB image has G(R)BG phase,
so the flipped crop window starts at an odd offset of the mirrored image,
which restores RGGB exactly (this needs >= 2 spare RAW pixels along the
flipped axis; flips are skipped when the stored crop has no slack).

Oracle flows are never resampled: they are recomputed analytically from the
stored per-frame motion and the exact affine map from the augmented packed
grid back to source HR coordinates, mirror included. Augmented (burst,
flows, gt) triples therefore satisfy the same alignment identities as
freshly generated samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .common import DataError, UsageError, require
from .rawmodel import PackedFrame, RawImage, pack_bayer
from .synth import Affine2D, BurstSample, oracle_flow, read_sample, sample_dirs


@dataclass
class TrainingExample:
    packed: torch.Tensor       # (N, 4, h, w)
    gt: torch.Tensor           # (3, 2s*h, 2s*w)
    flows: torch.Tensor        # (N, h, w, 2)
    base_packed: PackedFrame
    scale: int


def _axis_map(flip: bool, origin: int, stored: int, stored_origin: int, s: int) -> tuple[float, float]:
    """Per-axis affine (a, b): augmented packed coord -> source HR coord."""
    if flip:
        return -2.0 * s, (stored - 1 - origin + stored_origin) * s - 0.5
    return 2.0 * s, (origin + stored_origin + 1) * s - 0.5


class SampleDataset:
    """Directory of burst samples in the synth layout, cached in memory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.dirs = sample_dirs(self.root)
        self._cache: dict[int, BurstSample] = {}

    def __len__(self) -> int:
        return len(self.dirs)

    def sample(self, i: int) -> BurstSample:
        if i not in self._cache:
            self._cache[i] = read_sample(self.dirs[i])
        return self._cache[i]

    def load_training_example(self, i: int, cfg, rng: np.random.Generator) -> TrainingExample:
        sample = self.sample(i)
        s = sample.meta.scale
        stored_h, stored_w = sample.frames[0].shape
        crop = min(cfg.crop, stored_h, stored_w)
        crop -= crop % 2
        require(crop >= 2, UsageError, "crop too small")

        def draw_axis(stored: int) -> tuple[bool, int]:
            slack = stored - crop
            flip = bool(cfg.flips and slack >= 2 and rng.integers(2))
            if not cfg.random_crop:
                origin = (slack // 2) - ((slack // 2) % 2)
                return False, origin
            if flip:
                origin = 1 + 2 * int(rng.integers(0, (slack - 2) // 2 + 1))
            else:
                origin = 2 * int(rng.integers(0, slack // 2 + 1))
            return flip, origin

        flip_x, ox = draw_axis(stored_w)
        flip_y, oy = draw_axis(stored_h)

        n = min(cfg.burst_size, sample.burst_size)
        frames = []
        for frame in sample.frames[:n]:
            raw = frame.data
            if flip_y:
                raw = raw[::-1]
            if flip_x:
                raw = raw[:, ::-1]
            frames.append(np.ascontiguousarray(raw[oy:oy + crop, ox:ox + crop]))

        gt = sample.gt.data
        if flip_y:
            gt = gt[::-1]
        if flip_x:
            gt = gt[:, ::-1]
        gt = np.ascontiguousarray(gt[oy * s:(oy + crop) * s, ox * s:(ox + crop) * s])

        sx0, sy0 = sample.meta.crop_origin
        ax, bx = _axis_map(flip_x, ox, stored_w, sx0, s)
        ay, by = _axis_map(flip_y, oy, stored_h, sy0, s)
        hp = Affine2D.diag(ax, ay, bx, by)
        grid = (crop // 2, crop // 2)
        flows = [oracle_flow(m, s, grid, center=sample.meta.center, packed_map=hp).data
                 for m in sample.meta.motions[:n]]

        packed = np.stack([pack_bayer(RawImage(f)).data.transpose(2, 0, 1) for f in frames])
        return TrainingExample(
            packed=torch.from_numpy(packed.astype(np.float32)),
            gt=torch.from_numpy(gt.astype(np.float32).transpose(2, 0, 1)),
            flows=torch.from_numpy(np.stack(flows).astype(np.float32)),
            base_packed=PackedFrame(pack_bayer(RawImage(frames[0])).data),
            scale=s,
        )

    def load_eval_example(self, i: int, burst_size: int | None = None) -> TrainingExample:
        """Full stored crop, no augmentation; optionally truncate the burst."""
        sample = self.sample(i)
        n = sample.burst_size if burst_size is None else min(burst_size, sample.burst_size)
        require(n >= 1, UsageError, "burst size must be >= 1")
        packed_frames = [pack_bayer(f) for f in sample.frames[:n]]
        packed = np.stack([p.data.transpose(2, 0, 1) for p in packed_frames])
        flows = np.stack([f.data for f in sample.oracle_flows[:n]])
        return TrainingExample(
            packed=torch.from_numpy(packed.astype(np.float32)),
            gt=torch.from_numpy(sample.gt.data.astype(np.float32).transpose(2, 0, 1)),
            flows=torch.from_numpy(flows.astype(np.float32)),
            base_packed=packed_frames[0],
            scale=sample.meta.scale,
        )
