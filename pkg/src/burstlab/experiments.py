"""Reproducible ordering experiments over architecture variants.

One profile fixes datasets, model width, and training budget; variants
share everything except the component under study (burst size, alignment,
fusion mode, weight predictor inputs, motion regime, training loss). The
deliverable of a run is the relative ordering of PSNR scores, not absolute
numbers: full-scale results are not reachable at desk scale.

Datasets, trained checkpoints, and evaluations are cached inside the
experiment root keyed by profile and variant names, so repeated calls are
incremental.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .common import UsageError, require
from .datasets import SampleDataset
from .evaluate import evaluate_checkpoint
from .losses import TrainConfig, finetune_real, train_synthetic
from .net import NetConfig, desk_config
from .rawmodel import LinearRGB
from .synth import SynthConfig, generate_burst, read_sample, sample_dirs, write_sample
from .textures import TextureConfig, random_texture


@dataclass
class ExperimentProfile:
    name: str = "acceptance"
    scale: int = 4
    train_samples: int = 40
    eval_samples: int = 50
    stored_crop: int = 32         # RAW px in stored datasets
    source_size: int = 288
    train_burst: int = 8
    eval_burst: int = 14
    shot_range: tuple[float, float] = (1e-4, 4e-4)
    read_range: tuple[float, float] = (1e-6, 4e-6)
    iterations: int = 400
    finetune_iterations: int = 250
    lr: float = 1e-3
    batch_size: int = 2
    train_crop: int = 24
    seed: int = 0
    embed_dim: int = 64
    misalign_shift: float = 3.0   # HR px, criterion-8 style corrupted ground truth
    misalign_rotation: float = 0.15

    def net_config(self) -> NetConfig:
        return desk_config(scale=self.scale, embed_dim=self.embed_dim)

    def train_config(self, burst_size: int | None = None, **overrides) -> TrainConfig:
        cfg = TrainConfig(
            iterations=self.iterations,
            burst_size=burst_size or self.train_burst,
            lr=self.lr,
            batch_size=self.batch_size,
            crop=self.train_crop,
            log_interval=max(1, self.iterations // 20),
        )
        return replace(cfg, **overrides)


def acceptance_profile() -> ExperimentProfile:
    return ExperimentProfile()


def desk_profile() -> ExperimentProfile:
    """Overnight-on-CPU / hours-on-accelerator configuration."""
    return ExperimentProfile(
        name="desk",
        train_samples=300,
        eval_samples=50,
        stored_crop=104,
        source_size=512,
        iterations=10_000,
        finetune_iterations=2_000,
        lr=1e-4,
        train_crop=96,
    )


VARIANTS = {
    "single": {"burst": 1},
    "burst8": {},
    "noalign": {"net": {"alignment": "none"}},
    "avgpool": {"net": {"fusion": "avgpool"}},
    "maxpool": {"net": {"fusion": "maxpool"}},
    "concat": {"net": {"fusion": "concat"}},
    "recmerge": {"net": {"fusion": "recmerge"}},
    "noshift": {"data": "train_noshift"},
    "wp_feature": {"net": {"wp_inputs": "feature"}},
    "wp_residual": {"net": {"wp_inputs": "residual"}},
    "wp_residual_base": {"net": {"wp_inputs": "residual_base"}},
}


def variant_net_config(profile: ExperimentProfile, variant: str) -> NetConfig:
    require(variant in VARIANTS, UsageError, f"unknown variant {variant!r}")
    spec = VARIANTS[variant]
    overrides = dict(spec.get("net", {}))
    if overrides.get("fusion") == "concat":
        overrides["burst_size"] = profile.train_burst
    return replace(profile.net_config(), **overrides)


def _dataset_marker(directory: Path, payload: dict) -> bool:
    marker = directory / "dataset.json"
    if marker.exists():
        return json.loads(marker.read_text()) == payload
    return False


def build_dataset(directory: str | Path, profile: ExperimentProfile, kind: str,
                  texture: TextureConfig | None = None) -> Path:
    """Materialize one dataset (train / eval / *_noshift); cached on disk."""
    directory = Path(directory)
    kinds = {"train": 0, "eval": 1, "train_noshift": 2, "eval_noshift": 3}
    require(kind in kinds, UsageError, f"unknown dataset kind {kind!r}")
    count = profile.train_samples if kind.startswith("train") else profile.eval_samples
    burst = profile.train_burst if kind.startswith("train") else profile.eval_burst
    payload = {"profile": asdict(profile), "kind": kind, "count": count, "burst": burst}
    if _dataset_marker(directory, payload):
        return directory

    cfg = SynthConfig(burst_size=burst, scale=profile.scale, crop=profile.stored_crop,
                      shot_range=profile.shot_range, read_range=profile.read_range)
    if kind.endswith("noshift"):
        cfg.motion.no_shift = True
    # eval sets share source images and noise draws with their no-shift twin
    # (frame 1 is identical by construction), so single-image scores carry over
    stream_kind = kinds[kind] % 2 if kind == "eval_noshift" else kinds[kind]
    for i in range(count):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(profile.seed, 0xDA7A, stream_kind, i)))
        src = random_texture(rng, (profile.source_size, profile.source_size), texture)
        sample = generate_burst(src, burst, profile.scale, rng, cfg)
        write_sample(directory / f"sample_{i:05d}", sample)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "dataset.json").write_text(json.dumps(payload, indent=1))
    return directory


def corrupt_dataset_gt(src_dir: str | Path, dst_dir: str | Path,
                       profile: ExperimentProfile,
                       color_matrix: np.ndarray | None = None) -> tuple[Path, np.ndarray]:
    """Copy a dataset, replacing gt by a homography-misaligned, color-shifted twin.

    Models the real-data situation: reference frames from a second device are
    never perfectly registered nor in the same color space. The per-sample
    homography (small translation + rotation about the center) and the global
    3x3 color map are returned for reference; burst frames and oracle flows
    are untouched.
    """
    from .dataproc import Homography, warp_homography

    src_dir, dst_dir = Path(src_dir), Path(dst_dir)
    if color_matrix is None:
        color_matrix = np.array([
            [0.90, 0.07, 0.03],
            [0.05, 0.88, 0.07],
            [0.04, 0.08, 0.88],
        ])
    marker = dst_dir / "dataset.json"
    payload = {"source": str(src_dir), "shift": profile.misalign_shift,
               "rotation": profile.misalign_rotation, "ccm": color_matrix.tolist()}
    if marker.exists() and json.loads(marker.read_text()) == payload:
        return dst_dir, color_matrix

    for i, sdir in enumerate(sample_dirs(src_dir)):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(profile.seed, 0xC0442, i)))
        sample = read_sample(sdir)
        h, w = sample.gt.shape
        tx, ty = rng.uniform(-profile.misalign_shift, profile.misalign_shift, 2)
        th = math.radians(rng.uniform(-profile.misalign_rotation, profile.misalign_rotation))
        c, s = math.cos(th), math.sin(th)
        cx, cy = (w - 1) / 2, (h - 1) / 2
        hom = Homography(np.array([
            [c, -s, tx + cx - c * cx + s * cy],
            [s, c, ty + cy - s * cx - c * cy],
            [0, 0, 1.0],
        ]))
        shifted = np.clip(sample.gt.data @ color_matrix.T, 0.0, 1.0)
        gt = warp_homography(LinearRGB(shifted.astype(np.float32)), hom)
        corrupted = replace(sample, gt=LinearRGB(np.clip(gt.data, 0, 1), clipped=True))
        write_sample(dst_dir / sdir.name, corrupted)
    (dst_dir / "dataset.json").write_text(json.dumps(payload, indent=1))
    return dst_dir, color_matrix


def train_variant(root: str | Path, profile: ExperimentProfile, variant: str,
                  datasets: dict[str, Path]) -> Path:
    """Train (or reuse) one variant; returns its checkpoint path."""
    root = Path(root)
    out_dir = root / f"run_{variant}"
    ckpt = out_dir / "model.ckpt"
    if ckpt.exists():
        return ckpt
    spec = VARIANTS[variant]
    net_cfg = variant_net_config(profile, variant)
    burst = spec.get("burst", profile.train_burst)
    data_dir = datasets[spec.get("data", "train")]
    cfg = profile.train_config(burst_size=burst)
    train_synthetic(net_cfg, cfg, data_dir, out_dir, seed=profile.seed + 1)
    return ckpt


def psnr_of(ckpt: Path, eval_dir: Path, burst_size: int,
            max_samples: int | None = None) -> float:
    return evaluate_checkpoint(ckpt, eval_dir, burst_size=burst_size,
                               max_samples=max_samples).psnr


@dataclass
class OrderingReport:
    scores: dict[str, float]
    margins: dict[str, float]

    def to_json(self) -> str:
        return json.dumps({"scores": self.scores, "margins": self.margins}, indent=1)


def setup_standard_datasets(root: str | Path, profile: ExperimentProfile) -> dict[str, Path]:
    root = Path(root)
    return {
        "train": build_dataset(root / "data_train", profile, "train"),
        "eval": build_dataset(root / "data_eval", profile, "eval"),
        "train_noshift": build_dataset(root / "data_train_noshift", profile, "train_noshift"),
        "eval_noshift": build_dataset(root / "data_eval_noshift", profile, "eval_noshift"),
    }


def loss_robustness_experiment(root: str | Path, profile: ExperimentProfile,
                               pretrained: Path, datasets: dict[str, Path]) -> OrderingReport:
    """Fine-tune on clean vs misaligned ground truth with L1 vs the robust loss.

    Scores are aligned-protocol PSNR on the clean eval set, so a learned
    color shift alone cannot explain a degradation; blur from optimizing L1
    against randomly misaligned targets can.
    """
    root = Path(root)
    corrupt_dir, _ = corrupt_dataset_gt(datasets["train"], root / "data_train_misaligned",
                                        profile)
    runs = {
        "ft_clean_l1": (datasets["train"], "l1"),
        "ft_misaligned_l1": (corrupt_dir, "l1"),
        "ft_misaligned_robust": (corrupt_dir, "real"),
    }
    scores: dict[str, float] = {}
    for name, (data_dir, loss_mode) in runs.items():
        out_dir = root / f"run_{name}"
        ckpt = out_dir / "model.ckpt"
        if not ckpt.exists():
            cfg = profile.train_config(iterations=profile.finetune_iterations,
                                       loss_mode=loss_mode)
            if loss_mode == "real":
                finetune_real(cfg, data_dir, out_dir, pretrained, seed=profile.seed + 2)
            else:
                model_cfg = variant_net_config(profile, "burst8")
                from .losses import train
                train(model_cfg, cfg, data_dir, out_dir, seed=profile.seed + 2,
                      init_checkpoint=pretrained)
        scores[name] = evaluate_checkpoint(ckpt, datasets["eval"], burst_size=profile.train_burst,
                                           protocol="aligned", flow_method="oracle").psnr
    margins = {
        "robust_vs_clean": scores["ft_misaligned_robust"] - scores["ft_clean_l1"],
        "naive_vs_clean": scores["ft_misaligned_l1"] - scores["ft_clean_l1"],
    }
    return OrderingReport(scores=scores, margins=margins)
