"""Burst super-resolution network.

Packed 4-channel frames are encoded independently, aligned to the base
frame by warping with externally supplied flow, merged by softmax attention
weights from a weight-predictor network, and decoded to an RGB image at 2s
times the packed resolution (s times RAW resolution) through an
ICNR-initialized sub-pixel convolution.

Fusion variants (attention / maxpool / avgpool / concat / recmerge), weight
predictor input sets, and a no-alignment mode cover the ablation grid. All
variants share encoder and decoder. Any burst size N >= 1 is accepted at
inference without reconfiguration, except the fixed-size concat fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import DataError, DimensionError, UsageError, require
from .flow import warp

FUSION_MODES = ("attention", "maxpool", "avgpool", "concat", "recmerge")
WP_INPUT_SETS = ("feature", "residual", "residual_base", "residual_base_flow")
ALIGNMENT_MODES = ("flow", "none")


@dataclass
class NetConfig:
    scale: int = 4
    embed_dim: int = 512          # D, encoder output width
    encoder_feat: int = 64
    encoder_blocks: int = 9
    proj_dim: int = 64            # shared projection for the weight predictor
    wp_width: int = 128
    wp_blocks: int = 3
    flow_feat_dim: int = 64
    dec_feat: int = 64
    dec_pre_blocks: int = 5
    dec_dim: int = 32             # D', sub-pixel convolution output width
    dec_post_blocks: int = 4
    smooth_sigma: float = 1.0
    fusion: str = "attention"
    wp_inputs: str = "residual_base_flow"
    alignment: str = "flow"
    noalign_blocks: int = 2
    burst_size: int | None = None  # required for concat fusion only

    def __post_init__(self) -> None:
        require(self.fusion in FUSION_MODES, UsageError, f"unknown fusion mode {self.fusion!r}")
        require(self.wp_inputs in WP_INPUT_SETS, UsageError,
                f"unknown weight predictor input set {self.wp_inputs!r}")
        require(self.alignment in ALIGNMENT_MODES, UsageError,
                f"unknown alignment mode {self.alignment!r}")
        if self.fusion == "concat":
            require(self.burst_size is not None and self.burst_size >= 1, UsageError,
                    "concat fusion needs a fixed burst_size")


def paper_config(scale: int = 4) -> NetConfig:
    return NetConfig(scale=scale)


def desk_config(scale: int = 4, **overrides) -> NetConfig:
    cfg = NetConfig(scale=scale, embed_dim=64, encoder_blocks=4, wp_blocks=2,
                    dec_pre_blocks=2, dec_post_blocks=2)
    return replace(cfg, **overrides)


def tiny_config(scale: int = 2, **overrides) -> NetConfig:
    cfg = NetConfig(scale=scale, embed_dim=8, encoder_feat=8, encoder_blocks=2,
                    proj_dim=8, wp_width=16, wp_blocks=1, flow_feat_dim=8,
                    dec_feat=8, dec_pre_blocks=1, dec_dim=8, dec_post_blocks=1,
                    noalign_blocks=1)
    return replace(cfg, **overrides)


class ResBlock(nn.Module):
    """conv-ReLU-conv with identity skip, no normalization."""

    def __init__(self, nf):
        super().__init__()
        self.conv1 = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv2 = nn.Conv2d(nf, nf, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def make_blocks(nf, n):
    return nn.Sequential(*[ResBlock(nf) for _ in range(n)])


def he_init(module: nn.Module) -> None:
    """Kaiming-normal conv init; residual-block convs scaled down for stability."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=0, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, ResBlock):
            with torch.no_grad():
                m.conv1.weight.mul_(0.1)
                m.conv2.weight.mul_(0.1)


def icnr_init(weight: torch.Tensor, upscale: int, rng: torch.Generator | None = None) -> None:
    """Initialize a pre-shuffle conv weight so pixel shuffle starts checkerboard-free.

    One He-initialized sub-kernel is replicated across each pixel-shuffle
    group, making the initial post-shuffle output a nearest-neighbor
    upsampling of the sub-kernel's response (constant within every
    upscale x upscale block).
    """
    out_ch = weight.shape[0]
    group = upscale * upscale
    require(out_ch % group == 0, UsageError,
            f"output channels {out_ch} not divisible by upscale^2 = {group}")
    sub = torch.empty(out_ch // group, *weight.shape[1:], dtype=weight.dtype)
    fan_in = weight.shape[1] * weight.shape[2] * weight.shape[3]
    std = math.sqrt(2.0 / fan_in)
    if rng is None:
        sub.normal_(0, std)
    else:
        sub.copy_(torch.randn(sub.shape, generator=rng, dtype=weight.dtype) * std)
    with torch.no_grad():
        weight.copy_(sub.repeat_interleave(group, dim=0))


def gaussian_smooth_kernel(channels: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(-1, 2, dtype=torch.float64)
    k1 = torch.exp(-0.5 * (x / sigma) ** 2)
    k1 = k1 / k1.sum()
    k2 = torch.outer(k1, k1)
    return k2.to(dtype).expand(channels, 1, 3, 3).clone()


class Encoder(nn.Module):
    """Packed frame -> D-channel embedding; spatial shape preserved."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.head = nn.Conv2d(4, cfg.encoder_feat, 3, 1, 1)
        self.body = make_blocks(cfg.encoder_feat, cfg.encoder_blocks)
        self.expand = nn.Conv2d(cfg.encoder_feat, cfg.embed_dim, 3, 1, 1)

    def forward(self, x):
        if x.shape[-3] != 4:
            raise DimensionError(f"encoder expects 4-channel packed input, got {x.shape[-3]}")
        return self.expand(self.body(F.relu(self.head(x))))


class FlowEmbed(nn.Module):
    """Sub-pixel phase (flow mod 1) -> flow features."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.head = nn.Conv2d(2, cfg.flow_feat_dim, 3, 1, 1)
        self.block = ResBlock(cfg.flow_feat_dim)

    def forward(self, flow):
        # flow: (B, 2, H, W); floor-based modulo keeps the phase in [0, 1)
        phase = flow - torch.floor(flow)
        return self.block(F.relu(self.head(phase)))


class WeightPredictor(nn.Module):
    """Raw per-pixel, per-channel fusion weights from the configured input set."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        in_ch = {
            "feature": cfg.proj_dim,
            "residual": cfg.proj_dim,
            "residual_base": 2 * cfg.proj_dim,
            "residual_base_flow": 2 * cfg.proj_dim + cfg.flow_feat_dim,
        }[cfg.wp_inputs]
        self.inputs = cfg.wp_inputs
        self.head = nn.Conv2d(in_ch, cfg.wp_width, 3, 1, 1)
        self.body = make_blocks(cfg.wp_width, cfg.wp_blocks)
        self.tail = nn.Conv2d(cfg.wp_width, cfg.embed_dim, 3, 1, 1)

    def forward(self, proj_i, proj_base, flow_feat):
        if self.inputs == "feature":
            x = proj_i
        elif self.inputs == "residual":
            x = proj_i - proj_base
        elif self.inputs == "residual_base":
            x = torch.cat([proj_i - proj_base, proj_base], dim=1)
        else:
            if flow_feat is None:
                raise UsageError("residual_base_flow weight predictor needs flow features")
            x = torch.cat([proj_i - proj_base, proj_base, flow_feat], dim=1)
        return self.tail(self.body(F.relu(self.head(x))))


class RecMergeBlock(nn.Module):
    """Pairwise merge used by the recursive fusion baseline."""

    def __init__(self, dim):
        super().__init__()
        self.reduce = nn.Conv2d(2 * dim, dim, 3, 1, 1)
        self.block = ResBlock(dim)

    def forward(self, a, b):
        return self.block(F.relu(self.reduce(torch.cat([a, b], dim=1))))


class SubPixelUp(nn.Module):
    """Sub-pixel convolution: conv to (2s)^2 * D' channels, then pixel shuffle."""

    def __init__(self, in_dim, out_dim, upscale):
        super().__init__()
        self.upscale = upscale
        self.conv = nn.Conv2d(in_dim, upscale * upscale * out_dim, 3, 1, 1)
        self.shuffle = nn.PixelShuffle(upscale)

    def init_icnr(self, rng: torch.Generator | None = None):
        icnr_init(self.conv.weight, self.upscale, rng)
        with torch.no_grad():
            bias = self.conv.bias
            group = self.upscale * self.upscale
            bias.copy_(bias.view(-1, group)[:, :1].expand(-1, group).reshape(-1))

    def forward(self, x):
        return self.shuffle(self.conv(x))


class Decoder(nn.Module):
    """Merged embedding -> RGB at 2s x packed resolution."""

    def __init__(self, cfg: NetConfig, in_dim: int | None = None):
        super().__init__()
        up = 2 * cfg.scale
        self.project = nn.Conv2d(in_dim or cfg.embed_dim, cfg.dec_feat, 3, 1, 1)
        self.pre = make_blocks(cfg.dec_feat, cfg.dec_pre_blocks)
        self.up = SubPixelUp(cfg.dec_feat, cfg.dec_dim, up)
        self.register_buffer("smooth_kernel",
                             gaussian_smooth_kernel(cfg.dec_dim, cfg.smooth_sigma))
        self.post = make_blocks(cfg.dec_dim, cfg.dec_post_blocks)
        self.tail = nn.Conv2d(cfg.dec_dim, 3, 3, 1, 1)

    def smooth(self, x):
        pad = F.pad(x, (1, 1, 1, 1), mode="replicate")
        return F.conv2d(pad, self.smooth_kernel.to(x.dtype), groups=x.shape[1])

    def forward(self, x):
        x = self.pre(F.relu(self.project(x)))
        x = self.smooth(self.up(x))
        return self.tail(self.post(x))


class BurstSRNet(nn.Module):
    """Full model; forward takes packed frames plus per-frame flows.

    packed: (B, N, 4, h, w); flows: (B, N, h, w, 2) under the backward-warp
    convention (flow of the base frame is zero), or None when the alignment
    mode is "none". Returns the RGB output (B, 3, 2s*h, 2s*w) and a dict of
    diagnostics (normalized fusion weights where applicable).
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        dec_in = cfg.embed_dim
        if cfg.fusion == "concat":
            dec_in = cfg.embed_dim * cfg.burst_size
        self.decoder = Decoder(cfg, dec_in)
        if cfg.alignment == "none":
            self.noalign_reduce = nn.Conv2d(2 * cfg.embed_dim, cfg.embed_dim, 3, 1, 1)
            self.noalign_blocks = make_blocks(cfg.embed_dim, cfg.noalign_blocks)
        if cfg.fusion == "attention":
            self.project = nn.Conv2d(cfg.embed_dim, cfg.proj_dim, 3, 1, 1)
            self.weight_pred = WeightPredictor(cfg)
            if cfg.wp_inputs == "residual_base_flow":
                self.flow_embed = FlowEmbed(cfg)
        elif cfg.fusion == "recmerge":
            self.recmerge = RecMergeBlock(cfg.embed_dim)
        he_init(self)
        self.decoder.up.init_icnr()

    def encode_burst(self, packed):
        b, n, c, h, w = packed.shape
        feats = self.encoder(packed.reshape(b * n, c, h, w))
        return feats.reshape(b, n, -1, h, w)

    def align(self, feats, flows):
        if self.cfg.alignment == "none":
            b, n, d, h, w = feats.shape
            base = feats[:, :1].expand(-1, n, -1, -1, -1)
            x = torch.cat([feats, base], dim=2).reshape(b * n, 2 * d, h, w)
            x = self.noalign_blocks(F.relu(self.noalign_reduce(x)))
            return x.reshape(b, n, d, h, w)
        if flows is None:
            raise UsageError("flow alignment requires flows; pass zeros for N=1")
        b, n, d, h, w = feats.shape
        aligned = warp(feats.reshape(b * n, d, h, w),
                       flows.reshape(b * n, h, w, 2).to(feats.dtype))
        return aligned.reshape(b, n, d, h, w)

    def fusion_weights(self, aligned, flows):
        b, n, d, h, w = aligned.shape
        proj = self.project(aligned.reshape(b * n, d, h, w)).reshape(b, n, -1, h, w)
        proj_base = proj[:, 0]
        flow_feats = None
        if self.cfg.wp_inputs == "residual_base_flow":
            fl = flows.reshape(b * n, h, w, 2).permute(0, 3, 1, 2).to(aligned.dtype)
            flow_feats = self.flow_embed(fl).reshape(b, n, -1, h, w)
        raws = []
        for i in range(n):
            ff = flow_feats[:, i] if flow_feats is not None else None
            raws.append(self.weight_pred(proj[:, i], proj_base, ff))
        return normalize_weights(torch.stack(raws, dim=1))

    def fuse(self, aligned, weights):
        mode = self.cfg.fusion
        if mode == "attention":
            return (weights * aligned).sum(dim=1)
        if mode == "maxpool":
            return aligned.max(dim=1).values
        if mode == "avgpool":
            return aligned.mean(dim=1)
        if mode == "concat":
            b, n, d, h, w = aligned.shape
            if n != self.cfg.burst_size:
                raise UsageError(f"concat fusion is fixed to N={self.cfg.burst_size}, got {n}")
            return aligned.reshape(b, n * d, h, w)
        merged = list(aligned.unbind(dim=1))
        while len(merged) > 1:
            if len(merged) % 2 == 1:
                merged.append(merged[-1])
            merged = [self.recmerge(merged[i], merged[i + 1]) for i in range(0, len(merged), 2)]
        return merged[0]

    def forward(self, packed, flows=None):
        if packed.dim() != 5:
            raise DimensionError("expected packed burst of shape (B, N, 4, h, w)")
        if packed.shape[1] < 1:
            raise DataError("empty burst")
        if self.cfg.alignment == "flow" and flows is None and packed.shape[1] == 1:
            b, _, _, h, w = packed.shape
            flows = torch.zeros(b, 1, h, w, 2, dtype=packed.dtype, device=packed.device)
        feats = self.encode_burst(packed)
        aligned = self.align(feats, flows)
        weights = None
        if self.cfg.fusion == "attention":
            wp_flows = flows
            if self.cfg.alignment == "none" or flows is None:
                wp_flows = torch.zeros(*packed.shape[:2], *packed.shape[-2:], 2,
                                       dtype=feats.dtype, device=packed.device)
            weights = self.fusion_weights(aligned, wp_flows)
        merged = self.fuse(aligned, weights)
        out = self.decoder(merged)
        return out, {"weights": weights, "flows": flows}


def normalize_weights(raws: torch.Tensor) -> torch.Tensor:
    """Softmax across the frame axis (dim 1) with max subtraction for stability."""
    if raws.shape[1] < 1:
        raise DataError("cannot normalize weights of an empty burst")
    shifted = raws - raws.max(dim=1, keepdim=True).values
    return F.softmax(shifted, dim=1)


# --- checkpoints -------------------------------------------------------------

_CONFIG_TYPES = {f.name: f.type for f in NetConfig.__dataclass_fields__.values()}


def save_checkpoint(path: str | Path, model: BurstSRNet,
                    extra_tensors: dict[str, torch.Tensor] | None = None,
                    state: dict[str, str] | None = None) -> None:
    """Manifest text file at `path` plus a flat binary blob at `path` + ".bin"."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    lines = ["[config]"]
    for key, value in asdict(model.cfg).items():
        lines.append(f"{key}={value}")
    lines.append("[state]")
    for key, value in (state or {}).items():
        lines.append(f"{key}={value}")
    lines.append("[tensors]")
    blobs = []
    offset = 0
    for key, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        blobs.append(arr.tobytes(order="C"))
        shape = " ".join(str(s) for s in arr.shape) or "0"
        lines.append(f"{key} float32 {offset} {shape}")
        offset += len(blobs[-1])
    path.write_text("\n".join(lines) + "\n")
    Path(str(path) + ".bin").write_bytes(b"".join(blobs))


def _parse_config(lines: list[str]) -> NetConfig:
    kwargs = {}
    for line in lines:
        key, _, value = line.partition("=")
        if key not in _CONFIG_TYPES:
            raise DataError(f"unknown checkpoint config key {key!r}")
        if value == "None":
            kwargs[key] = None
        elif _CONFIG_TYPES[key] in ("int", "int | None"):
            kwargs[key] = int(value)
        elif _CONFIG_TYPES[key] == "float":
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return NetConfig(**kwargs)


def load_checkpoint(path: str | Path):
    """Returns (model, extra_tensors, state). Inverse of :func:`save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    sections: dict[str, list[str]] = {"[config]": [], "[state]": [], "[tensors]": []}
    current = None
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line in sections:
            current = line
            continue
        if current is None:
            raise DataError(f"malformed checkpoint manifest {path}")
        sections[current].append(line)
    cfg = _parse_config(sections["[config]"])
    state = {}
    for line in sections["[state]"]:
        key, _, value = line.partition("=")
        state[key] = value
    blob = Path(str(path) + ".bin").read_bytes()
    model = BurstSRNet(cfg)
    params: dict[str, torch.Tensor] = {}
    extra: dict[str, torch.Tensor] = {}
    for line in sections["[tensors]"]:
        parts = line.split()
        key, dtype, offset = parts[0], parts[1], int(parts[2])
        shape = tuple(int(s) for s in parts[3:])
        if shape == (0,):
            shape = ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensor = torch.from_numpy(arr.copy())
        if key.startswith("param."):
            params[key[len("param."):]] = tensor
        else:
            extra[key] = tensor
    missing = model.load_state_dict(params, strict=False)
    if missing.missing_keys:
        raise DataError(f"checkpoint {path} missing tensors: {missing.missing_keys}")
    return model, extra, state
