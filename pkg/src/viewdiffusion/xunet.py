"""Two-frame weight-shared denoiser with cross-frame attention.

The denoiser sees a clean conditioning frame and a noisy target frame stacked
along a frame axis. All convolutions and self-attention share weights across
the two frames; every residual block is FiLM-modulated by the sum of the
noise-level embedding and a per-pixel pose embedding; at selected resolutions
each frame additionally cross-attends into the other frame's feature maps.
Also provides the channel-concatenation baseline (single stream, no cross
attention) and the single-step regression mode.
"""

from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import NoiseSchedule, predict_x
from .geometry import posenc_ddpm, posenc_nerf, ray_grid

__all__ = [
    "XUNetConfig",
    "DenoiserBatch",
    "ConditioningProcessor",
    "XUNet",
    "ConcatUNet",
    "logsnr_unit_time",
    "apply_uncond_override",
    "regression_forward",
    "param_count",
]

POS_ENC_DEGREES = (0, 15)
DIR_ENC_DEGREES = (0, 8)
# 3 + 6*15 pos channels plus 3 + 6*8 dir channels
POSE_EMB_CHANNELS = 3 + 6 * (POS_ENC_DEGREES[1] - POS_ENC_DEGREES[0]) + 3 + 6 * (
    DIR_ENC_DEGREES[1] - DIR_ENC_DEGREES[0]
)


@dataclasses.dataclass(frozen=True)
class XUNetConfig:
    """Architecture hyperparameters. Defaults are the full-scale settings;
    ``desk_model_config()`` in configs.py gives the laptop-sized variant."""

    ch: int = 256
    ch_mult: tuple = (1, 2, 2, 4)
    emb_ch: int = 1024
    num_res_blocks: int = 3
    attn_resolutions: tuple = (8, 16, 32)
    attn_heads: int = 4
    dropout: float = 0.1
    use_pos_emb: bool = True
    use_ref_pose_emb: bool = True
    use_cross_attn: bool = True
    resolution: int = 128

    def __post_init__(self):
        if self.emb_ch % 2 != 0:
            raise ValueError("emb_ch must be even")
        levels = len(self.ch_mult)
        if self.resolution % 2 ** (levels - 1) != 0:
            raise ValueError(
                f"resolution {self.resolution} is not divisible by 2^{levels - 1}"
            )


@dataclasses.dataclass
class DenoiserBatch:
    """Inputs for one denoiser evaluation.

    Frame 0 is the clean conditioning view, frame 1 the noisy target.

    Attributes:
        x: (B, 3, H, W) conditioning view in [-1, 1].
        z: (B, 3, H, W) noisy target view.
        logsnr: (B, 2) per-frame log-SNR (clean frame carries logsnr_max).
        R: (B, 2, 3, 3) world-from-camera rotations.
        t: (B, 2, 3) camera positions.
        K: (B, 3, 3) shared intrinsics.
        cond_mask: (B,) bool; False zeroes the pose pathway (unconditional).
    """

    x: torch.Tensor
    z: torch.Tensor
    logsnr: torch.Tensor
    R: torch.Tensor
    t: torch.Tensor
    K: torch.Tensor
    cond_mask: torch.Tensor


def _num_groups(channels: int) -> int:
    if channels % 32 == 0:
        return 32
    if channels <= 32:
        return channels
    return math.gcd(channels, 32)


def _merge(h: torch.Tensor) -> torch.Tensor:
    b, f, c, hh, ww = h.shape
    return h.reshape(b * f, c, hh, ww)


def _split(h: torch.Tensor, frames: int) -> torch.Tensor:
    bf, c, hh, ww = h.shape
    return h.reshape(bf // frames, frames, c, hh, ww)


def _zero_init(module: nn.Module) -> nn.Module:
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


class FrameGroupNorm(nn.Module):
    """Group normalization applied per frame with shared scale/shift."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_num_groups(channels), channels)

    def forward(self, h):
        return _split(self.norm(_merge(h)), h.shape[1])


class FiLM(nn.Module):
    """Per-pixel feature-wise scale and shift from the conditioning map."""

    def __init__(self, emb_ch: int, features: int):
        super().__init__()
        self.proj = nn.Conv2d(emb_ch, 2 * features, 1)

    def forward(self, h, emb):
        frames = h.shape[1]
        scale, shift = self.proj(F.silu(_merge(emb))).chunk(2, dim=1)
        return _split(_merge(h) * (1.0 + scale) + shift, frames)


class ResnetBlock(nn.Module):
    """BigGAN-style residual block, frame-shared, optionally resampling."""

    def __init__(self, in_ch: int, out_ch: int | None = None, *, emb_ch: int,
                 dropout: float = 0.0, resample: str | None = None):
        super().__init__()
        out_ch = in_ch if out_ch is None else out_ch
        self.norm1 = FrameGroupNorm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = FrameGroupNorm(out_ch)
        self.film = FiLM(emb_ch, out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = _zero_init(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None
        if resample not in (None, "down", "up"):
            raise ValueError(f"unknown resample mode {resample!r}")
        self.resample = resample

    def _resample(self, h):
        frames = h.shape[1]
        flat = _merge(h)
        if self.resample == "down":
            flat = F.avg_pool2d(flat, 2)
        else:
            flat = F.interpolate(flat, scale_factor=2, mode="nearest")
        return _split(flat, frames)

    def forward(self, h_in, emb):
        h = F.silu(self.norm1(h_in))
        if self.resample is not None:
            h = self._resample(h)
            h_in = self._resample(h_in)
        h = _split(self.conv1(_merge(h)), h.shape[1])
        h = self.film(self.norm2(h), emb)
        h = F.silu(h)
        h = _split(self.dropout(_merge(h)), h.shape[1])
        h = _split(self.conv2(_merge(h)), h.shape[1])
        if self.skip is not None:
            h_in = _split(self.skip(_merge(h_in)), h_in.shape[1])
        return (h + h_in) / math.sqrt(2.0)


class AttnLayer(nn.Module):
    """Multi-head dot-product attention with separate query and key/value inputs."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ValueError("channels must divide evenly over heads")
        self.heads = heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)

    def forward(self, q, kv):
        b, n, c = q.shape
        m = kv.shape[1]
        hd = c // self.heads
        qq = self.q(q).reshape(b, n, self.heads, hd).transpose(1, 2)
        kk = self.k(kv).reshape(b, m, self.heads, hd).transpose(1, 2)
        vv = self.v(kv).reshape(b, m, self.heads, hd).transpose(1, 2)
        out = F.scaled_dot_product_attention(qq, kk, vv)
        return out.transpose(1, 2).reshape(b, n, c)


class AttnBlock(nn.Module):
    """Residual attention over pixels: self within a frame, or cross between
    the two frames (each frame queries the other's features)."""

    def __init__(self, channels: int, heads: int, cross: bool):
        super().__init__()
        self.norm = FrameGroupNorm(channels)
        self.attn = AttnLayer(channels, heads)
        self.out = _zero_init(nn.Linear(channels, channels))
        self.cross = cross

    def forward(self, h_in):
        b, frames, c, hh, ww = h_in.shape
        h = self.norm(h_in)
        tokens = h.permute(0, 1, 3, 4, 2).reshape(b, frames, hh * ww, c)
        if self.cross:
            if frames != 2:
                raise ValueError("cross attention needs exactly two frames")
            out = torch.stack(
                [
                    self.attn(tokens[:, 0], tokens[:, 1]),
                    self.attn(tokens[:, 1], tokens[:, 0]),
                ],
                dim=1,
            )
        else:
            flat = tokens.reshape(b * frames, hh * ww, c)
            out = self.attn(flat, flat).reshape(b, frames, hh * ww, c)
        out = self.out(out)
        out = out.reshape(b, frames, hh, ww, c).permute(0, 1, 4, 2, 3)
        return (out + h_in) / math.sqrt(2.0)


class XUNetBlock(nn.Module):
    """Residual block followed by optional self- and cross-attention."""

    def __init__(self, in_ch: int, out_ch: int, cfg: XUNetConfig, *,
                 use_attn: bool, frames: int):
        super().__init__()
        self.res = ResnetBlock(in_ch, out_ch, emb_ch=cfg.emb_ch, dropout=cfg.dropout)
        self.self_attn = None
        self.cross_attn = None
        if use_attn:
            self.self_attn = AttnBlock(out_ch, cfg.attn_heads, cross=False)
            if frames == 2 and cfg.use_cross_attn:
                self.cross_attn = AttnBlock(out_ch, cfg.attn_heads, cross=True)

    def forward(self, h, emb):
        h = self.res(h, emb)
        if self.self_attn is not None:
            h = self.self_attn(h)
        if self.cross_attn is not None:
            h = self.cross_attn(h)
        return h


def logsnr_unit_time(logsnr: torch.Tensor) -> torch.Tensor:
    """Map log-SNR (clipped to [-20, 20]) to (0, 1) for sinusoidal embedding."""
    lam = torch.clamp(logsnr, -20.0, 20.0)
    return 2.0 * torch.atan(torch.exp(-lam / 2.0)) / math.pi


class ConditioningProcessor(nn.Module):
    """Noise-level and camera-pose conditioning for every UNet resolution.

    Produces a per-frame noise-level embedding and, per resolution level, a
    per-pixel pose embedding map built from positional-encoded ray origins and
    directions; the pose map is zeroed where the conditioning mask is off so
    the same weights serve classifier-free unconditional evaluations.
    """

    def __init__(self, cfg: XUNetConfig, num_resolutions: int):
        super().__init__()
        self.cfg = cfg
        d = POSE_EMB_CHANNELS
        self.logsnr_mlp = nn.Sequential(
            nn.Linear(cfg.emb_ch, cfg.emb_ch),
            nn.SiLU(),
            nn.Linear(cfg.emb_ch, cfg.emb_ch),
        )
        self.pos_emb = None
        if cfg.use_pos_emb:
            self.pos_emb = nn.Parameter(
                torch.randn(d, cfg.resolution, cfg.resolution) / math.sqrt(d)
            )
        self.ref_pose_emb = None
        if cfg.use_ref_pose_emb:
            self.ref_pose_emb = nn.Parameter(torch.randn(2, d) / math.sqrt(d))
        self.downsamples = nn.ModuleList(
            nn.Conv2d(d, cfg.emb_ch, 3, stride=2**i, padding=1)
            for i in range(num_resolutions)
        )

    def embed_logsnr(self, logsnr: torch.Tensor) -> torch.Tensor:
        emb = posenc_ddpm(logsnr_unit_time(logsnr), self.cfg.emb_ch, max_time=1.0)
        return self.logsnr_mlp(emb)

    def pose_feature_map(self, batch: DenoiserBatch) -> torch.Tensor:
        """Raw (B, 2, D, H, W) pose map: encoded rays, zeroed by cond_mask."""
        res = self.cfg.resolution
        K = batch.K[:, None].expand_as(batch.R)
        origins, dirs = ray_grid(batch.R, batch.t, K, res, res)
        pose_emb = torch.cat(
            [posenc_nerf(origins, *POS_ENC_DEGREES), posenc_nerf(dirs, *DIR_ENC_DEGREES)],
            dim=-1,
        )
        mask = batch.cond_mask.view(-1, 1, 1, 1, 1)
        pose_emb = torch.where(mask, pose_emb, torch.zeros_like(pose_emb))
        return pose_emb.permute(0, 1, 4, 2, 3)

    def forward(self, batch: DenoiserBatch):
        logsnr_emb = self.embed_logsnr(batch.logsnr)

        pose_emb = self.pose_feature_map(batch)
        if self.pos_emb is not None:
            pose_emb = pose_emb + self.pos_emb[None, None]
        if self.ref_pose_emb is not None:
            pose_emb = pose_emb + self.ref_pose_emb[None, :, :, None, None]

        pose_embs = [_split(conv(_merge(pose_emb)), 2) for conv in self.downsamples]
        return logsnr_emb, pose_embs


class UNetCore(nn.Module):
    """Down/middle/up block stack shared by the two denoiser variants."""

    def __init__(self, cfg: XUNetConfig, in_channels: int, frames: int):
        super().__init__()
        self.cfg = cfg
        self.frames = frames
        levels = len(cfg.ch_mult)
        kw = dict(emb_ch=cfg.emb_ch, dropout=cfg.dropout)

        self.stem = nn.Conv2d(in_channels, cfg.ch, 3, padding=1)
        ch = cfg.ch
        res = cfg.resolution
        skips = [ch]

        self.down_blocks = nn.ModuleList()
        self.down_samples = nn.ModuleList()
        for level, mult in enumerate(cfg.ch_mult):
            feats = cfg.ch * mult
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(
                    XUNetBlock(ch, feats, cfg, use_attn=res in cfg.attn_resolutions,
                               frames=frames)
                )
                ch = feats
                skips.append(ch)
            self.down_blocks.append(blocks)
            if level != levels - 1:
                self.down_samples.append(ResnetBlock(ch, resample="down", **kw))
                res //= 2
                skips.append(ch)
            else:
                self.down_samples.append(None)

        self.middle = XUNetBlock(ch, ch, cfg, use_attn=res in cfg.attn_resolutions,
                                 frames=frames)

        self.up_blocks = nn.ModuleList()
        self.up_samples = nn.ModuleList()
        for level in reversed(range(levels)):
            feats = cfg.ch * cfg.ch_mult[level]
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks + 1):
                blocks.append(
                    XUNetBlock(ch + skips.pop(), feats, cfg,
                               use_attn=res in cfg.attn_resolutions, frames=frames)
                )
                ch = feats
            self.up_blocks.append(blocks)
            if level != 0:
                self.up_samples.append(ResnetBlock(ch, resample="up", **kw))
                res *= 2
            else:
                self.up_samples.append(None)
        assert not skips

        self.out_norm = FrameGroupNorm(ch)
        self.out_conv = _zero_init(nn.Conv2d(ch, 3, 3, padding=1))

    def forward(self, h, logsnr_emb, pose_embs):
        levels = len(self.cfg.ch_mult)
        lam = logsnr_emb[..., None, None]

        h = _split(self.stem(_merge(h)), self.frames)
        hs = [h]
        for level in range(levels):
            emb = lam + pose_embs[level]
            for block in self.down_blocks[level]:
                h = block(h, emb)
                hs.append(h)
            if self.down_samples[level] is not None:
                h = self.down_samples[level](h, lam + pose_embs[level + 1])
                hs.append(h)

        h = self.middle(h, lam + pose_embs[-1])

        for i, level in enumerate(reversed(range(levels))):
            emb = lam + pose_embs[level]
            for block in self.up_blocks[i]:
                h = block(torch.cat([h, hs.pop()], dim=2), emb)
            if self.up_samples[i] is not None:
                h = self.up_samples[i](h, lam + pose_embs[level - 1])
        assert not hs

        h = F.silu(self.out_norm(h))
        return _split(self.out_conv(_merge(h)), self.frames)


class XUNet(nn.Module):
    """Weight-shared two-frame denoiser; returns the noisy frame's prediction."""

    def __init__(self, cfg: XUNetConfig):
        super().__init__()
        self.cfg = cfg
        self.cond = ConditioningProcessor(cfg, len(cfg.ch_mult))
        self.core = UNetCore(cfg, in_channels=3, frames=2)

    def forward(self, batch: DenoiserBatch, return_all_frames: bool = False):
        logsnr_emb, pose_embs = self.cond(batch)
        h = torch.stack([batch.x, batch.z], dim=1)
        out = self.core(h, logsnr_emb, pose_embs)
        return out if return_all_frames else out[:, 1]


class ConcatUNet(nn.Module):
    """Baseline: conditioning view concatenated channel-wise, no cross attention.

    Pose and noise-level embeddings are still FiLM-summed (reduced over the
    frame axis, the per-frame binary embedding keeping them distinguishable).
    """

    def __init__(self, cfg: XUNetConfig):
        super().__init__()
        self.cfg = cfg
        self.cond = ConditioningProcessor(cfg, len(cfg.ch_mult))
        self.core = UNetCore(cfg, in_channels=6, frames=1)

    def forward(self, batch: DenoiserBatch):
        logsnr_emb, pose_embs = self.cond(batch)
        logsnr_emb = logsnr_emb.sum(dim=1, keepdim=True)
        pose_embs = [p.sum(dim=1, keepdim=True) for p in pose_embs]
        h = torch.cat([batch.x, batch.z], dim=1)[:, None]
        return self.core(h, logsnr_emb, pose_embs)[:, 0]


def apply_uncond_override(
    batch: DenoiserBatch,
    uncond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
) -> DenoiserBatch:
    """Route the selected batch elements through the unconditional pathway.

    For masked elements the pose embeddings are disabled via cond_mask, the
    clean frame's pixels are replaced with unit Gaussian noise, and its
    log-SNR input is set to logsnr_min (maximum noise).
    """
    noise = torch.randn(batch.x.shape, generator=generator, dtype=batch.x.dtype)
    m = uncond.view(-1, 1, 1, 1)
    x = torch.where(m, noise, batch.x)
    logsnr = batch.logsnr.clone()
    logsnr[:, 0] = torch.where(
        uncond, torch.full_like(logsnr[:, 0], schedule.logsnr_min), logsnr[:, 0]
    )
    return dataclasses.replace(
        batch, x=x, logsnr=logsnr, cond_mask=batch.cond_mask & ~uncond
    )


def regression_forward(
    model: nn.Module,
    schedule: NoiseSchedule,
    x: torch.Tensor,
    R: torch.Tensor,
    t: torch.Tensor,
    K: torch.Tensor,
    generator: torch.Generator,
) -> torch.Tensor:
    """Single-step generation: feed pure noise at logsnr_min, denoise once."""
    b = x.shape[0]
    z = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    logsnr = torch.tensor([[schedule.logsnr_max, schedule.logsnr_min]], dtype=x.dtype)
    batch = DenoiserBatch(
        x=x,
        z=z,
        logsnr=logsnr.expand(b, 2),
        R=R,
        t=t,
        K=K,
        cond_mask=torch.ones(b, dtype=torch.bool),
    )
    was_training = model.training
    model.eval()
    with torch.no_grad():
        eps_hat = model(batch)
    model.train(was_training)
    return predict_x(z, schedule.logsnr_min, eps_hat)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
