"""Spatial-temporal denoising U-Net.

Each level holds an STBlock applying, in order and each residually:
pyramid conv (timestep scale-shift in its spatial stage), per-frame spatial
self-attention, pyramid spatial-temporal attention against a shared
reference-frame set, dual-stream cross attention, and temporal attention.
The encoder runs factors 1 -> 2 -> 4 with a middle block at 8; the decoder
mirrors it with channel-concatenated skips. The head predicts the noise.

Parameters partition into three groups: the temporal mixers and the
pyramid/temporal attentions are `temporal`; the dual-stream projections and
the prompt encoders are `conditioning`; everything else is `spatial`.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from einops import rearrange
from torch import nn

from .attention import QKVO
from .conditioning import (ConditionBundle, DualCrossAttention, ImageEncoder,
                           TemporalAttention, TextEncoder, sinusoidal_embedding)
from .errors import ShapeError, StageError
from .pyramid import (PSTAttention, PSTConv, PyramidSchedule, build_reference_set,
                      _norm_groups)

GROUPS = ("spatial", "temporal", "conditioning")


@dataclass(frozen=True)
class STBlockConfig:
    factor: int
    channels: int
    step: int
    kernel: int
    heads: int


class SelfAttention2D(nn.Module):
    """Per-frame attention over the H*W spatial tokens, residual, W_O zero-init."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.proj = QKVO(channels, heads=heads, out_proj=True, zero_out=True)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.proj.init_weights(gen, std)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        B, F, C, H, W = z.shape
        tokens = rearrange(z, "b f c h w -> (b f) (h w) c")
        out = self.proj(tokens, tokens)
        return z + rearrange(out, "(b f) (h w) c -> b f c h w", b=B, h=H)


class TimestepEmbedding(nn.Module):
    """Sinusoidal timestep features through a small MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        for lin in (self.fc1, self.fc2):
            lin.weight.data.normal_(0.0, std, generator=gen)
            nn.init.zeros_(lin.bias)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if t.dim() == 0:
            t = t[None]
        emb = sinusoidal_embedding(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(torch.nn.functional.silu(self.fc1(emb)))


class STBlock(nn.Module):
    def __init__(self, cfg: STBlockConfig, cond_width: int, temb_dim: int):
        super().__init__()
        self.cfg = cfg
        self.conv = PSTConv(cfg.channels, cfg.kernel, temb_dim=temb_dim)
        self.self_attn = SelfAttention2D(cfg.channels, cfg.heads)
        self.pst_attn = PSTAttention(cfg.channels, cfg.heads)
        self.cross_attn = DualCrossAttention(cfg.channels, cond_width, cfg.heads)
        self.temp_attn = TemporalAttention(cfg.channels, cfg.heads)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        for m in (self.conv, self.self_attn, self.pst_attn, self.cross_attn, self.temp_attn):
            m.init_weights(gen, std)

    def forward(self, z: torch.Tensor, temb: torch.Tensor, cond: ConditionBundle,
                mode: str = "infer-mid", rng: torch.Generator | None = None) -> torch.Tensor:
        F = z.shape[1]
        step = 1 if F == 1 else self.cfg.step
        refs = build_reference_set(F, step, mode, rng)
        z = self.conv(z, temb)
        z = self.self_attn(z)
        z = self.pst_attn(z, refs)
        z = self.cross_attn(z, cond)
        z = self.temp_attn(z)
        return z


def _conv2d_frames(conv: nn.Module, z: torch.Tensor) -> torch.Tensor:
    B = z.shape[0]
    return rearrange(conv(rearrange(z, "b f c h w -> (b f) c h w")), "(b f) c h w -> b f c h w", b=B)


class Downsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.conv.weight.data.normal_(0.0, std, generator=gen)
        nn.init.zeros_(self.conv.bias)

    def forward(self, z):
        return _conv2d_frames(self.conv, z)


class Upsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.conv.weight.data.normal_(0.0, std, generator=gen)
        nn.init.zeros_(self.conv.bias)

    def forward(self, z):
        B = z.shape[0]
        x = rearrange(z, "b f c h w -> (b f) c h w")
        x = torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        return rearrange(self.conv(x), "(b f) c h w -> b f c h w", b=B)


class FuseSkip(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.conv.weight.data.normal_(0.0, std, generator=gen)
        nn.init.zeros_(self.conv.bias)

    def forward(self, z, skip):
        return _conv2d_frames(self.conv, torch.cat([z, skip], dim=2))


class DenoiserUNet(nn.Module):
    """Noise predictor over [B, F, C, H, W] latents; H and W divisible by 8."""

    def __init__(self, in_channels: int, channels: tuple[int, int, int, int],
                 heads: int, cond_width: int, temb_dim: int, pyramid: PyramidSchedule):
        super().__init__()
        c1, c2, c4, c8 = channels
        self.in_channels = in_channels
        self.pyramid = pyramid

        def blk(c, f):
            lv = pyramid.level(f)
            return STBlock(STBlockConfig(f, c, lv.step, lv.kernel, heads), cond_width, temb_dim)

        self.time_embed = TimestepEmbedding(temb_dim)
        self.stem = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.enc1 = blk(c1, 1)
        self.down12 = Downsample(c1, c2)
        self.enc2 = blk(c2, 2)
        self.down24 = Downsample(c2, c4)
        self.enc4 = blk(c4, 4)
        self.down48 = Downsample(c4, c8)
        self.mid = blk(c8, 8)
        self.up84 = Upsample(c8, c4)
        self.fuse4 = FuseSkip(c4)
        self.dec4 = blk(c4, 4)
        self.up42 = Upsample(c4, c2)
        self.fuse2 = FuseSkip(c2)
        self.dec2 = blk(c2, 2)
        self.up21 = Upsample(c2, c1)
        self.fuse1 = FuseSkip(c1)
        self.dec1 = blk(c1, 1)
        self.head_norm = nn.GroupNorm(_norm_groups(c1), c1)
        self.head = nn.Conv2d(c1, in_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.time_embed.init_weights(gen, std)
        self.stem.weight.data.normal_(0.0, std, generator=gen)
        nn.init.zeros_(self.stem.bias)
        for m in (self.enc1, self.down12, self.enc2, self.down24, self.enc4, self.down48,
                  self.mid, self.up84, self.fuse4, self.dec4, self.up42, self.fuse2,
                  self.dec2, self.up21, self.fuse1, self.dec1):
            m.init_weights(gen, std)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor | int, cond: ConditionBundle,
                mode: str = "infer-mid", rng: torch.Generator | None = None) -> torch.Tensor:
        if z_t.dim() != 5:
            raise ShapeError(f"expected [B, F, C, H, W], got {tuple(z_t.shape)}")
        B, F, C, H, W = z_t.shape
        if C != self.in_channels:
            raise ShapeError(f"latent channels {C} != configured {self.in_channels}")
        if H % 8 or W % 8:
            raise ShapeError(f"H and W must be divisible by 8, got {H}x{W}")
        if isinstance(t, int):
            t = torch.full((B,), t, dtype=torch.long)
        elif t.dim() == 0:
            t = t.repeat(B)
        if t.shape[0] != B:
            raise ShapeError(f"need {B} timesteps, got {tuple(t.shape)}")
        temb = self.time_embed(t)

        h = _conv2d_frames(self.stem, z_t)
        s1 = self.enc1(h, temb, cond, mode, rng)
        h = self.down12(s1)
        s2 = self.enc2(h, temb, cond, mode, rng)
        h = self.down24(s2)
        s4 = self.enc4(h, temb, cond, mode, rng)
        h = self.down48(s4)
        h = self.mid(h, temb, cond, mode, rng)
        h = self.fuse4(self.up84(h), s4)
        h = self.dec4(h, temb, cond, mode, rng)
        h = self.fuse2(self.up42(h), s2)
        h = self.dec2(h, temb, cond, mode, rng)
        h = self.fuse1(self.up21(h), s1)
        h = self.dec1(h, temb, cond, mode, rng)
        x = rearrange(h, "b f c h w -> (b f) c h w")
        x = self.head(torch.nn.functional.silu(self.head_norm(x)))
        return rearrange(x, "(b f) c h w -> b f c h w", b=B)


class UniVidModel(nn.Module):
    """The denoiser plus the two prompt encoders (the full trainable surface)."""

    def __init__(self, unet: DenoiserUNet, text_encoder: TextEncoder, image_encoder: ImageEncoder):
        super().__init__()
        self.unet = unet
        self.text_encoder = text_encoder
        self.image_encoder = image_encoder

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.unet.init_weights(gen, std)
        self.text_encoder.init_weights(gen, std)
        self.image_encoder.init_weights(gen, std)

    def forward(self, z_t, t, cond, mode="infer-mid", rng=None):
        return self.unet(z_t, t, cond, mode, rng)


# ---------------------------------------------------------------------------
# parameter store and staged-training selection

_TEMPORAL_TYPES = ("TemporalMixer", "PSTAttention", "TemporalAttention")
_CONDITIONING_TYPES = ("DualCrossAttention", "TextEncoder", "ImageEncoder")


class ParameterStore:
    """Named parameters, each tagged with exactly one group."""

    def __init__(self, params: dict[str, nn.Parameter], groups: dict[str, str]):
        if set(params) != set(groups):
            raise ShapeError("params and groups must cover the same names")
        bad = {n: g for n, g in groups.items() if g not in GROUPS}
        if bad:
            raise ShapeError(f"unknown groups: {bad}")
        self.params = params
        self.groups = groups

    @classmethod
    def from_model(cls, model: nn.Module) -> "ParameterStore":
        owner: dict[str, str] = {}
        for mod_name, mod in model.named_modules():
            tname = type(mod).__name__
            if tname in _TEMPORAL_TYPES:
                owner[mod_name] = "temporal"
            elif tname in _CONDITIONING_TYPES:
                owner[mod_name] = "conditioning"
        params, groups = {}, {}
        for name, p in model.named_parameters():
            group = "spatial"
            best = -1
            for mod_name, g in owner.items():
                if name.startswith(mod_name + ".") and len(mod_name) > best:
                    group, best = g, len(mod_name)
            params[name] = p
            groups[name] = group
        return cls(params, groups)

    def names_in_group(self, group: str) -> list[str]:
        return sorted(n for n, g in self.groups.items() if g == group)

    def counts(self) -> dict[str, int]:
        out = {g: 0 for g in GROUPS}
        for name, p in self.params.items():
            out[self.groups[name]] += p.numel()
        return out

    def clone_values(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.params.items()}

    def load_values(self, values: dict[str, torch.Tensor]):
        missing = set(self.params) - set(values)
        extra = set(values) - set(self.params)
        if missing or extra:
            raise ShapeError(f"parameter name mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        with torch.no_grad():
            for n, p in self.params.items():
                if tuple(values[n].shape) != tuple(p.shape):
                    raise ShapeError(f"parameter {n}: shape {tuple(values[n].shape)} != {tuple(p.shape)}")
                p.copy_(values[n])


STAGES = ("t2v", "adapters", "joint")

_VIDEO_STAGE_GROUPS = {
    "t2v": ("spatial", "temporal"),
    "adapters": ("conditioning",),
    "joint": ("spatial", "temporal", "conditioning"),
}


def select_trainable(store: ParameterStore, input_kind: str, stage: str) -> set[str]:
    """Image batches update the spatial group only; video batches follow the stage table."""
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if input_kind == "image":
        wanted = ("spatial",)
    elif input_kind == "video":
        wanted = _VIDEO_STAGE_GROUPS[stage]
    else:
        raise StageError(f"unknown input kind {input_kind!r}; expected image or video")
    return {n for n, g in store.groups.items() if g in wanted}
