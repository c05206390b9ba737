"""Pyramid spatial-temporal attention and convolution.

A video feature map [F, C, H/f, W/f] at U-Net factor f gets its temporal reach
from two per-factor knobs: a step size r (how sparsely reference frames are
drawn) and a temporal kernel size k. Frames attend to the spatial tokens of a
shared reference-frame subset, and each 2D convolution gains a channel-mixing
1D convolution along the frame axis. Both are wired so that at initialization
(zero output projection, Dirac temporal taps) the whole thing collapses to the
per-frame 2D behaviour.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import torch
from einops import rearrange
from torch import nn

from .attention import QKVO
from .errors import KernelError, ReferenceSetError, ShapeError

FACTORS = (1, 2, 4, 8)

# Step sizes shrink (denser reference sets) and kernels widen toward the middle
# of the U-Net; the F=8 table is (r, k) = 1->(4,1), 2->(2,3), 4->(1,3), 8->(1,5).
DEFAULT_STEP = {1: 4, 2: 2, 4: 1, 8: 1}
DEFAULT_KERNEL = {1: 1, 2: 3, 4: 3, 8: 5}


@dataclass(frozen=True)
class PyramidLevel:
    step: int
    kernel: int


@dataclass(frozen=True)
class PyramidSchedule:
    """Map from U-Net downsampling factor to (temporal step size, temporal kernel size)."""

    entries: dict[int, PyramidLevel]
    frames: int

    def __post_init__(self):
        if set(self.entries) != set(FACTORS):
            raise ReferenceSetError(f"schedule must cover factors {FACTORS}, got {sorted(self.entries)}")
        prev_n, prev_k = 0, 0
        for f in FACTORS:
            lv = self.entries[f]
            if lv.kernel < 1 or lv.kernel % 2 == 0:
                raise KernelError(f"kernel at factor {f} must be odd and >= 1, got {lv.kernel}")
            if lv.step < 1 or self.frames % lv.step != 0:
                raise ReferenceSetError(
                    f"step {lv.step} at factor {f} does not divide frame count {self.frames}"
                )
            n = self.frames // lv.step
            if n < prev_n or lv.kernel < prev_k:
                raise ReferenceSetError(
                    "reference count and kernel size must be non-decreasing toward the middle"
                )
            prev_n, prev_k = n, lv.kernel

    def level(self, factor: int) -> PyramidLevel:
        return self.entries[factor]


def schedule_for(F: int, overrides: dict[int, PyramidLevel] | None = None) -> PyramidSchedule:
    """Default pyramid schedule for an F-frame video.

    Default step sizes are clamped to the largest divisor of F not exceeding the
    table value (so F=1 degenerates to step 1 everywhere); explicit overrides
    are validated strictly and raise when the step does not divide F.
    """
    if F < 1:
        raise ReferenceSetError(f"frame count must be >= 1, got {F}")
    entries = {}
    for f in FACTORS:
        if overrides and f in overrides:
            entries[f] = overrides[f]
        else:
            r = max(d for d in range(1, DEFAULT_STEP[f] + 1) if F % d == 0)
            entries[f] = PyramidLevel(step=r, kernel=DEFAULT_KERNEL[f])
    return PyramidSchedule(entries=entries, frames=F)


@dataclass(frozen=True)
class ReferenceSet:
    """Strictly increasing 1-based frame indices, one per temporal segment."""

    frames: tuple[int, ...]

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ReferenceSetError("reference set must not be empty")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ReferenceSetError(f"reference frames must be strictly increasing, got {self.frames}")


ReferenceMode = Literal["train-random", "infer-mid"]


def build_reference_set(
    F: int,
    r: int,
    mode: ReferenceMode = "infer-mid",
    rng: torch.Generator | None = None,
) -> ReferenceSet:
    """Split [1..F] into F/r contiguous segments and pick one frame per segment.

    infer-mid picks floor((lo+hi)/2) of each segment; train-random draws
    uniformly inside each segment from rng.
    """
    if F < 1:
        raise ReferenceSetError(f"frame count must be >= 1, got {F}")
    if r < 1 or F % r != 0:
        raise ReferenceSetError(f"step size {r} does not divide frame count {F}")
    picks = []
    for seg in range(F // r):
        lo, hi = seg * r + 1, (seg + 1) * r
        if mode == "infer-mid":
            picks.append((lo + hi) // 2)
        elif mode == "train-random":
            if rng is None:
                raise ReferenceSetError("train-random mode needs an rng")
            picks.append(int(torch.randint(lo, hi + 1, (1,), generator=rng)))
        else:
            raise ReferenceSetError(f"unknown mode {mode!r} (expected train-random or infer-mid)")
    return ReferenceSet(frames=tuple(picks))


class PSTAttention(nn.Module):
    """Cross-frame attention against a shared reference-frame subset.

    Per frame, queries are its H*W spatial tokens; keys/values are the
    concatenated spatial tokens of the reference frames. The per-head outputs
    are merged through a zero-initialized W_O and added residually, so the
    branch is inert at init. Frame order inside the reference set is
    irrelevant up to float summation order (no temporal position encoding).
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.proj = QKVO(channels, heads=heads, out_proj=True, zero_out=True)
        self.channels = channels

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.proj.init_weights(gen, std)

    def update(self, z: torch.Tensor, refs) -> torch.Tensor:
        """Pre-residual branch output for [B, F, C, H, W] input.

        refs is a ReferenceSet or a plain sequence of 1-based frame indices;
        key order only changes float summation order, not the result.
        """
        if z.dim() != 5:
            raise ShapeError(f"expected [B, F, C, H, W], got {tuple(z.shape)}")
        B, F, C, H, W = z.shape
        if C != self.channels:
            raise ShapeError(f"channel count {C} != configured {self.channels}")
        frames = refs.frames if isinstance(refs, ReferenceSet) else tuple(refs)
        if len(frames) == 0:
            raise ReferenceSetError("reference set must not be empty")
        if any(not 1 <= i <= F for i in frames):
            raise ReferenceSetError(f"reference frames {frames} outside [1, {F}]")
        tokens = rearrange(z, "b f c h w -> b f (h w) c")
        idx = torch.tensor([i - 1 for i in frames], dtype=torch.long)
        keys = rearrange(tokens[:, idx], "b n s c -> b (n s) c")
        out = self.proj(tokens, keys.unsqueeze(1))  # broadcast keys over the frame axis
        return rearrange(out, "b f (h w) c -> b f c h w", h=H, w=W)

    def forward(self, z: torch.Tensor, refs) -> torch.Tensor:
        return z + self.update(z, refs)


def pst_attention(z: torch.Tensor, refs: ReferenceSet, module: PSTAttention,
                  residual: bool = True) -> torch.Tensor:
    """Single-clip form of PSTAttention on [F, C, H, W]."""
    if z.dim() != 4:
        raise ShapeError(f"expected [F, C, H, W], got {tuple(z.shape)}")
    delta = module.update(z.unsqueeze(0), refs)[0]
    return z + delta if residual else delta


class TemporalMixer(nn.Module):
    """Channel-mixing 1D convolution along the frame axis, zero-padded, Dirac-init.

    Dirac taps make it the identity map per frame, which is what preserves the
    2D behaviour of the surrounding block at initialization. The convolution is
    spelled as unfold + einsum rather than nn.Conv1d: the fused conv kernels
    are not exactly zero-preserving at all sizes, which would break the bitwise
    identity-at-init contract.
    """

    def __init__(self, channels: int, kernel_size: int):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise KernelError(f"temporal kernel size must be odd and >= 1, got {kernel_size}")
        self.weight = nn.Parameter(torch.empty(channels, channels, kernel_size))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.reset_dirac()

    def reset_dirac(self):
        nn.init.dirac_(self.weight)
        nn.init.zeros_(self.bias)

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 5:
            raise ShapeError(f"expected [B, F, C, H, W], got {tuple(z.shape)}")
        B, F, C, H, W = z.shape
        seq = rearrange(z, "b f c h w -> (b h w) c f")
        pad = self.kernel_size // 2
        windows = torch.nn.functional.pad(seq, (pad, pad)).unfold(-1, self.kernel_size, 1)
        out = torch.einsum("ock,bcfk->bof", self.weight, windows) + self.bias[None, :, None]
        return rearrange(out, "(b h w) c f -> b f c h w", b=B, h=H, w=W)


class PSTConv(nn.Module):
    """2D spatial convolution stack per frame followed by a temporal mixer.

        out = z + temporal(spatial(z))

    so a Dirac temporal kernel reproduces the residual 2D-only block
    z + spatial(z) exactly. The spatial stage is pluggable; None builds the
    default norm/SiLU/conv stack with optional timestep scale-shift.
    """

    def __init__(self, channels: int, kernel_size: int, temb_dim: int | None = None,
                 spatial: nn.Module | None = None):
        super().__init__()
        self.spatial = SpatialConvStack(channels, temb_dim) if spatial is None else spatial
        self.temporal = TemporalMixer(channels, kernel_size)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        if isinstance(self.spatial, SpatialConvStack):
            self.spatial.init_weights(gen, std)
        self.temporal.reset_dirac()

    def update(self, z: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        """Pre-residual branch output temporal(spatial(z))."""
        if z.dim() != 5:
            raise ShapeError(f"expected [B, F, C, H, W], got {tuple(z.shape)}")
        return self.temporal(self.spatial(z, temb))

    def forward(self, z: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        return z + self.update(z, temb)


def pst_conv(z: torch.Tensor, module: PSTConv, temb: torch.Tensor | None = None) -> torch.Tensor:
    """Single-clip form of PSTConv on [F, C, H, W]."""
    if z.dim() != 4:
        raise ShapeError(f"expected [F, C, H, W], got {tuple(z.shape)}")
    return module(z.unsqueeze(0), temb)[0]


def _norm_groups(channels: int, cap: int = 8) -> int:
    g = min(cap, channels)
    while channels % g != 0:
        g -= 1
    return g


class SpatialConvStack(nn.Module):
    """norm -> SiLU -> conv3x3 -> (timestep scale-shift) -> norm -> SiLU -> conv3x3.

    Applied per frame. The final conv is zero-initialized so the enclosing
    residual branch starts inert; the timestep embedding enters as a
    per-channel (1+scale, shift) on the second normalization.
    """

    def __init__(self, channels: int, temb_dim: int | None = None):
        super().__init__()
        g = _norm_groups(channels)
        self.norm1 = nn.GroupNorm(g, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(g, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, 2 * channels) if temb_dim else None
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.conv1.weight.data.normal_(0.0, std, generator=gen)
        nn.init.zeros_(self.conv1.bias)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        if self.temb_proj is not None:
            self.temb_proj.weight.data.normal_(0.0, std, generator=gen)
            nn.init.zeros_(self.temb_proj.bias)

    def forward(self, z: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        B, F, C, H, W = z.shape
        x = rearrange(z, "b f c h w -> (b f) c h w")
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = self.norm2(h)
        if self.temb_proj is not None and temb is not None:
            ss = self.temb_proj(torch.nn.functional.silu(temb))  # [B, 2C]
            scale, shift = ss.chunk(2, dim=-1)
            scale = scale.repeat_interleave(F, dim=0)[:, :, None, None]
            shift = shift.repeat_interleave(F, dim=0)[:, :, None, None]
            h = h * (1.0 + scale) + shift
        h = self.conv2(torch.nn.functional.silu(h))
        return rearrange(h, "(b f) c h w -> b f c h w", b=B)
