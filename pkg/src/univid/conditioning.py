"""Prompt encoders and condition-driven attention.

Text and image prompts are embedded by small pluggable encoders into a common
width d_c; a dual-stream cross attention mixes both into each frame with
non-negative weights (lambda_text, lambda_image), and a temporal attention
propagates the result across frames. An absent stream contributes an exact
zero, never an attention over an empty sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
from einops import rearrange
from torch import nn

from .attention import QKVO, attend
from .errors import ConditionError, ShapeError, VocabError


class Vocabulary:
    """Caption vocabulary; file order defines token ids."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise VocabError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, caption: list[str]) -> torch.Tensor:
        unknown = [t for t in caption if t not in self.ids]
        if unknown:
            raise VocabError(f"unknown tokens {unknown}; vocabulary has {len(self.tokens)} entries")
        return torch.tensor([self.ids[t] for t in caption], dtype=torch.long)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.splitlines() if line])

    def save(self, path: str | Path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sin/cos embedding of integer positions, shape [len(positions), dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    angles = positions.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros(len(positions), 1)], dim=-1)
    return emb


class TextEncoder(nn.Module):
    """Token-embedding table plus learned positional embedding."""

    def __init__(self, vocab_size: int, width: int, max_len: int = 8):
        super().__init__()
        self.table = nn.Embedding(vocab_size, width)
        self.pos = nn.Parameter(torch.zeros(max_len, width))
        self.width = width

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.table.weight.data.normal_(0.0, std, generator=gen)
        self.pos.data.normal_(0.0, std, generator=gen)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.numel() == 0:
            return torch.zeros(0, self.width)
        n = token_ids.shape[0]
        if n > self.pos.shape[0]:
            raise ShapeError(f"caption length {n} exceeds positional table {self.pos.shape[0]}")
        return self.table(token_ids) + self.pos[:n]


class ImageEncoder(nn.Module):
    """Non-overlapping patchify -> linear projection -> learned positional embedding."""

    def __init__(self, in_channels: int, patch: int, width: int, n_tokens: int):
        super().__init__()
        self.patch = patch
        self.in_channels = in_channels
        self.proj = nn.Linear(in_channels * patch * patch, width)
        self.pos = nn.Parameter(torch.zeros(n_tokens, width))

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.proj.weight.data.normal_(0.0, std, generator=gen)
        nn.init.zeros_(self.proj.bias)
        self.pos.data.normal_(0.0, std, generator=gen)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 3 or image.shape[0] != self.in_channels:
            raise ShapeError(f"expected [{self.in_channels}, H, W], got {tuple(image.shape)}")
        C, H, W = image.shape
        p = self.patch
        if H % p != 0 or W % p != 0:
            raise ShapeError(f"image size {H}x{W} not divisible by patch {p}")
        tokens = rearrange(image, "c (gh p1) (gw p2) -> (gh gw) (c p1 p2)", p1=p, p2=p)
        n = tokens.shape[0]
        if n != self.pos.shape[0]:
            raise ShapeError(f"{n} patches but positional table sized {self.pos.shape[0]}")
        return self.proj(tokens) + self.pos


@dataclass(frozen=True)
class ConditionBundle:
    """Prompt embeddings with fusion weights; stream absent <=> its weight is 0."""

    text: torch.Tensor | None
    image: torch.Tensor | None
    lambda_t: float
    lambda_v: float

    @classmethod
    def create(cls, text: torch.Tensor | None, image: torch.Tensor | None,
               lambda_t: float, lambda_v: float) -> "ConditionBundle":
        if lambda_t < 0 or lambda_v < 0:
            raise ConditionError(f"guidance weights must be non-negative, got ({lambda_t}, {lambda_v})")
        if text is not None and text.shape[0] == 0:
            text = None  # empty caption counts as absent
        if image is not None and image.shape[0] == 0:
            image = None
        if text is None and lambda_t > 0:
            raise ConditionError("lambda_t > 0 but the text stream is absent")
        if image is None and lambda_v > 0:
            raise ConditionError("lambda_v > 0 but the image stream is absent")
        if lambda_t == 0:
            text = None
        if lambda_v == 0:
            image = None
        if text is not None and image is not None and text.shape[1] != image.shape[1]:
            raise ConditionError(
                f"stream widths differ: text {text.shape[1]} vs image {image.shape[1]}"
            )
        return cls(text=text, image=image, lambda_t=float(lambda_t), lambda_v=float(lambda_v))

    @classmethod
    def unconditional(cls) -> "ConditionBundle":
        return cls(text=None, image=None, lambda_t=0.0, lambda_v=0.0)


class DualCrossAttention(nn.Module):
    """Two-path cross attention against text tokens and image patch tokens.

        out = z + lambda_t * Attn(Q, K_t, V_t) + lambda_v * Attn(Q, K_v, V_v)

    with a shared query projection of the spatial tokens and stream-specific
    K/V projections from the d_c embedding width. There is no output
    projection; the stream outputs fuse directly, so the update is bilinear in
    the weights by construction.
    """

    def __init__(self, channels: int, cond_width: int, heads: int = 4):
        super().__init__()
        if channels % heads != 0:
            raise ShapeError(f"heads={heads} must divide channels={channels}")
        self.heads = heads
        self.cond_width = cond_width
        self.w_q = nn.Linear(channels, channels, bias=False)
        self.w_k_text = nn.Linear(cond_width, channels, bias=False)
        self.w_v_text = nn.Linear(cond_width, channels, bias=False)
        self.w_k_image = nn.Linear(cond_width, channels, bias=False)
        self.w_v_image = nn.Linear(cond_width, channels, bias=False)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        for lin in (self.w_q, self.w_k_text, self.w_v_text, self.w_k_image, self.w_v_image):
            lin.weight.data.normal_(0.0, std, generator=gen)

    def _stream(self, tokens: torch.Tensor, emb: torch.Tensor, w_k, w_v) -> torch.Tensor:
        if emb.shape[1] != self.cond_width:
            raise ShapeError(f"embedding width {emb.shape[1]} != configured {self.cond_width}")
        return attend(tokens, emb, self.w_q, w_k, w_v, self.heads)

    def update(self, z: torch.Tensor, cond: ConditionBundle) -> torch.Tensor:
        """Pre-residual branch output for [B, F, C, H, W] input."""
        if z.dim() != 5:
            raise ShapeError(f"expected [B, F, C, H, W], got {tuple(z.shape)}")
        B, F, C, H, W = z.shape
        tokens = rearrange(z, "b f c h w -> (b f) (h w) c")
        delta = torch.zeros_like(tokens)
        if cond.text is not None:
            delta = delta + cond.lambda_t * self._stream(tokens, cond.text, self.w_k_text, self.w_v_text)
        if cond.image is not None:
            delta = delta + cond.lambda_v * self._stream(tokens, cond.image, self.w_k_image, self.w_v_image)
        return rearrange(delta, "(b f) (h w) c -> b f c h w", b=B, h=H)

    def forward(self, z: torch.Tensor, cond: ConditionBundle) -> torch.Tensor:
        return z + self.update(z, cond)


def dual_cross_attention(z_frame: torch.Tensor, cond: ConditionBundle,
                         module: DualCrossAttention, residual: bool = True) -> torch.Tensor:
    """Single-frame form on [C, H, W]."""
    if z_frame.dim() != 3:
        raise ShapeError(f"expected [C, H, W], got {tuple(z_frame.shape)}")
    delta = module.update(z_frame[None, None], cond)[0, 0]
    return z_frame + delta if residual else delta


class TemporalAttention(nn.Module):
    """Self-attention along the frame axis at every spatial location.

    Rearranges [B, F, C, H, W] -> [(B H W), F, C], adds a fixed sinusoidal
    frame-position embedding, attends over F, and adds the W_O-projected
    result residually. W_O is zero-initialized.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.proj = QKVO(channels, heads=heads, out_proj=True, zero_out=True)
        self.channels = channels

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        self.proj.init_weights(gen, std)

    def update(self, z: torch.Tensor, use_pos: bool = True) -> torch.Tensor:
        if z.dim() != 5:
            raise ShapeError(f"expected [B, F, C, H, W], got {tuple(z.shape)}")
        B, F, C, H, W = z.shape
        seq = rearrange(z, "b f c h w -> (b h w) f c")
        if use_pos:
            seq = seq + sinusoidal_embedding(torch.arange(F), C).to(seq.dtype)
        out = self.proj(seq, seq)
        return rearrange(out, "(b h w) f c -> b f c h w", b=B, h=H, w=W)

    def forward(self, z: torch.Tensor, use_pos: bool = True) -> torch.Tensor:
        return z + self.update(z, use_pos=use_pos)


def temporal_attention(z: torch.Tensor, module: TemporalAttention,
                       use_pos: bool = True, residual: bool = True) -> torch.Tensor:
    """Module form mirroring the batched forward; z is [B, F, C, H, W]."""
    delta = module.update(z, use_pos=use_pos)
    return z + delta if residual else delta
