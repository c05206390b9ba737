"""Multi-head scaled-dot-product attention primitives shared by all attention blocks.

Everything here operates on token tensors [..., N, C] with the head split taken
over the channel axis. No normalization layers and no dropout: callers that need
them compose explicitly, and the hand-verifiable test cases rely on the bare
formula softmax(Q K^T / sqrt(d)) V.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ShapeError


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """[..., N, C] -> [..., heads, N, C/heads]."""
    *lead, n, c = x.shape
    if c % heads != 0:
        raise ShapeError(f"channel count {c} not divisible by {heads} heads")
    return x.view(*lead, n, heads, c // heads).transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    """[..., heads, N, d] -> [..., N, heads*d]."""
    *lead, h, n, d = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * d)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; leading axes broadcast."""
    d = q.shape[-1]
    scores = torch.matmul(q, k.transpose(-2, -1)) / (d**0.5)
    weights = torch.softmax(scores, dim=-1)
    return torch.matmul(weights, v)


def attend(q_tokens: torch.Tensor, kv_tokens: torch.Tensor, w_q: nn.Linear,
           w_k: nn.Linear, w_v: nn.Linear, heads: int) -> torch.Tensor:
    """Project, attend per head, and concatenate heads (no output projection).

    q_tokens: [..., Nq, C]; kv_tokens: [..., Nk, C_kv] broadcastable against the
    leading axes of q_tokens. Returns [..., Nq, heads * d_head].
    """
    q = split_heads(w_q(q_tokens), heads)
    k = split_heads(w_k(kv_tokens), heads)
    v = split_heads(w_v(kv_tokens), heads)
    return merge_heads(scaled_dot_attention(q, k, v))


class QKVO(nn.Module):
    """Projection bundle for one self/cross attention: W_Q, W_K, W_V and optional W_O.

    W_O is zero-initialized when zero_out is set so the residual branch starts
    inert; init_weights re-draws the remaining projections from an explicit
    generator.
    """

    def __init__(self, dim: int, kv_dim: int | None = None, heads: int = 1,
                 out_proj: bool = True, zero_out: bool = False):
        super().__init__()
        if heads < 1 or dim % heads != 0:
            raise ShapeError(f"heads={heads} must divide dim={dim}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(kv_dim, dim, bias=False)
        self.w_v = nn.Linear(kv_dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False) if out_proj else None
        self.zero_out = zero_out
        if zero_out and self.w_o is not None:
            nn.init.zeros_(self.w_o.weight)

    def init_weights(self, gen: torch.Generator, std: float = 0.02):
        for lin in (self.w_q, self.w_k, self.w_v):
            lin.weight.data.normal_(0.0, std, generator=gen)
        if self.w_o is not None:
            if self.zero_out:
                nn.init.zeros_(self.w_o.weight)
            else:
                self.w_o.weight.data.normal_(0.0, std, generator=gen)

    def forward(self, q_tokens: torch.Tensor, kv_tokens: torch.Tensor) -> torch.Tensor:
        out = attend(q_tokens, kv_tokens, self.w_q, self.w_k, self.w_v, self.heads)
        if self.w_o is not None:
            out = self.w_o(out)
        return out
