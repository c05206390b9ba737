"""Desk-scale quality proxies (explicitly not the pretrained-network metrics).

PSNR is computed per frame on [0, 1] pixels with identical frames reported as
a capped 99 dB sentinel; temporal smoothness is the mean absolute inter-frame
difference.
"""

from __future__ import annotations

import math

import torch

from .errors import ShapeError

SENTINEL_DB = 99.0


def psnr(a: torch.Tensor, b: torch.Tensor) -> tuple[list[float], float]:
    """Per-frame dB = 10*log10(1/MSE) plus the mean; inputs [F, C, H, W] in [0, 1]."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.dim() != 4:
        raise ShapeError(f"expected [F, C, H, W], got {tuple(a.shape)}")
    per_frame = []
    for f in range(a.shape[0]):
        mse = float(torch.mean((a[f] - b[f]) ** 2))
        db = SENTINEL_DB if mse <= 0 else min(SENTINEL_DB, -10.0 * math.log10(mse))
        per_frame.append(db)
    return per_frame, sum(per_frame) / len(per_frame)


def first_frame_fidelity(generated: torch.Tensor, reference: torch.Tensor) -> float:
    """PSNR between generated frame 0 and the reference image (both [C, H, W] scale)."""
    if generated.dim() != 4:
        raise ShapeError(f"expected generated video [F, C, H, W], got {tuple(generated.shape)}")
    _, mean_db = psnr(generated[0].unsqueeze(0), reference.unsqueeze(0))
    return mean_db


def temporal_smoothness(video: torch.Tensor) -> float:
    """Mean over consecutive frame pairs of mean |frame_{i+1} - frame_i|."""
    if video.dim() != 4:
        raise ShapeError(f"expected [F, C, H, W], got {tuple(video.shape)}")
    if video.shape[0] < 2:
        raise ShapeError("temporal smoothness needs at least 2 frames")
    diffs = torch.abs(video[1:] - video[:-1])
    return float(torch.mean(diffs))
