"""Reverse-process generation for text-, image-, and jointly-conditioned video.

Classifier-free guidance extrapolates eps_uncond + s * (eps_cond - eps_uncond);
s=1 evaluates only the conditional branch and s=0 only the unconditional one,
so those settings are exact by code path, not by float cancellation. When
steps < T the chain runs on an evenly strided timestep subset (always
containing t=1) via a coarsened schedule, while the denoiser still sees the
original timestep indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .conditioning import ConditionBundle, Vocabulary
from .dataio import VideoCodec, from_diffusion_space
from .diffusion import NoiseSchedule, reverse_step, strided_schedule
from .errors import ConditionError, ModeError
from .unet import UniVidModel

MODES = ("t2v", "i2v", "ti2v")
DEFAULT_LAMBDAS = {"t2v": (1.0, 0.0), "i2v": (0.0, 1.0), "ti2v": (1.0, 1.0)}


def _validate_mode(mode: str, prompt, image):
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode in ("t2v", "ti2v") and prompt is None:
        raise ModeError(f"mode {mode} needs a prompt")
    if mode in ("i2v", "ti2v") and image is None:
        raise ModeError(f"mode {mode} needs a reference image")
    if mode == "t2v" and image is not None:
        raise ModeError("mode t2v does not accept a reference image")
    if mode == "i2v" and prompt is not None:
        raise ModeError("mode i2v does not accept a prompt")


def _build_condition(model: UniVidModel, vocab: Vocabulary, prompt, image,
                     lambdas: tuple[float, float]) -> ConditionBundle:
    lt, lv = lambdas
    if lt < 0 or lv < 0:
        raise ConditionError(f"guidance weights must be non-negative, got ({lt}, {lv})")
    text = model.text_encoder(vocab.encode(prompt)) if (prompt is not None and lt > 0) else None
    img = model.image_encoder(image) if (image is not None and lv > 0) else None
    return ConditionBundle.create(text, img, lt if text is not None else 0.0,
                                  lv if img is not None else 0.0)


@torch.no_grad()
def generate(model: UniVidModel, schedule: NoiseSchedule, codec: VideoCodec, vocab: Vocabulary,
             *, frames: int, latent_channels: int, latent_height: int, latent_width: int,
             mode: str, prompt: list[str] | None = None, image: torch.Tensor | None = None,
             lambdas: tuple[float, float] | None = None, steps: int = 50,
             guidance_scale: float = 1.0, seed: int = 0) -> torch.Tensor:
    """Sample one video; returns pixels [F, 3, H, W] in [0, 1]."""
    _validate_mode(mode, prompt, image)
    lambdas = DEFAULT_LAMBDAS[mode] if lambdas is None else lambdas
    cond = _build_condition(model, vocab, prompt, image, lambdas)
    uncond = ConditionBundle.unconditional()

    rng = torch.Generator().manual_seed(seed)
    z = torch.randn((1, frames, latent_channels, latent_height, latent_width), generator=rng)
    sub, taus = strided_schedule(schedule, steps)
    s = float(guidance_scale)
    for i in range(sub.T, 0, -1):
        t_orig = taus[i - 1]
        if s == 1.0:
            eps_hat = model(z, t_orig, cond)
        elif s == 0.0:
            eps_hat = model(z, t_orig, uncond)
        else:
            eps_c = model(z, t_orig, cond)
            eps_u = model(z, t_orig, uncond)
            eps_hat = eps_u + s * (eps_c - eps_u)
        noise = torch.randn(z.shape, generator=rng) if i > 1 else torch.zeros_like(z)
        z = reverse_step(z, eps_hat, i, sub, noise)
    return from_diffusion_space(codec.decode(z))[0]


@dataclass(frozen=True)
class SweepEntry:
    lambdas_a: tuple[float, float]
    lambdas_b: tuple[float, float]
    mean_abs_diff: float


def lambda_sweep(model: UniVidModel, schedule: NoiseSchedule, codec: VideoCodec, vocab: Vocabulary,
                 *, frames: int, latent_channels: int, latent_height: int, latent_width: int,
                 prompt: list[str], image: torch.Tensor, grid: list[tuple[float, float]],
                 steps: int = 50, guidance_scale: float = 1.0,
                 seed: int = 0) -> tuple[list[torch.Tensor], list[SweepEntry]]:
    """One generation per (lambda_t, lambda_v) from the same initial noise,
    plus the mean absolute frame difference between adjacent grid points."""
    if prompt is None or image is None:
        raise ModeError("lambda_sweep needs both a prompt and a reference image")
    if not grid:
        raise ModeError("lambda_sweep needs a non-empty grid")
    videos = []
    for lt, lv in grid:
        videos.append(generate(
            model, schedule, codec, vocab, frames=frames, latent_channels=latent_channels,
            latent_height=latent_height, latent_width=latent_width, mode="ti2v",
            prompt=prompt, image=image, lambdas=(lt, lv), steps=steps,
            guidance_scale=guidance_scale, seed=seed,
        ))
    report = [
        SweepEntry(grid[i], grid[i + 1], float(torch.mean(torch.abs(videos[i + 1] - videos[i]))))
        for i in range(len(videos) - 1)
    ]
    return videos, report
