"""Gaussian diffusion core: noise schedule, forward noising, training loss, reverse step.

The forward chain blurs a clean latent z_0 step by step,

    q(z_t | z_{t-1}) = N(z_t; sqrt(alpha_t) z_{t-1}, (1 - alpha_t) I),

which collapses to the closed form z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
with abar_t the cumulative product of alpha. Training minimizes the mean squared
error between predicted and true noise; sampling inverts the chain one ancestral
step at a time.

All randomness flows through explicit torch.Generator instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ScheduleError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise magnitudes for a diffusion chain of length T.

    Arrays are float64, length T, indexed by t-1 for t in [1, T].
    abar_0 is defined as 1 so the t=1 reverse step is well formed.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.T < 1:
            raise ScheduleError(f"schedule length must be >= 1, got {self.T}")
        for name, arr in (("beta", self.beta), ("alpha", self.alpha), ("alpha_bar", self.alpha_bar)):
            if arr.shape != (self.T,):
                raise ScheduleError(f"{name} must have shape ({self.T},), got {arr.shape}")
        if np.any(self.beta < 0) or np.any(self.beta >= 1):
            raise ScheduleError("beta entries must lie in [0, 1)")
        if not np.allclose(self.alpha, 1.0 - self.beta):
            raise ScheduleError("alpha must equal 1 - beta")
        # abar_t = abar_{t-1} * alpha_t, strictly decreasing wherever beta > 0
        prev = 1.0
        for t in range(self.T):
            if not np.isclose(self.alpha_bar[t], prev * self.alpha[t], rtol=1e-12, atol=0):
                raise ScheduleError(f"alpha_bar[{t}] breaks the cumulative-product invariant")
            if self.beta[t] > 0 and not self.alpha_bar[t] < prev:
                raise ScheduleError(f"alpha_bar must strictly decrease at t={t + 1}")
            prev = self.alpha_bar[t]

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product abar_t; abar_0 := 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear beta schedule from beta_min to beta_max over T steps."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 <= beta_min <= beta_max < 1.0):
        raise ScheduleError(
            f"need 0 <= beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _gather_alpha_bar(s: NoiseSchedule, t: torch.Tensor | int, ndim: int) -> torch.Tensor:
    """abar_t as a broadcastable tensor; t is 1-based, scalar or per-sample [B]."""
    if isinstance(t, int):
        return torch.tensor(s.alpha_bar_at(t), dtype=torch.float32)
    if t.dim() == 0:
        return torch.tensor(s.alpha_bar_at(int(t)), dtype=torch.float32)
    vals = torch.tensor([s.alpha_bar_at(int(ti)) for ti in t], dtype=torch.float32)
    return vals.view(-1, *([1] * (ndim - 1)))


def q_sample(z0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising: z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    abar = _gather_alpha_bar(s, t, z0.dim()).to(z0.dtype)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def denoising_loss(
    predict: Callable[[torch.Tensor, object, torch.Tensor], torch.Tensor],
    z0: torch.Tensor,
    cond,
    s: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """Noise-prediction MSE at a random timestep.

    Draw order (relied on by reproducibility tests): first per-sample timesteps
    t ~ U{1..T}, then eps ~ N(0, I) of z0's shape. Returns the mean over all
    elements of ||predict(z_t, cond, t) - eps||^2.
    """
    B = z0.shape[0]
    t = torch.randint(1, s.T + 1, (B,), generator=rng)
    eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z_t = q_sample(z0, t, eps, s)
    pred = predict(z_t, cond, t)
    if pred.shape != z_t.shape:
        raise ShapeError(f"predictor returned {tuple(pred.shape)}, expected {tuple(z_t.shape)}")
    return torch.mean((pred - eps) ** 2)


def reverse_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    s: NoiseSchedule,
    noise: torch.Tensor,
) -> torch.Tensor:
    """One ancestral step z_t -> z_{t-1}.

        z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * noise
        sigma_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t),  sigma_1 = 0.

    noise must be standard normal; it is ignored at t=1 (and when beta_t = 0,
    where the step is an exact no-op).
    """
    if not 1 <= t <= s.T:
        raise ScheduleError(f"timestep {t} outside [1, {s.T}]")
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"z_t shape {tuple(z_t.shape)} != eps_hat shape {tuple(eps_hat.shape)}")
    beta_t = s.beta_at(t)
    if beta_t == 0.0:
        return z_t
    alpha_t = s.alpha_at(t)
    abar_t = s.alpha_bar_at(t)
    abar_prev = s.alpha_bar_at(t - 1)
    mean = (z_t - (beta_t / np.sqrt(1.0 - abar_t)) * eps_hat) / np.sqrt(alpha_t)
    if t == 1:
        return mean
    sigma = np.sqrt(beta_t * (1.0 - abar_prev) / (1.0 - abar_t))
    if noise.shape != z_t.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != z_t shape {tuple(z_t.shape)}")
    return mean + sigma * noise


def strided_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced subset of [1, T] that always contains 1 (and T when steps > 1)."""
    if steps < 1:
        raise ScheduleError(f"steps must be >= 1, got {steps}")
    if steps >= T:
        return list(range(1, T + 1))
    taus = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in taus]


def strided_schedule(s: NoiseSchedule, steps: int) -> tuple[NoiseSchedule, list[int]]:
    """Coarsen a schedule onto a strided timestep subset.

    Returns (sub, taus) where sub.alpha_bar[i] = abar(taus[i]) so that reverse_step
    on the coarse chain is the correct ancestral step between retained timesteps.
    The denoiser must still be evaluated at the original timesteps taus[i].
    """
    taus = strided_timesteps(s.T, steps)
    abar = np.array([s.alpha_bar_at(t) for t in taus], dtype=np.float64)
    prev = np.concatenate([[1.0], abar[:-1]])
    alpha = abar / prev
    beta = 1.0 - alpha
    return NoiseSchedule(T=len(taus), beta=beta, alpha=alpha, alpha_bar=abar), taus
