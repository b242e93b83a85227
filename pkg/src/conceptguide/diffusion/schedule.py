"""Linear noise schedule and the closed-form forward process."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta_t, alpha_t = 1 - beta_t and their running product.

    Arrays are indexed 0..T-1 for steps t = 1..T.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])


def linear_schedule(T: int, beta1: float, betaT: float) -> NoiseSchedule:
    """beta_t = beta1 + (t-1)/(T-1) * (betaT - beta1) for t = 1..T."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if not (0.0 < beta1 < betaT < 1.0):
        raise ValueError(f"need 0 < beta1 < betaT < 1, got {beta1}, {betaT}")
    t = np.arange(T, dtype=np.float64)
    betas = beta1 + t / (T - 1) * (betaT - beta1)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(x0, t: int, noise, schedule: NoiseSchedule):
    """Forward diffusion: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not (1 <= t <= schedule.T):
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise
