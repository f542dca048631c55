"""Cosine noise schedule and DDPM forward/reverse step math."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COSINE_S = 0.008
BETA_MIN = 1e-8
BETA_MAX = 0.999


def _cosine_f(u: np.ndarray) -> np.ndarray:
    return np.cos((u + COSINE_S) / (1.0 + COSINE_S) * np.pi / 2.0) ** 2


@dataclass(frozen=True)
class Schedule:
    """Discrete cosine schedule over `steps` points.

    betas are clipped to [BETA_MIN, BETA_MAX] and alpha_bar rebuilt as the
    cumulative product so the chain stays self-consistent near u=1.
    """

    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def cosine(cls, steps: int) -> "Schedule":
        if steps < 1:
            raise ValueError(f"schedule needs steps >= 1, got {steps}")
        u = np.arange(1, steps + 1, dtype=np.float64) / steps
        f = _cosine_f(u)
        f0 = _cosine_f(np.zeros(1))[0]
        bar = f / f0
        prev = np.concatenate([[1.0], bar[:-1]])
        betas = np.clip(1.0 - bar / prev, BETA_MIN, BETA_MAX)
        alphas = 1.0 - betas
        alpha_bar = np.cumprod(alphas)
        return cls(steps=steps, betas=betas, alphas=alphas, alpha_bar=alpha_bar)

    def noise_to(self, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps; t indexes this schedule."""
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.steps):
            raise ValueError(f"timestep out of [0, {self.steps}): {t.min()}..{t.max()}")
        ab = self.alpha_bar[t].astype(x0.dtype)
        while ab.ndim < x0.ndim:
            ab = ab[..., None]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def posterior_step(self, x: np.ndarray, eps_hat: np.ndarray, i: int,
                       z: np.ndarray | None) -> np.ndarray:
        """One ancestral step from level i down to i-1 given predicted noise."""
        beta = self.betas[i]
        ab = self.alpha_bar[i]
        ab_prev = self.alpha_bar[i - 1] if i > 0 else 1.0
        mean = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(self.alphas[i])
        if i == 0 or z is None:
            return mean.astype(x.dtype)
        var = beta * (1.0 - ab_prev) / (1.0 - ab)
        return (mean + np.sqrt(var) * z).astype(x.dtype)

    def model_timesteps(self, train_steps: int) -> np.ndarray:
        """Map each schedule index to the nearest training timestep index."""
        u = np.arange(1, self.steps + 1, dtype=np.float64) / self.steps
        t = np.floor(u * train_steps - 1 + 0.5).astype(np.int64)
        return np.clip(t, 0, train_steps - 1)
