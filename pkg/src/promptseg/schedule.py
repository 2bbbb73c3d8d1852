"""Forward diffusion process: noise schedule, noising, and the denoising loss.

The forward process corrupts a clean input z_0 as

    z_p = sqrt(alpha_bar_p) * z_0 + sqrt(1 - alpha_bar_p) * eps,   eps ~ N(0, I)

where alpha_bar_p is the running product of the per-step coefficients
alpha_p = 1 - beta_p over a linear beta schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DOWNSAMPLE_FACTOR = 8  # stem stride 2 plus two stride-2 stages in the denoiser


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficients of the forward noising process over P timesteps."""

    alphas: torch.Tensor      # [P], each in (0, 1)
    alpha_bars: torch.Tensor  # [P], running products, strictly decreasing
    P: int

    def __post_init__(self):
        if self.P < 1 or self.alphas.shape != (self.P,) or self.alpha_bars.shape != (self.P,):
            raise ValueError("schedule arrays must have length P >= 1")
        if not bool(((self.alphas > 0) & (self.alphas < 1)).all()):
            raise ValueError("every alpha must lie in (0, 1)")
        if not bool(((self.alpha_bars > 0) & (self.alpha_bars <= 1)).all()):
            raise ValueError("every alpha_bar must lie in (0, 1]")
        if self.P > 1 and not bool((self.alpha_bars[1:] < self.alpha_bars[:-1]).all()):
            raise ValueError("alpha_bars must be strictly decreasing")
        running = torch.cumprod(self.alphas.double(), dim=0)
        if not bool((running - self.alpha_bars.double()).abs().max() < 1e-12):
            raise ValueError("alpha_bars must equal the running product of alphas")


@dataclass
class LatentImage:
    """A [channels, H, W] array tagged with its noising timestep (None = clean)."""

    data: torch.Tensor
    timestep: int | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected [C, H, W], got shape {tuple(self.data.shape)}")
        if not bool(torch.isfinite(self.data).all()):
            raise ValueError("latent image contains non-finite entries")
        _, h, w = self.data.shape
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"spatial dims ({h}x{w}) must be divisible by {DOWNSAMPLE_FACTOR}"
            )


def build_schedule(P: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; alpha_p = 1 - beta_p, alpha_bar_p = prod_{q<=p} alpha_q."""
    if not isinstance(P, int) or P < 1:
        raise ValueError(f"P must be a positive integer, got {P!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, P, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(alphas=alphas, alpha_bars=alpha_bars, P=P)


def forward_noise(
    z0: LatentImage, p: int, eps: torch.Tensor, schedule: NoiseSchedule
) -> LatentImage:
    """Noise a clean image to timestep p with the given noise draw.

    Deterministic: z_p = sqrt(alpha_bar_p) * z0 + sqrt(1 - alpha_bar_p) * eps.
    """
    if not (0 <= p < schedule.P):
        raise ValueError(f"timestep p={p} outside [0, {schedule.P})")
    if eps.shape != z0.data.shape:
        raise ValueError(
            f"noise shape {tuple(eps.shape)} does not match image shape {tuple(z0.data.shape)}"
        )
    a_bar = schedule.alpha_bars[p].to(z0.data.dtype)
    zp = torch.sqrt(a_bar) * z0.data + torch.sqrt(1.0 - a_bar) * eps
    return LatentImage(data=zp, timestep=p)


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the true and predicted noise."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()
