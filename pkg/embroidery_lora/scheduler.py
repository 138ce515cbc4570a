"""
Noise schedule and samplers.

Timesteps are indices ``0..T-1``; index 0 carries the least noise. The
cumulative signal rate ``alphas_cumprod`` is strictly decreasing and the
clean latent sits at the virtual index -1 with rate 1.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from embroidery_lora.config import derive_seed
from embroidery_lora.errors import ContractViolationError

# (latent, timestep, step index within the loop) -> noise prediction
EpsFn = Callable[[torch.Tensor, int, int], torch.Tensor]


@dataclass(frozen=True)
class DiffusionScheduler:
    """Cumulative noise schedule plus the seed of every noise draw."""

    T: int
    alphas_cumprod: torch.Tensor
    seed: int = 0

    def __post_init__(self) -> None:
        if self.T < 1 or self.alphas_cumprod.shape != (self.T,):
            raise ContractViolationError(
                f"alphas_cumprod must have length T={self.T}, "
                f"got shape {tuple(self.alphas_cumprod.shape)}"
            )
        diffs = self.alphas_cumprod[1:] - self.alphas_cumprod[:-1]
        if bool((diffs >= 0).any()) or bool((self.alphas_cumprod <= 0).any()):
            raise ContractViolationError(
                "alphas_cumprod must be positive and strictly decreasing"
            )

    @classmethod
    def cosine(
        cls, T: int = 50, seed: int = 0, offset: float = 0.008, floor: float = 1e-4
    ) -> "DiffusionScheduler":
        """Cosine schedule, clipped below at ``floor``."""

        def f(x: float) -> float:
            return math.cos((x + offset) / (1 + offset) * math.pi / 2) ** 2

        values = [max(f((k + 1) / T) / f(0.0), floor) for k in range(T)]
        return cls(T, torch.tensor(values, dtype=torch.float64), seed)

    def alpha_bar(self, t: int) -> float:
        if t < 0:
            return 1.0
        self.check_timestep(t)
        return float(self.alphas_cumprod[t])

    def check_timestep(self, t: int) -> None:
        if not 0 <= t < self.T:
            raise ContractViolationError(f"timestep {t} outside [0, {self.T})")

    def generator(self, label: str) -> torch.Generator:
        """A fresh generator; the same label always yields the same draws."""
        return torch.Generator().manual_seed(derive_seed(self.seed, label))

    @staticmethod
    def draw_noise(shape: Sequence[int], generator: torch.Generator) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=generator, dtype=torch.float64)

    def add_noise(self, z0: torch.Tensor, noise: torch.Tensor, t: int) -> torch.Tensor:
        ab = self.alpha_bar(t)
        return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise

    def step(
        self,
        z_t: torch.Tensor,
        eps: torch.Tensor,
        t: int,
        eta: float = 0.0,
        noise: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """DDIM update from index ``t`` to ``t - 1``."""
        ab, ab_prev = self.alpha_bar(t), self.alpha_bar(t - 1)
        x0 = (z_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        sigma = 0.0
        if eta > 0 and t > 0:
            sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
        direction = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        z_prev = math.sqrt(ab_prev) * x0 + direction
        if sigma > 0:
            if noise is None:
                raise ContractViolationError("eta > 0 needs a noise draw")
            z_prev = z_prev + sigma * noise
        return z_prev

    def invert_step(self, z_prev: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
        """Inverse of the deterministic ``step``: from ``t - 1`` up to ``t``."""
        ab, ab_prev = self.alpha_bar(t), self.alpha_bar(t - 1)
        x0 = (z_prev - math.sqrt(1.0 - ab_prev) * eps) / math.sqrt(ab_prev)
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddim_sample(
    scheduler: DiffusionScheduler,
    eps_fn: EpsFn,
    z: torch.Tensor,
    start_t: int,
    eta: float = 0.0,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Denoise ``z`` from index ``start_t`` down to the clean latent.

    With ``eta > 0`` the ancestral noise comes from ``generator``, so a seeded
    generator keeps the sampler deterministic.
    """
    scheduler.check_timestep(start_t)
    if eta > 0 and generator is None:
        generator = scheduler.generator("ddim")
    for i, t in enumerate(range(start_t, -1, -1)):
        eps = eps_fn(z, t, i)
        noise = None
        if eta > 0 and t > 0:
            noise = scheduler.draw_noise(z.shape, generator)
        z = scheduler.step(z, eps, t, eta=eta, noise=noise)
    return z
