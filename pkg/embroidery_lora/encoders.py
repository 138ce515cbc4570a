"""
Latent codec and text encoder contracts, with their toy implementations.
"""

import hashlib
from abc import ABC, abstractmethod

import torch
import torch.nn.functional as F

from embroidery_lora.errors import ContractViolationError
from embroidery_lora.images import ImageArray, check_rgb, from_tensor, to_tensor


class LatentCodec(ABC):
    """Maps RGB images to latents and back."""

    factor: int
    latent_channels: int

    def check_dims(self, height: int, width: int) -> None:
        if height % self.factor or width % self.factor:
            raise ContractViolationError(
                f"image dimensions {height}x{width} must be divisible by the "
                f"codec downsampling factor {self.factor}"
            )

    @abstractmethod
    def encode(self, image: ImageArray) -> torch.Tensor:
        """(H, W, 3) image to a (C, H/f, W/f) latent."""

    @abstractmethod
    def decode(self, latent: torch.Tensor) -> ImageArray:
        """(C, h, w) latent to a (h*f, w*f, 3) image."""


class ToyLatentCodec(LatentCodec):
    """
    Exact invertible codec: space-to-depth by ``factor`` followed by a seeded
    signed channel permutation (an orthogonal map with entries in {-1, 0, 1}).
    Linear and bias-free, so a zero image maps to a zero latent.
    """

    def __init__(self, factor: int = 4, seed: int = 0) -> None:
        self.factor = factor
        self.latent_channels = 3 * factor * factor
        gen = torch.Generator().manual_seed(seed)
        self.permutation = torch.randperm(self.latent_channels, generator=gen)
        signs = torch.randint(0, 2, (self.latent_channels,), generator=gen)
        self.signs = (signs * 2 - 1).to(torch.float64)

    def encode(self, image: ImageArray) -> torch.Tensor:
        rgb = check_rgb(image)
        self.check_dims(rgb.shape[0], rgb.shape[1])
        packed = F.pixel_unshuffle(to_tensor(rgb), self.factor)
        return packed[self.permutation] * self.signs[:, None, None]

    def decode(self, latent: torch.Tensor) -> ImageArray:
        if latent.dim() != 3 or latent.shape[0] != self.latent_channels:
            raise ContractViolationError(
                f"latent must have shape ({self.latent_channels}, h, w), "
                f"got {tuple(latent.shape)}"
            )
        packed = torch.empty_like(latent)
        packed[self.permutation] = latent * self.signs[:, None, None]
        return from_tensor(F.pixel_shuffle(packed, self.factor))


class TextEncoder(ABC):
    embed_dim: int

    @abstractmethod
    def encode(self, prompt: str) -> torch.Tensor:
        """Prompt to a fixed-width embedding."""


class ToyTextEncoder(TextEncoder):
    """Seeded hash of the prompt string into a Gaussian embedding."""

    def __init__(self, embed_dim: int = 32, seed: int = 0) -> None:
        self.embed_dim = embed_dim
        self.seed = seed

    def encode(self, prompt: str) -> torch.Tensor:
        digest = hashlib.sha256(f"{self.seed}\x00{prompt}".encode("utf-8")).digest()
        gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
        return torch.randn(self.embed_dim, generator=gen, dtype=torch.float64)
