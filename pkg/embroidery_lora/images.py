"""
Image helpers.

Images travel through the package as float64 ``(H, W, 3)`` numpy arrays in
[0, 1] whose values are 8-bit representable (``k / 255``); PNG files are the
on-disk format.
"""

from pathlib import Path
from typing import List, Union

import numpy as np
import torch
from PIL import Image

from embroidery_lora.errors import ContractViolationError

ImageArray = np.ndarray
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def check_rgb(image: ImageArray, name: str = "image") -> ImageArray:
    """Validate an RGB float image and return it as float64."""
    array = np.asarray(image, dtype=np.float64)
    if array.ndim != 3 or array.shape[2] != 3:
        raise ContractViolationError(
            f"{name} must have shape (H, W, 3), got {tuple(array.shape)}"
        )
    if not np.all(np.isfinite(array)):
        raise ContractViolationError(f"{name} contains non-finite values")
    return array


def quantize(image: ImageArray) -> ImageArray:
    """Clip to [0, 1] and snap to the nearest 8-bit level."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def to_uint8(image: ImageArray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(array: np.ndarray) -> ImageArray:
    return array.astype(np.float64) / 255.0


def load_rgb(path: Union[str, Path]) -> ImageArray:
    with Image.open(path) as img:
        return from_uint8(np.asarray(img.convert("RGB")))


def save_rgb(image: ImageArray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(check_rgb(image))).save(path, format="PNG")
    return path


def list_images(directory: Union[str, Path]) -> List[Path]:
    """Image files in a directory, sorted by name."""
    directory = Path(directory)
    return sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )


def to_tensor(image: ImageArray) -> torch.Tensor:
    """(H, W, C) numpy image to a (C, H, W) float64 tensor."""
    array = np.asarray(image, dtype=np.float64)
    if array.ndim == 2:
        array = array[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1)))


def from_tensor(tensor: torch.Tensor) -> ImageArray:
    """(C, H, W) tensor to a (H, W, C) float64 numpy image."""
    return tensor.detach().to(torch.float64).permute(1, 2, 0).cpu().numpy().copy()


def luma(image: ImageArray) -> np.ndarray:
    """Rec. 601 luma of an RGB image."""
    rgb = check_rgb(image)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114
