"""
Captioning Module.

Short content descriptions (``<des>``) for reference images. The ``mock``
captioner is seeded and offline; the ``azure`` captioner sends the image to
a vision chat model through the Azure AI Inference SDK.
"""

import base64
import io
import logging
import os
from abc import ABC, abstractmethod
from typing import Callable, Dict, Optional

import numpy as np
from azure.ai.inference import ChatCompletionsClient
from azure.ai.inference.models import (
    ImageContentItem,
    ImageUrl,
    SystemMessage,
    TextContentItem,
    UserMessage,
)
from azure.core.credentials import AzureKeyCredential
from azure.core.exceptions import AzureError
from PIL import Image

from embroidery_lora.config import derive_seed
from embroidery_lora.errors import BackendError, BackendUnavailableError
from embroidery_lora.images import ImageArray, check_rgb, to_uint8

logger = logging.getLogger(__name__)

ENDPOINT = "https://models.inference.ai.azure.com"
CAPTION_INSTRUCTIONS = (
    "Describe the main subject of the image in two to four lowercase words, "
    "without mentioning materials, textures or art style. Reply with the "
    "words only."
)

MOCK_SUBJECTS = (
    "butterfly patch",
    "flower badge",
    "cat emblem",
    "bird motif",
    "star badge",
    "heart patch",
    "leaf motif",
    "anchor emblem",
)


class Captioner(ABC):
    @abstractmethod
    def caption(self, image: ImageArray) -> str:
        """Short subject phrase for ``image``."""


class MockCaptioner(Captioner):
    """Picks a fixed phrase from a seeded hash of the pixels."""

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed

    def caption(self, image: ImageArray) -> str:
        pixels = to_uint8(check_rgb(image))
        rng = np.random.default_rng(
            [derive_seed(self.seed, "caption"), int(pixels.sum()), *pixels.shape]
        )
        return MOCK_SUBJECTS[int(rng.integers(len(MOCK_SUBJECTS)))]


def encode_png_data_url(image: ImageArray) -> str:
    buffer = io.BytesIO()
    Image.fromarray(to_uint8(check_rgb(image))).save(buffer, format="PNG")
    data = base64.b64encode(buffer.getvalue()).decode("ascii")
    return f"data:image/png;base64,{data}"


class AzureCaptioner(Captioner):
    """
    Vision-model captioner over Azure AI Inference chat completions.

    The client is created once; each call sends one system instruction and
    one user message carrying the PNG as a data URL.
    """

    def __init__(self, token: str, model_name: str = "gpt-4o-mini") -> None:
        """
        Args:
            token (str): GitHub token or Azure key for authentication
            model_name (str): Deployed vision model
        """
        self.client = ChatCompletionsClient(
            endpoint=ENDPOINT,
            credential=AzureKeyCredential(token),
        )
        self.model_name = model_name

    def caption(self, image: ImageArray) -> str:
        messages = [
            SystemMessage(CAPTION_INSTRUCTIONS),
            UserMessage(
                content=[
                    TextContentItem(text="What is shown?"),
                    ImageContentItem(image_url=ImageUrl(url=encode_png_data_url(image))),
                ]
            ),
        ]
        try:
            response = self.client.complete(
                messages=messages, model=self.model_name, max_tokens=20
            )
        except AzureError as e:
            raise BackendError("azure captioner", str(e)) from e
        if (
            response
            and hasattr(response, "choices")
            and response.choices
            and response.choices[0].message
            and response.choices[0].message.content
        ):
            return str(response.choices[0].message.content).strip().strip(".")
        raise BackendError("azure captioner", "empty completion")


def get_token_from_env() -> Optional[str]:
    """
    Get the captioner token from environment variables.

    Checks for GITHUB_TOKEN or AZURE_KEY environment variables.

    Returns:
        Optional[str]: The token if found, None otherwise
    """
    return os.environ.get("GITHUB_TOKEN") or os.environ.get("AZURE_KEY")


def _azure(seed: int, model_name: str) -> Captioner:
    token = get_token_from_env()
    if not token:
        raise BackendUnavailableError(
            "No authentication token found. Set GITHUB_TOKEN or AZURE_KEY "
            "(a .env file works too)."
        )
    return AzureCaptioner(token, model_name)


_CAPTIONERS: Dict[str, Callable[[int, str], Captioner]] = {
    "mock": lambda seed, model_name: MockCaptioner(seed),
    "azure": _azure,
}


def build_captioner(name: str, seed: int = 0, model_name: str = "gpt-4o-mini") -> Captioner:
    if name not in _CAPTIONERS:
        raise BackendUnavailableError(
            f"Unknown captioner '{name}' (registered: {', '.join(sorted(_CAPTIONERS))})"
        )
    logger.debug("Using %s captioner", name)
    return _CAPTIONERS[name](seed, model_name)
