"""
Inference Module.

Text- and image-conditioned generation with only the style blocks of a
trained adapter, control-branch routing by boundary policy and LAB color
correction.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, Mapping, Optional

import numpy as np
import torch
from skimage.color import lab2rgb, rgb2lab

from embroidery_lora import EMB_TOKEN, style_suffix
from embroidery_lora.backbone import Backbone, DenoiserInput, denoise
from embroidery_lora.config import InferenceConfig, PairgenConfig
from embroidery_lora.errors import AdapterError, ContractViolationError
from embroidery_lora.images import ImageArray, check_rgb, quantize, to_tensor
from embroidery_lora.lora import BlockPartition, LoraAdapter
from embroidery_lora.pairgen import build_control_signals
from embroidery_lora.scheduler import ddim_sample

logger = logging.getLogger(__name__)

TILE = "tile"
CANNY = "canny"
COLOR_CORRECTION = "color_correction"
DEFAULT_SIZE = 64


class GenerationMode(str, Enum):
    TEXT = "text"
    IMAGE = "image"


@dataclass(frozen=True)
class InferenceRequest:
    """One generation; ``effective_prompt`` always carries the style suffix."""

    mode: GenerationMode
    prompt: str
    input_image: Optional[ImageArray] = None
    strict_boundary: bool = True
    strength: float = 0.7
    seed: int = 0
    emb_token: str = EMB_TOKEN
    size: int = DEFAULT_SIZE

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", GenerationMode(self.mode))
        if self.mode is GenerationMode.IMAGE and self.input_image is None:
            raise ContractViolationError("image mode needs an input image")
        if not 0 < self.strength <= 1:
            raise ContractViolationError(
                f"strength must lie in (0, 1], got {self.strength}"
            )

    @property
    def effective_prompt(self) -> str:
        suffix = style_suffix(self.emb_token)
        return self.prompt if self.prompt.endswith(suffix) else self.prompt + suffix


@dataclass(frozen=True)
class StyledView:
    """Base backbone plus the adapter entries allowed to act at inference."""

    backbone: Backbone
    adapter: LoraAdapter
    partition: BlockPartition

    @property
    def active_blocks(self) -> FrozenSet[str]:
        return frozenset(self.adapter.blocks.values())

    def eps(
        self,
        z_t: torch.Tensor,
        t: int,
        embedding: torch.Tensor,
        controls: Optional[Mapping[str, torch.Tensor]] = None,
        control_scale: float = 1.0,
        use_adapter: bool = True,
    ) -> torch.Tensor:
        inputs = DenoiserInput.uniform(z_t, t, embedding, self.backbone.block_names)
        return denoise(
            self.backbone.denoiser,
            inputs,
            self.adapter if use_adapter else None,
            controls=controls,
            control_scale=control_scale,
        )


def apply_style_blocks(
    backbone: Backbone,
    adapter: LoraAdapter,
    partition: BlockPartition,
    use_all_blocks: bool = False,
) -> StyledView:
    """
    View in which only style-block entries carry deltas.

    Non-style entries are dropped, never merged. With ``use_all_blocks`` the
    full adapter is kept.

    Raises:
        AdapterError: If the partition does not describe this backbone or the
            adapter has blocks outside it
    """
    if tuple(partition.all_blocks) != tuple(backbone.block_names):
        raise AdapterError(
            "Partition blocks do not match the backbone",
            set(partition.all_blocks) ^ set(backbone.block_names),
        )
    stray = set(adapter.blocks.values()) - set(partition.all_blocks)
    if stray:
        raise AdapterError("Adapter has blocks outside the partition", stray)
    kept = adapter if use_all_blocks else adapter.subset(partition.style_blocks)
    return StyledView(backbone, kept, partition)


def control_policy(
    strict_boundary: bool, mode: GenerationMode = GenerationMode.IMAGE
) -> FrozenSet[str]:
    """Control components for a request: none in text mode."""
    if GenerationMode(mode) is GenerationMode.TEXT:
        return frozenset()
    if strict_boundary:
        return frozenset({TILE, CANNY, COLOR_CORRECTION})
    return frozenset({TILE})


def _to_latent_grid(array: np.ndarray, factor: int) -> torch.Tensor:
    """Average-pool an (H, W[, C]) map down by ``factor`` into (C, h, w)."""
    tensor = to_tensor(array)
    return torch.nn.functional.avg_pool2d(tensor[None], factor)[0]


def prepare_controls(
    image: ImageArray,
    branches: FrozenSet[str],
    factor: int,
    settings: Optional[PairgenConfig] = None,
) -> Dict[str, torch.Tensor]:
    """Control images at latent resolution for the enabled branches."""
    wanted = branches & {TILE, CANNY}
    if not wanted:
        return {}
    settings = settings or PairgenConfig(edge_detector="sobel")
    signals = build_control_signals(image, settings.edge_detector, settings.blur_sigma)
    controls: Dict[str, torch.Tensor] = {}
    if TILE in wanted:
        controls[TILE] = _to_latent_grid(signals.blur_map, factor)
    if CANNY in wanted:
        controls[CANNY] = _to_latent_grid(signals.edge_map, factor)
    return controls


def color_correct(generated: ImageArray, design: ImageArray) -> ImageArray:
    """
    Lightness from ``generated``, chroma (LAB a and b) from ``design``.

    Conversion uses the D65 white point; the result is clipped to the RGB
    gamut and snapped to 8 bits.
    """
    gen = check_rgb(generated, "generated")
    des = check_rgb(design, "design")
    if gen.shape != des.shape:
        raise ContractViolationError(
            f"color correction needs equal sizes, got {gen.shape} and {des.shape}"
        )
    gen_lab = rgb2lab(gen, illuminant="D65")
    des_lab = rgb2lab(des, illuminant="D65")
    mixed = np.concatenate([gen_lab[..., :1], des_lab[..., 1:]], axis=-1)
    return quantize(lab2rgb(mixed, illuminant="D65"))


@dataclass
class GenerationResult:
    image: ImageArray
    metadata: Dict[str, Any] = field(default_factory=dict)


def _sample(
    view: StyledView,
    request: InferenceRequest,
    z: torch.Tensor,
    start_t: int,
    controls: Mapping[str, torch.Tensor],
    settings: InferenceConfig,
    eta: float,
) -> torch.Tensor:
    backbone = view.backbone
    cond = backbone.embed(request.effective_prompt)
    guided = settings.guidance_scale != 1.0
    uncond = backbone.embed(settings.negative_prompt) if guided else None
    total = start_t + 1
    adapter_steps = math.ceil(settings.adapter_step_fraction * total)

    def eps_fn(z_t: torch.Tensor, t: int, i: int) -> torch.Tensor:
        kwargs = dict(
            controls=controls,
            control_scale=settings.control_scale,
            use_adapter=i < adapter_steps,
        )
        eps = view.eps(z_t, t, cond, **kwargs)
        if uncond is not None:
            eps_u = view.eps(z_t, t, uncond, **kwargs)
            eps = eps_u + settings.guidance_scale * (eps - eps_u)
        return eps

    generator = backbone.scheduler.generator(f"sample:{request.seed}")
    with torch.no_grad():
        return ddim_sample(backbone.scheduler, eps_fn, z, start_t, eta, generator)


def sdedit_generate(
    view: StyledView,
    request: InferenceRequest,
    controls: Optional[Mapping[str, torch.Tensor]] = None,
    settings: Optional[InferenceConfig] = None,
    eta: float = 0.0,
    pairgen: Optional[PairgenConfig] = None,
) -> GenerationResult:
    """
    Noise the input to ``floor(strength * T)`` steps, then denoise with the
    styled view under the effective prompt.

    ``controls`` overrides the control images built from the input; only the
    branches allowed by ``control_policy`` are attached either way. Strength 1
    starts from pure noise.
    """
    if request.mode is not GenerationMode.IMAGE or request.input_image is None:
        raise ContractViolationError("sdedit_generate needs an image-mode request")
    settings = settings or InferenceConfig()
    backbone = view.backbone
    scheduler = backbone.scheduler
    image = check_rgb(request.input_image, "input_image")
    policy = control_policy(request.strict_boundary, request.mode)
    if controls is None:
        controls = prepare_controls(image, policy, backbone.codec.factor, pairgen)
    controls = {k: v for k, v in controls.items() if k in policy}

    steps = math.floor(request.strength * scheduler.T)
    metadata: Dict[str, Any] = {
        "mode": request.mode.value,
        "effective_prompt": request.effective_prompt,
        "strength": request.strength,
        "noising_steps": steps,
        "strict_boundary": request.strict_boundary,
        "controls": sorted(controls),
        "color_correction": COLOR_CORRECTION in policy,
        "seed": request.seed,
        "guidance_scale": settings.guidance_scale,
        "negative_prompt": settings.negative_prompt,
        "adapter_step_fraction": settings.adapter_step_fraction,
        "control_scale": settings.control_scale,
        "eta": eta,
        "adapter_blocks": sorted(view.active_blocks),
    }
    if steps == 0:
        return GenerationResult(image.copy(), metadata)

    z0 = backbone.codec.encode(image)
    start_t = steps - 1
    noise = scheduler.draw_noise(z0.shape, scheduler.generator(f"sdedit:{request.seed}"))
    z = noise if steps == scheduler.T else scheduler.add_noise(z0, noise, start_t)
    latent = _sample(view, request, z, start_t, controls, settings, eta)
    generated = quantize(backbone.codec.decode(latent))
    if COLOR_CORRECTION in policy:
        generated = color_correct(generated, image)
    return GenerationResult(generated, metadata)


def generate_text(
    view: StyledView,
    request: InferenceRequest,
    settings: Optional[InferenceConfig] = None,
    eta: float = 0.0,
) -> GenerationResult:
    """Full denoising from seeded noise; no control branches."""
    settings = settings or InferenceConfig()
    backbone = view.backbone
    codec, scheduler = backbone.codec, backbone.scheduler
    codec.check_dims(request.size, request.size)
    side = request.size // codec.factor
    shape = (codec.latent_channels, side, side)
    z = scheduler.draw_noise(shape, scheduler.generator(f"text:{request.seed}"))
    latent = _sample(view, request, z, scheduler.T - 1, {}, settings, eta)
    metadata = {
        "mode": request.mode.value,
        "effective_prompt": request.effective_prompt,
        "seed": request.seed,
        "size": request.size,
        "controls": [],
        "color_correction": False,
        "guidance_scale": settings.guidance_scale,
        "negative_prompt": settings.negative_prompt,
        "adapter_step_fraction": settings.adapter_step_fraction,
        "eta": eta,
        "adapter_blocks": sorted(view.active_blocks),
    }
    return GenerationResult(quantize(codec.decode(latent)), metadata)


def generate(
    view: StyledView,
    request: InferenceRequest,
    settings: Optional[InferenceConfig] = None,
    eta: float = 0.0,
    pairgen: Optional[PairgenConfig] = None,
) -> GenerationResult:
    if request.mode is GenerationMode.TEXT:
        return generate_text(view, request, settings, eta)
    return sdedit_generate(view, request, None, settings, eta, pairgen)
