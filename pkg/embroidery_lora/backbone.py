"""
Backbone Module.

The denoiser abstraction every other module programs against: named
attention-bearing blocks, per-block conditioning, low-rank deltas applied at
projection time and feature observers. Ships the deterministic toy UNet and
a registry of backbone factories.
"""

import copy
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from enum import Enum
from typing import (
    TYPE_CHECKING,
    Callable,
    Dict,
    Iterable,
    Mapping,
    NamedTuple,
    Optional,
    Tuple,
)

import torch
import torch.nn as nn
import torch.nn.functional as F

from embroidery_lora.config import BackboneConfig, derive_seed
from embroidery_lora.encoders import (
    LatentCodec,
    TextEncoder,
    ToyLatentCodec,
    ToyTextEncoder,
)
from embroidery_lora.errors import (
    AdapterError,
    BackendUnavailableError,
    ContractViolationError,
)
from embroidery_lora.scheduler import DiffusionScheduler

if TYPE_CHECKING:
    from embroidery_lora.lora import LoraAdapter

logger = logging.getLogger(__name__)

BLOCK_NAMES = (
    "down.1.0",
    "down.1.1",
    "down.2.0",
    "down.2.1",
    "mid",
    "up.0.0",
    "up.0.1",
    "up.0.2",
    "up.1.0",
    "up.1.1",
    "up.1.2",
)
PROJECTIONS = ("to_q", "to_k", "to_v", "to_out")
CONTROL_BRANCHES = ("tile", "canny")
CONTROL_CHANNELS = {"tile": 3, "canny": 1}
BRANCH_GAIN = 0.2
TIME_DIM = 32


class Stage(str, Enum):
    DOWN = "down"
    MID = "mid"
    UP = "up"


@dataclass(frozen=True)
class BlockSpec:
    """A named block; ``index`` is its position in the canonical order."""

    name: str
    index: int
    attention_layers: Tuple[str, ...]
    stage: Stage


class LoraDelta(NamedTuple):
    """Low-rank delta ``scale * B @ A`` for one projection."""

    A: torch.Tensor
    B: torch.Tensor
    scale: float


LoraMap = Mapping[str, LoraDelta]
# (attention layer id, softmax matrix, output features)
AttentionObserver = Callable[[str, torch.Tensor, torch.Tensor], None]


class AttentionLayer(nn.Module):
    """
    Single-head self-attention with bias-free projections.

    ``W_q`` and ``W_k`` map ``dim`` input features to ``d_k``; ``W_v`` and
    ``W_o`` keep the width at ``dim``. Weights follow the torch ``(out, in)``
    layout.
    """

    def __init__(self, layer_id: str, dim: int, d_k: Optional[int] = None) -> None:
        super().__init__()
        self.layer_id = layer_id
        self.d_k = d_k or dim
        self.to_q = nn.Linear(dim, self.d_k, bias=False)
        self.to_k = nn.Linear(dim, self.d_k, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)

    @property
    def W_q(self) -> torch.Tensor:
        return self.to_q.weight

    @property
    def W_k(self) -> torch.Tensor:
        return self.to_k.weight

    @property
    def W_v(self) -> torch.Tensor:
        return self.to_v.weight

    @property
    def W_o(self) -> torch.Tensor:
        return self.to_out.weight

    @property
    def in_features(self) -> int:
        return self.to_q.in_features

    def target_shapes(self) -> Dict[str, Tuple[int, int]]:
        """Adapter key -> (d_out, d_in) for each projection."""
        return {
            f"{self.layer_id}.{name}": tuple(getattr(self, name).weight.shape)
            for name in PROJECTIONS
        }

    def forward(
        self,
        features: torch.Tensor,
        lora: Optional[LoraMap] = None,
        observer: Optional[AttentionObserver] = None,
    ) -> torch.Tensor:
        return attention_forward(self, features, lora=lora, observer=observer)


def _project(
    layer: AttentionLayer, name: str, features: torch.Tensor, lora: Optional[LoraMap]
) -> torch.Tensor:
    out = features @ getattr(layer, name).weight.T
    delta = lora.get(f"{layer.layer_id}.{name}") if lora else None
    if delta is not None:
        out = out + delta.scale * ((features @ delta.A.T) @ delta.B.T)
    return out


def attention_forward(
    layer: AttentionLayer,
    features: torch.Tensor,
    lora: Optional[LoraMap] = None,
    observer: Optional[AttentionObserver] = None,
) -> torch.Tensor:
    """
    Self-attention output ``f_o(softmax(Q K^T / sqrt(d_k)) V)``.

    Args:
        layer: Attention layer holding the four projections
        features: (tokens, dim) token-feature matrix
        lora: Optional low-rank deltas keyed ``<layer_id>.<projection>``
        observer: Called with the softmax matrix and the output features

    Raises:
        ContractViolationError: If the feature matrix does not fit the layer
    """
    if features.dim() != 2 or features.shape[0] < 1:
        raise ContractViolationError(
            f"attention layer {layer.layer_id}: expected a (tokens, dim) matrix "
            f"with at least one token, got shape {tuple(features.shape)}"
        )
    if features.shape[1] != layer.in_features:
        raise ContractViolationError(
            f"attention layer {layer.layer_id}: feature dimension "
            f"{features.shape[1]} does not match W_q input {layer.in_features}"
        )
    q = _project(layer, "to_q", features, lora)
    k = _project(layer, "to_k", features, lora)
    v = _project(layer, "to_v", features, lora)
    probs = torch.softmax(q @ k.T / math.sqrt(layer.d_k), dim=-1)
    out = _project(layer, "to_out", probs @ v, lora)
    if observer is not None:
        observer(layer.layer_id, probs, out)
    return out


@dataclass(frozen=True)
class DenoiserInput:
    """Noised latent, timestep index and the per-block text conditioning."""

    z_t: torch.Tensor
    t: int
    cond: Mapping[str, torch.Tensor]

    @classmethod
    def uniform(
        cls, z_t: torch.Tensor, t: int, embedding: torch.Tensor, blocks: Iterable[str]
    ) -> "DenoiserInput":
        """Share one embedding across every block."""
        return cls(z_t, t, {name: embedding for name in blocks})


class BlockedDenoiser(ABC):
    """A noise predictor exposing named attention-bearing blocks."""

    control_branches: Tuple[str, ...] = ()

    @property
    @abstractmethod
    def blocks(self) -> Tuple[BlockSpec, ...]:
        """Blocks in canonical order."""

    @abstractmethod
    def lora_targets(self) -> Dict[str, Tuple[int, int]]:
        """Adapter key -> (d_out, d_in) of every adaptable projection."""

    @abstractmethod
    def predict(
        self,
        z_t: torch.Tensor,
        t: int,
        cond: Mapping[str, torch.Tensor],
        lora: Optional[LoraMap] = None,
        controls: Optional[Mapping[str, torch.Tensor]] = None,
        control_scale: float = 1.0,
        observer: Optional[AttentionObserver] = None,
    ) -> torch.Tensor:
        """Noise prediction shaped like ``z_t``."""

    @property
    def block_names(self) -> Tuple[str, ...]:
        return tuple(spec.name for spec in self.blocks)

    def layer_blocks(self) -> Dict[str, str]:
        """Attention layer id -> owning block name."""
        return {
            layer: spec.name for spec in self.blocks for layer in spec.attention_layers
        }

    def target_blocks(self) -> Dict[str, str]:
        """Adapter key -> owning block name."""
        layers = self.layer_blocks()
        return {key: layers[key.rsplit(".", 1)[0]] for key in self.lora_targets()}

    def check_cond(self, cond: Mapping[str, torch.Tensor]) -> None:
        missing = [name for name in self.block_names if name not in cond]
        if missing:
            raise ContractViolationError(
                f"conditioning map is missing blocks: {', '.join(missing)}"
            )


def timestep_embedding(t: int, dim: int = TIME_DIM) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    args = float(t) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


class ToyBlock(nn.Module):
    """Residual conv with FiLM text conditioning, then one self-attention layer."""

    def __init__(self, spec: BlockSpec, channels: int, embed_dim: int) -> None:
        super().__init__()
        self.name = spec.name
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(TIME_DIM, channels)
        self.cond_proj = nn.Linear(embed_dim, 2 * channels)
        self.attn1 = AttentionLayer(spec.attention_layers[0], channels)

    def forward(
        self,
        h: torch.Tensor,
        t_emb: torch.Tensor,
        cond: torch.Tensor,
        lora: Optional[LoraMap],
        observer: Optional[AttentionObserver],
    ) -> torch.Tensor:
        scale, shift = self.cond_proj(cond).chunk(2)
        x = h * (1 + scale[None, :, None, None]) + shift[None, :, None, None]
        x = self.conv(F.silu(x)) + self.time_proj(t_emb)[None, :, None, None]
        h = h + BRANCH_GAIN * x
        _, channels, height, width = h.shape
        tokens = h[0].reshape(channels, height * width).T
        attn = self.attn1(tokens, lora=lora, observer=observer)
        return h + BRANCH_GAIN * attn.T.reshape(1, channels, height, width)


def toy_block_specs() -> Tuple[BlockSpec, ...]:
    return tuple(
        BlockSpec(
            name=name,
            index=i,
            attention_layers=(f"{name}.attn1",),
            stage=Stage(name.split(".")[0]),
        )
        for i, name in enumerate(BLOCK_NAMES)
    )


class ToyDenoiser(nn.Module, BlockedDenoiser):
    """
    Small UNet-shaped denoiser whose 11 attention blocks mirror the SDXL block
    axis. Three resolutions with widths ``widths``; the full-resolution level
    has no attention, like SDXL's first down block. Weights come from a
    seeded generator, are float64 and frozen.
    """

    control_branches = CONTROL_BRANCHES

    def __init__(
        self,
        latent_channels: int,
        widths: Tuple[int, int, int] = (8, 16, 32),
        embed_dim: int = 32,
        output_gain: float = 0.05,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.latent_channels = latent_channels
        self._specs = toy_block_specs()
        w0, w1, w2 = widths
        channels = {"down.1": w1, "down.2": w2, "mid": w2, "up.0": w2, "up.1": w1}

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.time_mlp = nn.Linear(TIME_DIM, TIME_DIM)
            self.conv_in = nn.Conv2d(latent_channels, w0, 3, padding=1)
            self.res0 = nn.Conv2d(w0, w0, 3, padding=1)
            self.down0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
            self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
            self.up0 = nn.Conv2d(w2, w1, 3, padding=1)
            self.up1 = nn.Conv2d(w1, w0, 3, padding=1)
            self.conv_out = nn.Conv2d(w0, latent_channels, 3, padding=1)
            self.block_modules = nn.ModuleList(
                ToyBlock(spec, channels[spec.name.rsplit(".", 1)[0]], embed_dim)
                for spec in self._specs
            )
            self.control_in = nn.ModuleDict(
                {b: nn.Conv2d(c, w0, 3, padding=1) for b, c in CONTROL_CHANNELS.items()}
            )
            self.control_down = nn.ModuleDict(
                {
                    b: nn.Conv2d(c, w1, 3, stride=2, padding=1)
                    for b, c in CONTROL_CHANNELS.items()
                }
            )
        with torch.no_grad():
            self.conv_out.weight.mul_(output_gain)
            self.conv_out.bias.zero_()
        self.double()
        self.requires_grad_(False)
        self.eval()

    @property
    def blocks(self) -> Tuple[BlockSpec, ...]:
        return self._specs

    def attention_layers(self) -> Dict[str, AttentionLayer]:
        return {blk.attn1.layer_id: blk.attn1 for blk in self.block_modules}

    def lora_targets(self) -> Dict[str, Tuple[int, int]]:
        targets: Dict[str, Tuple[int, int]] = {}
        for layer in self.attention_layers().values():
            targets.update(layer.target_shapes())
        return targets

    def projection(self, key: str) -> nn.Linear:
        layer_id, name = key.rsplit(".", 1)
        return getattr(self.attention_layers()[layer_id], name)

    def _run_blocks(
        self,
        h: torch.Tensor,
        names: Tuple[str, ...],
        t_emb: torch.Tensor,
        cond: Mapping[str, torch.Tensor],
        lora: Optional[LoraMap],
        observer: Optional[AttentionObserver],
    ) -> torch.Tensor:
        for name in names:
            block = self.block_modules[BLOCK_NAMES.index(name)]
            h = block(h, t_emb, cond[name], lora, observer)
        return h

    def predict(
        self,
        z_t: torch.Tensor,
        t: int,
        cond: Mapping[str, torch.Tensor],
        lora: Optional[LoraMap] = None,
        controls: Optional[Mapping[str, torch.Tensor]] = None,
        control_scale: float = 1.0,
        observer: Optional[AttentionObserver] = None,
    ) -> torch.Tensor:
        if z_t.dim() != 3 or z_t.shape[0] != self.latent_channels:
            raise ContractViolationError(
                f"z_t must have shape ({self.latent_channels}, h, w), "
                f"got {tuple(z_t.shape)}"
            )
        if z_t.shape[1] % 4 or z_t.shape[2] % 4:
            raise ContractViolationError("latent height and width must be divisible by 4")
        self.check_cond(cond)
        controls = dict(controls or {})
        unknown = sorted(set(controls) - set(CONTROL_BRANCHES))
        if unknown:
            raise ContractViolationError(f"unknown control branches: {', '.join(unknown)}")

        t_emb = F.silu(self.time_mlp(timestep_embedding(t)))
        h = self.conv_in(z_t[None])
        for name, image in controls.items():
            h = h + control_scale * self.control_in[name](image[None])
        h = h + BRANCH_GAIN * self.res0(F.silu(h))
        skip0 = h

        h = self.down0(h)
        for name, image in controls.items():
            h = h + control_scale * self.control_down[name](image[None])
        h = self._run_blocks(h, BLOCK_NAMES[0:2], t_emb, cond, lora, observer)
        skip1 = h

        h = self.down1(h)
        h = self._run_blocks(h, BLOCK_NAMES[2:4], t_emb, cond, lora, observer)
        skip2 = h

        h = self._run_blocks(h, BLOCK_NAMES[4:5], t_emb, cond, lora, observer)
        h = self._run_blocks(h + skip2, BLOCK_NAMES[5:8], t_emb, cond, lora, observer)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest")) + skip1
        h = self._run_blocks(h, BLOCK_NAMES[8:11], t_emb, cond, lora, observer)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest")) + skip0
        return self.conv_out(F.silu(h))[0]


@dataclass(frozen=True)
class Backbone:
    """Denoiser plus the codec, scheduler and text encoder it works with."""

    name: str
    denoiser: BlockedDenoiser
    codec: LatentCodec
    scheduler: DiffusionScheduler
    text_encoder: TextEncoder

    @property
    def block_names(self) -> Tuple[str, ...]:
        return self.denoiser.block_names

    def embed(self, prompt: str) -> torch.Tensor:
        return self.text_encoder.encode(prompt)

    def uniform_cond(self, embedding: torch.Tensor) -> Dict[str, torch.Tensor]:
        return {name: embedding for name in self.block_names}

    def with_seed(self, seed: int) -> "Backbone":
        """Same weights, noise draws keyed to another run seed."""
        return replace(self, scheduler=replace(self.scheduler, seed=seed))


def check_adapter_targets(model: BlockedDenoiser, keys: Iterable[str]) -> None:
    unknown = set(keys) - set(model.lora_targets())
    if unknown:
        raise AdapterError("Adapter targets layers the model does not have", unknown)


def denoise(
    model: BlockedDenoiser,
    inputs: DenoiserInput,
    adapter: Optional["LoraAdapter"] = None,
    controls: Optional[Mapping[str, torch.Tensor]] = None,
    control_scale: float = 1.0,
    observer: Optional[AttentionObserver] = None,
) -> torch.Tensor:
    """
    Predict the noise in ``inputs.z_t``.

    Pure: the model is never mutated and equal inputs give bit-equal outputs.
    Each block sees only its own entry of ``inputs.cond``.

    Raises:
        AdapterError: If the adapter references layers the model lacks
    """
    lora = None
    if adapter is not None:
        check_adapter_targets(model, adapter.entries)
        lora = adapter.deltas()
    return model.predict(
        inputs.z_t,
        inputs.t,
        inputs.cond,
        lora=lora,
        controls=controls,
        control_scale=control_scale,
        observer=observer,
    )


def merge_adapter(backbone: Backbone, adapter: "LoraAdapter") -> Backbone:
    """Copy of ``backbone`` whose projections carry ``W + scale * B @ A``."""
    denoiser = backbone.denoiser
    if not isinstance(denoiser, ToyDenoiser):
        raise BackendUnavailableError(
            f"merging is implemented for the toy denoiser, not {type(denoiser).__name__}"
        )
    check_adapter_targets(denoiser, adapter.entries)
    merged = copy.deepcopy(denoiser)
    with torch.no_grad():
        for key, delta in adapter.deltas().items():
            merged.projection(key).weight.add_(delta.scale * (delta.B @ delta.A))
    return replace(backbone, denoiser=merged)


BackboneFactory = Callable[[BackboneConfig, int], Backbone]
_BACKBONES: Dict[str, BackboneFactory] = {}


def register_backbone(name: str) -> Callable[[BackboneFactory], BackboneFactory]:
    def decorator(factory: BackboneFactory) -> BackboneFactory:
        _BACKBONES[name] = factory
        return factory

    return decorator


def available_backbones() -> Tuple[str, ...]:
    return tuple(sorted(_BACKBONES))


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    """
    Build a registered backbone.

    Args:
        cfg: Backbone section of the run config
        seed: Run seed for noise draws (weights use ``cfg.weight_seed``)
    """
    if cfg.name not in _BACKBONES:
        raise BackendUnavailableError(
            f"Unknown backbone '{cfg.name}' (registered: {', '.join(available_backbones())})"
        )
    logger.debug("Building backbone %s", cfg.name)
    return _BACKBONES[cfg.name](cfg, seed)


@register_backbone("toy")
def _build_toy(cfg: BackboneConfig, seed: int) -> Backbone:
    codec = ToyLatentCodec(cfg.latent_factor, derive_seed(cfg.weight_seed, "codec"))
    widths = tuple(cfg.widths)
    if len(widths) != 3:
        raise ContractViolationError("toy backbone needs exactly three widths")
    denoiser = ToyDenoiser(
        codec.latent_channels,
        widths=(widths[0], widths[1], widths[2]),
        embed_dim=cfg.embed_dim,
        output_gain=cfg.output_gain,
        seed=derive_seed(cfg.weight_seed, "denoiser"),
    )
    return Backbone(
        name="toy",
        denoiser=denoiser,
        codec=codec,
        scheduler=DiffusionScheduler.cosine(cfg.steps, seed=seed),
        text_encoder=ToyTextEncoder(cfg.embed_dim, derive_seed(cfg.weight_seed, "text")),
    )


@register_backbone("sdxl-adapter")
def _build_sdxl_adapter(cfg: BackboneConfig, seed: int) -> Backbone:
    """
    Contract for a real SDXL backbone.

    An implementation wraps a diffusers ``UNet2DConditionModel`` as a
    ``BlockedDenoiser``: blocks are ``down_blocks.1.attentions.{0,1}``,
    ``down_blocks.2.attentions.{0,1}``, ``mid_block.attentions.0`` and
    ``up_blocks.{0,1}.attentions.{0,1,2}``; adapter keys are the
    ``attn1.to_{q,k,v,out.0}`` projections inside them; per-block
    conditioning swaps ``encoder_hidden_states`` per block through attention
    processors; observers are forward hooks on ``attn1``. The codec wraps the
    VAE and the scheduler wraps the pipeline scheduler. No weights ship here.
    """
    raise BackendUnavailableError(
        "The sdxl-adapter backbone is an interface stub; no SDXL weights ship "
        "with this package"
    )
