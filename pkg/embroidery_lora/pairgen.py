"""
Pair Generation Module.

Builds the content counterpart of a reference style image: control signals
(coarse edges and a blurred color field), the flat-design prompt, a design
emulator backend, and the resulting ``TrainingPair``.
"""

import logging
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Union

import numpy as np
from omegaconf import OmegaConf
from PIL import Image
from scipy.cluster.vq import kmeans2
from scipy.ndimage import gaussian_filter
from skimage.filters import sobel

from embroidery_lora import DESIGN_PROMPT_SUFFIX, EMB_TOKEN, style_suffix
from embroidery_lora.captioning import Captioner
from embroidery_lora.config import PairgenConfig, derive_seed
from embroidery_lora.errors import (
    BackendError,
    BackendUnavailableError,
    ContractViolationError,
)
from embroidery_lora.images import (
    ImageArray,
    check_rgb,
    load_rgb,
    luma,
    quantize,
    save_rgb,
    to_uint8,
)

logger = logging.getLogger(__name__)
backend_logger = logging.getLogger(f"{__name__}.backends")

EDGE_SMOOTHING = 2.0
LOG_EXCERPT_LINES = 20


class PairOrigin(str, Enum):
    REFERENCE = "reference"
    GENERATED = "generated"


class PairMode(str, Enum):
    DESIGN = "design"
    SKETCH = "sketch"
    APPEARANCE = "appearance"
    ARTWORK = "artwork"


@dataclass
class ControlSignals:
    """Edge map in [0, 1] (canny branch) and low-passed RGB (tile branch)."""

    edge_map: np.ndarray
    blur_map: ImageArray
    detector: str = "sobel"
    warnings: List[str] = field(default_factory=list)


def gradient_edges(image: ImageArray, smoothing: float = EDGE_SMOOTHING) -> np.ndarray:
    """Sobel magnitude of lightly smoothed luma, scaled to peak at 1."""
    magnitude = sobel(gaussian_filter(luma(image), smoothing, mode="reflect"))
    peak = float(magnitude.max())
    if peak <= 1e-12:
        return np.zeros_like(magnitude)
    return np.clip(magnitude / peak, 0.0, 1.0)


def hed_edges(image: ImageArray) -> np.ndarray:
    """HED soft edges through ``controlnet_aux``; needs the annotator weights."""
    try:
        from controlnet_aux import HEDdetector
    except ImportError as e:
        raise BackendUnavailableError("controlnet_aux is not installed") from e
    try:
        detector = HEDdetector.from_pretrained("lllyasviel/Annotators")
        edges = detector(Image.fromarray(to_uint8(image)))
    except (OSError, RuntimeError) as e:
        raise BackendUnavailableError(f"HED detector could not run: {e}") from e
    edges = edges.convert("L").resize((image.shape[1], image.shape[0]))
    return np.asarray(edges, dtype=np.float64) / 255.0


EDGE_DETECTORS: Dict[str, Callable[[ImageArray], np.ndarray]] = {
    "hed": hed_edges,
    "sobel": gradient_edges,
}


def build_control_signals(
    style_image: ImageArray, detector: str = "hed", sigma: float = 4.0
) -> ControlSignals:
    """
    Edge and blur conditions for the design emulator.

    An unavailable edge detector falls back to the built-in gradient detector
    and the fallback is recorded in ``warnings``.
    """
    rgb = check_rgb(style_image, "style_image")
    if detector not in EDGE_DETECTORS:
        raise ContractViolationError(
            f"unknown edge detector '{detector}' (known: {', '.join(EDGE_DETECTORS)})"
        )
    notes: List[str] = []
    used = detector
    try:
        edges = EDGE_DETECTORS[detector](rgb)
    except BackendUnavailableError as e:
        message = f"edge detector '{detector}' unavailable, using sobel: {e}"
        logger.warning(message)
        notes.append(message)
        edges = gradient_edges(rgb)
        used = "sobel"
    blur = gaussian_filter(rgb, sigma=(sigma, sigma, 0), mode="reflect")
    return ControlSignals(np.clip(edges, 0.0, 1.0), np.clip(blur, 0.0, 1.0), used, notes)


def compose_design_prompt(caption: str) -> str:
    """``caption`` followed by the flat-design style suffix."""
    if not caption or not caption.strip():
        raise ContractViolationError("caption must be non-empty")
    return f"{caption}, {DESIGN_PROMPT_SUFFIX}"


DesignBackend = Callable[[ImageArray, ControlSignals, str, PairgenConfig, int], ImageArray]
_DESIGN_BACKENDS: Dict[str, DesignBackend] = {}


def register_design_backend(name: str) -> Callable[[DesignBackend], DesignBackend]:
    def decorator(fn: DesignBackend) -> DesignBackend:
        _DESIGN_BACKENDS[name] = fn
        return fn

    return decorator


class _ListHandler(logging.Handler):
    def __init__(self) -> None:
        super().__init__(logging.DEBUG)
        self.lines: List[str] = []

    def emit(self, record: logging.LogRecord) -> None:
        self.lines.append(self.format(record))


@contextmanager
def _captured_backend_log() -> Iterator[_ListHandler]:
    handler = _ListHandler()
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    previous = backend_logger.level
    backend_logger.setLevel(logging.DEBUG)
    backend_logger.addHandler(handler)
    try:
        yield handler
    finally:
        backend_logger.removeHandler(handler)
        backend_logger.setLevel(previous)


def emulate_design(
    style_image: ImageArray,
    signals: ControlSignals,
    prompt: str,
    backend: str = "mock",
    settings: Optional[PairgenConfig] = None,
    seed: int = 0,
) -> ImageArray:
    """
    Turn a style image into a flat graphic design.

    Raises:
        BackendUnavailableError: If ``backend`` is not registered or cannot run
        BackendError: If the backend fails; carries its recent log lines
    """
    if backend not in _DESIGN_BACKENDS:
        raise BackendUnavailableError(
            f"Unknown design backend '{backend}' "
            f"(registered: {', '.join(sorted(_DESIGN_BACKENDS))})"
        )
    rgb = check_rgb(style_image, "style_image")
    settings = settings or PairgenConfig()
    with _captured_backend_log() as log:
        try:
            content = _DESIGN_BACKENDS[backend](rgb, signals, prompt, settings, seed)
        except (BackendUnavailableError, BackendError):
            raise
        except Exception as e:
            excerpt = "\n".join(log.lines[-LOG_EXCERPT_LINES:])
            raise BackendError(backend, str(e), excerpt) from e
    return quantize(content)


def palette_quantize(image: ImageArray, k: int, seed: int = 0) -> ImageArray:
    """Snap every pixel to one of at most ``k`` 8-bit colors."""
    rgb = quantize(image)
    pixels = rgb.reshape(-1, 3)
    unique = np.unique(pixels, axis=0)
    if len(unique) <= k:
        return rgb
    rng = np.random.default_rng(derive_seed(seed, "palette"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        centroids, labels = kmeans2(pixels, k, minit="++", seed=rng)
    palette = quantize(centroids)
    return palette[labels].reshape(rgb.shape)


@register_design_backend("mock")
def _mock_design(
    style_image: ImageArray,
    signals: ControlSignals,
    prompt: str,
    settings: PairgenConfig,
    seed: int,
) -> ImageArray:
    """Palette-quantized blur map with dark outlines where the edge map is strong."""
    backend_logger.debug("mock design emulator, prompt=%r", prompt)
    flat = palette_quantize(signals.blur_map, settings.palette_size, seed)
    lines = signals.edge_map > settings.edge_threshold
    if lines.any():
        colors = np.unique(flat.reshape(-1, 3), axis=0)
        darkest = colors[np.argmin(colors @ np.array([0.299, 0.587, 0.114]))]
        flat = flat.copy()
        flat[lines] = darkest
    return flat


@register_design_backend("real")
def _real_design(
    style_image: ImageArray,
    signals: ControlSignals,
    prompt: str,
    settings: PairgenConfig,
    seed: int,
) -> ImageArray:
    """
    Contract for the external emulator: an SD3 text-to-image pipeline with a
    ControlNet-Canny branch fed ``signals.edge_map`` and a ControlNet-Tile
    branch fed ``signals.blur_map``, prompted with ``prompt``. No weights
    ship with this package.
    """
    raise BackendUnavailableError(
        "The real design backend needs an SD3 + ControlNet deployment"
    )


@dataclass(frozen=True)
class TrainingPair:
    """
    A style image, its content counterpart and their prompts.

    ``prompt_style`` is always ``prompt_content`` plus " in <token> style".
    """

    style_image: ImageArray
    content_image: ImageArray
    prompt_content: str
    prompt_style: str
    caption: str
    origin: PairOrigin = PairOrigin.REFERENCE
    emb_token: str = EMB_TOKEN
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        style = check_rgb(self.style_image, "style_image")
        content = check_rgb(self.content_image, "content_image")
        if style.shape != content.shape:
            raise ContractViolationError(
                f"pair images differ in size: {style.shape} vs {content.shape}"
            )
        if self.prompt_style != self.prompt_content + style_suffix(self.emb_token):
            raise ContractViolationError(
                f"style prompt '{self.prompt_style}' is not the content prompt "
                f"plus '{style_suffix(self.emb_token)}'"
            )
        object.__setattr__(self, "origin", PairOrigin(self.origin))

    @classmethod
    def build(
        cls,
        style_image: ImageArray,
        content_image: ImageArray,
        prompt_content: str,
        caption: str,
        origin: PairOrigin = PairOrigin.REFERENCE,
        emb_token: str = EMB_TOKEN,
        **metadata: Any,
    ) -> "TrainingPair":
        return cls(
            style_image,
            content_image,
            prompt_content,
            prompt_content + style_suffix(emb_token),
            caption,
            origin,
            emb_token,
            dict(metadata),
        )


def content_prompt(caption: str) -> str:
    return f"a {caption}"


def construct_content(
    style_image: ImageArray,
    signals: ControlSignals,
    caption: str,
    settings: PairgenConfig,
    seed: int = 0,
) -> ImageArray:
    """Content image for the configured ``pair_mode``."""
    mode = PairMode(settings.pair_mode)
    if mode is PairMode.DESIGN:
        return emulate_design(
            style_image,
            signals,
            compose_design_prompt(caption),
            settings.backend,
            settings,
            seed,
        )
    if mode is PairMode.SKETCH:
        return quantize(np.repeat((1.0 - signals.edge_map)[:, :, None], 3, axis=2))
    if mode is PairMode.APPEARANCE:
        return quantize(np.repeat(signals.edge_map[:, :, None], 3, axis=2))
    raise BackendUnavailableError(
        "pair_mode 'artwork' needs an external stylizer; none is registered"
    )


def make_pair(
    style_image: ImageArray,
    captioner: Captioner,
    settings: Optional[PairgenConfig] = None,
    seed: int = 0,
    caption: Optional[str] = None,
) -> TrainingPair:
    """
    Reference pair for a style image.

    Args:
        style_image: Reference embroidery (or other style) image
        captioner: Supplies ``<des>`` unless ``caption`` is given
        settings: Pair generation section of the run config
        seed: Run seed
    """
    settings = settings or PairgenConfig()
    style = check_rgb(style_image, "style_image")
    caption = caption or captioner.caption(style)
    signals = build_control_signals(style, settings.edge_detector, settings.blur_sigma)
    content = construct_content(style, signals, caption, settings, seed)
    return TrainingPair.build(
        style,
        content,
        content_prompt(caption),
        caption,
        PairOrigin.REFERENCE,
        settings.emb_token,
        pair_mode=settings.pair_mode,
        backend=settings.backend,
        edge_detector=signals.detector,
        warnings=list(signals.warnings),
    )


def save_pair(pair: TrainingPair, directory: Union[str, Path]) -> Dict[str, Path]:
    """Write ``style.png``, ``content.png`` and ``pair.yaml``."""
    directory = Path(directory)
    paths = {
        "style": save_rgb(pair.style_image, directory / "style.png"),
        "content": save_rgb(pair.content_image, directory / "content.png"),
    }
    manifest = {
        "caption": pair.caption,
        "prompt_content": pair.prompt_content,
        "prompt_style": pair.prompt_style,
        "emb_token": pair.emb_token,
        "origin": pair.origin.value,
        "provenance": dict(pair.metadata),
    }
    paths["manifest"] = directory / "pair.yaml"
    OmegaConf.save(OmegaConf.create(manifest), paths["manifest"])
    return paths


def load_pair(directory: Union[str, Path]) -> TrainingPair:
    directory = Path(directory)
    manifest_file = directory / "pair.yaml"
    if not manifest_file.exists():
        raise ContractViolationError(f"not a pair directory (no pair.yaml): {directory}")
    data = OmegaConf.to_container(OmegaConf.load(manifest_file))
    assert isinstance(data, dict)
    return TrainingPair(
        load_rgb(directory / "style.png"),
        load_rgb(directory / "content.png"),
        data["prompt_content"],
        data["prompt_style"],
        data["caption"],
        PairOrigin(data.get("origin", "reference")),
        data.get("emb_token", EMB_TOKEN),
        dict(data.get("provenance") or {}),
    )


def find_pairs(root: Union[str, Path]) -> List[Path]:
    """Pair directories under ``root`` (``root`` itself if it is one)."""
    root = Path(root)
    if (root / "pair.yaml").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/pair.yaml"))
