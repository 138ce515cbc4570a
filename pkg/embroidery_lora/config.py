"""
Configuration Module.

Typed dataclass schemas for every section of a run config, loaded from
hierarchical YAML with OmegaConf and overridden with ``section.key=value``
dot-list strings.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, List, Optional, Union

from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import ConfigAttributeError, ConfigKeyError, ValidationError

from embroidery_lora import DEFAULT_BACKBONE, EMB_TOKEN
from embroidery_lora.errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "configs"

DEFAULT_PROMPT_BANK = [
    "a yellow dog",
    "a red rose",
    "a blue whale",
    "a green frog",
    "a purple butterfly",
    "an orange fox",
    "a pink flamingo",
    "a white swan",
    "a black cat",
    "a brown owl",
]


@dataclass
class BackboneConfig:
    """Denoiser, scheduler, codec and sampler settings."""

    name: str = DEFAULT_BACKBONE
    steps: int = 50
    latent_factor: int = 4
    widths: List[int] = field(default_factory=lambda: [8, 16, 32])
    embed_dim: int = 32
    output_gain: float = 0.05
    eta: float = 0.0
    weight_seed: int = 0


@dataclass
class LoraConfig:
    """Adapter shape; alpha defaults to the rank so the multiplier is 1."""

    rank: int = 64
    alpha: Optional[float] = None


@dataclass
class AnalysisConfig:
    renoise_iters: int = 5
    sections: int = 10
    k: int = 4
    selection_sections: List[int] = field(default_factory=lambda: [0, 10])
    complementary_sections: List[int] = field(default_factory=lambda: [5, 10])
    inversion_prompt: str = ""
    residual_tolerance: float = 1e-4


@dataclass
class PairgenConfig:
    backend: str = "mock"
    captioner: str = "mock"
    captioner_model: str = "gpt-4o-mini"
    edge_detector: str = "hed"
    blur_sigma: float = 4.0
    palette_size: int = 8
    edge_threshold: float = 0.5
    emb_token: str = EMB_TOKEN
    pair_mode: str = "design"


@dataclass
class TrainingConfig:
    """Learning rates, iteration counts and complementary-data settings."""

    eta1: float = 1e-4
    eta2: float = 1e-5
    stage1_iters: int = 400
    stage2_iters: int = 200
    N: int = 10
    tau: float = 1.0
    momentum: float = 0.9
    timestep_sampler: str = "uniform"
    fixed_timestep: int = 25
    resample_noise: bool = True
    fixed_noise: bool = False
    checkpoint_every: int = 50
    partition_mode: str = "selected"
    style_blocks: List[str] = field(default_factory=list)
    max_nan_retries: int = 3
    prompt_bank: List[str] = field(default_factory=lambda: list(DEFAULT_PROMPT_BANK))


@dataclass
class InferenceConfig:
    mode: str = "text"
    strength: float = 0.7
    strict_boundary: bool = True
    use_all_blocks: bool = False
    adapter_step_fraction: float = 1.0
    control_scale: float = 1.0
    guidance_scale: float = 1.0
    negative_prompt: str = ""


@dataclass
class MetricsConfig:
    hf_cutoff: float = 0.25
    histogram_bins: int = 64
    prompts: List[str] = field(default_factory=lambda: list(DEFAULT_PROMPT_BANK))


@dataclass
class ExperimentConfig:
    """Root of a run config."""

    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    pairgen: PairgenConfig = field(default_factory=PairgenConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


def _valid_keys(schema: DictConfig, full_key: str) -> List[str]:
    """List the keys of the section that ``full_key`` points into."""
    section = full_key.rsplit(".", 1)[0] if "." in full_key else ""
    node = OmegaConf.select(schema, section) if section else schema
    if not isinstance(node, DictConfig):
        node = schema
        section = ""
    prefix = f"{section}." if section else ""
    return [f"{prefix}{key}" for key in node.keys()]


def _merge(schema: DictConfig, other: Any) -> DictConfig:
    try:
        merged = OmegaConf.merge(schema, other)
    except (ConfigKeyError, ConfigAttributeError) as e:
        full_key = str(getattr(e, "full_key", "") or getattr(e, "key", ""))
        raise ConfigError(
            f"Unknown config key '{full_key}'", _valid_keys(schema, full_key)
        ) from e
    except ValidationError as e:
        raise ConfigError(f"Invalid config value: {e.msg}") from e
    assert isinstance(merged, DictConfig)
    return merged


def _file_chain(path: Path) -> List[DictConfig]:
    """Load a config file and, through ``extends``, all of its parents."""
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    data = OmegaConf.load(path)
    if not isinstance(data, DictConfig):
        raise ConfigError(f"Config file must hold a mapping: {path}")
    chain: List[DictConfig] = []
    parent = data.pop("extends", None)
    if parent is not None:
        chain.extend(_file_chain((path.parent / str(parent)).resolve()))
    chain.append(data)
    return chain


def resolve_config_path(name: Union[str, Path]) -> Path:
    """Find a config by path, falling back to the shipped presets."""
    path = Path(name)
    if path.exists():
        return path
    for candidate in (CONFIG_DIR / path.name, CONFIG_DIR / f"{path.name}.yaml"):
        if candidate.exists():
            return candidate
    raise ConfigError(f"Config file not found: {name}")


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()
) -> ExperimentConfig:
    """
    Build the resolved config for a run.

    Args:
        path: YAML config file or shipped preset name; None uses the defaults
        overrides: ``section.key=value`` strings applied last

    Returns:
        The resolved, validated config

    Raises:
        ConfigError: On unknown keys, bad values or malformed overrides
    """
    schema = OmegaConf.structured(ExperimentConfig)
    cfg = schema
    if path is not None:
        for layer in _file_chain(resolve_config_path(path)):
            cfg = _merge(cfg, layer)

    dotlist = list(overrides)
    for item in dotlist:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value: '{item}'")
    if dotlist:
        cfg = _merge(cfg, OmegaConf.from_dotlist(dotlist))

    resolved = OmegaConf.to_object(cfg)
    assert isinstance(resolved, ExperimentConfig)
    validate_config(resolved)
    return resolved


def validate_config(cfg: ExperimentConfig) -> None:
    """Check value ranges that the schema types cannot express."""
    training = cfg.training
    if training.eta1 <= 0 or training.eta2 <= 0:
        raise ConfigError("training.eta1 and training.eta2 must be positive")
    if training.tau <= 0:
        raise ConfigError("training.tau must be positive")
    if training.N < 1:
        raise ConfigError("training.N must be at least 1")
    if training.partition_mode not in ("selected", "all", "explicit"):
        raise ConfigError(
            f"Unknown training.partition_mode '{training.partition_mode}'",
            ["selected", "all", "explicit"],
        )
    if training.timestep_sampler not in ("uniform", "fixed"):
        raise ConfigError(
            f"Unknown training.timestep_sampler '{training.timestep_sampler}'",
            ["uniform", "fixed"],
        )
    if cfg.lora.rank < 1:
        raise ConfigError("lora.rank must be at least 1")
    if not 0 < cfg.inference.strength <= 1:
        raise ConfigError("inference.strength must lie in (0, 1]")
    if cfg.analysis.sections < 1 or cfg.backbone.steps % cfg.analysis.sections:
        raise ConfigError("analysis.sections must divide backbone.steps")


def config_to_yaml(cfg: ExperimentConfig) -> str:
    return OmegaConf.to_yaml(OmegaConf.structured(cfg))


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    OmegaConf.save(OmegaConf.structured(cfg), Path(path))


def derive_seed(seed: int, label: str) -> int:
    """Derive an independent 63-bit seed for one stochastic component."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
