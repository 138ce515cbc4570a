"""
Embroidery LoRA Package.

One-shot fine-grained style customization for latent diffusion denoisers:
block-wise attention-similarity analysis, two-stage contrastive low-rank
adapter training, inference and evaluation. Every algorithm runs against a
small deterministic toy backbone; real backbones plug in through adapters.
"""

__version__ = "0.1.0"
__author__ = "Embroidery LoRA contributors"

# Configuration
DEFAULT_BACKBONE = "toy"
EMB_TOKEN = "[emb]"
DESIGN_PROMPT_SUFFIX = (
    "flat design, vector graphic design, digital design, cartoon design, "
    "clean lines, uniform color blocks, smooth surface, high quality"
)
RUN_ROOT_ENV = "EMBROIDERY_LORA_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"


def style_suffix(emb_token: str = EMB_TOKEN) -> str:
    """Return the suffix that turns a content prompt into a style prompt."""
    return f" in {emb_token} style"
