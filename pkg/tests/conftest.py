"""Shared fixtures: toy backbones, configs and reference pairs."""

import numpy as np
import pytest
import torch

from embroidery_lora.backbone import build_backbone
from embroidery_lora.config import BackboneConfig, load_config
from embroidery_lora.fixtures import synthetic_design, synthetic_embroidery
from embroidery_lora.lora import BlockPartition, LoraEntry, init_adapter
from embroidery_lora.pairgen import PairOrigin, TrainingPair

# Short schedule keeps the sampling and inversion loops cheap.
FAST_OVERRIDES = [
    "backbone.steps=10",
    "analysis.renoise_iters=1",
    "training.stage1_iters=2",
    "training.stage2_iters=2",
    "training.N=2",
    "training.checkpoint_every=1",
]


@pytest.fixture(scope="session")
def backbone():
    """Toy backbone with the 50-step schedule."""
    return build_backbone(BackboneConfig(), seed=0)


@pytest.fixture(scope="session")
def fast_backbone():
    """Toy backbone with a 10-step schedule."""
    return build_backbone(BackboneConfig(steps=10), seed=0)


@pytest.fixture
def fast_config():
    return load_config("smoke", FAST_OVERRIDES)


@pytest.fixture(scope="session")
def reference_pair():
    return TrainingPair.build(
        synthetic_embroidery(0),
        synthetic_design(0),
        "a red rose",
        "red rose",
        PairOrigin.REFERENCE,
    )


@pytest.fixture(scope="session")
def small_pair():
    """16x16 pair: a 4x4 latent, small enough for finite differences."""
    return TrainingPair.build(
        synthetic_embroidery(3, size=16),
        synthetic_design(3, size=16),
        "a blue whale",
        "blue whale",
        PairOrigin.REFERENCE,
    )


@pytest.fixture
def partition(fast_backbone):
    return BlockPartition.default(fast_backbone.block_names)


def _randomize(adapter, seed=0, scale=0.1):
    gen = torch.Generator().manual_seed(seed)
    return adapter.replace_entries(
        {
            key: LoraEntry(
                entry.A.clone(),
                torch.randn(entry.B.shape, generator=gen, dtype=torch.float64) * scale,
            )
            for key, entry in adapter.entries.items()
        }
    )


@pytest.fixture
def trained_adapter(fast_backbone):
    """Rank-2 adapter with random non-zero deltas on every layer."""
    return _randomize(init_adapter(fast_backbone.denoiser, rank=2, seed=1), seed=2)


@pytest.fixture
def randomize():
    """Factory: copy of an adapter with non-zero B matrices."""
    return _randomize


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
