"""
Test module for styled generation, control policies and color correction.
"""

import numpy as np
import pytest
import torch
from skimage.color import rgb2lab

from embroidery_lora import EMB_TOKEN
from embroidery_lora.config import InferenceConfig
from embroidery_lora.errors import AdapterError, ContractViolationError
from embroidery_lora.fixtures import synthetic_design
from embroidery_lora.inference import (
    CANNY,
    COLOR_CORRECTION,
    TILE,
    GenerationMode,
    InferenceRequest,
    apply_style_blocks,
    color_correct,
    control_policy,
    generate,
    generate_text,
    sdedit_generate,
)
from embroidery_lora.lora import BlockPartition, LoraEntry


def _text(prompt="a red rose", seed=0, size=16):
    return InferenceRequest(GenerationMode.TEXT, prompt, seed=seed, size=size)


def _image(strength=0.5, strict=True, seed=0, size=16):
    return InferenceRequest(
        GenerationMode.IMAGE,
        "a red rose",
        input_image=synthetic_design(seed, size=size),
        strict_boundary=strict,
        strength=strength,
        seed=seed,
    )


@pytest.fixture
def view(fast_backbone, trained_adapter, partition):
    return apply_style_blocks(fast_backbone, trained_adapter, partition)


class TestInferenceRequest:
    """Tests for request validation and prompts."""

    def test_effective_prompt_adds_suffix_once(self):
        assert _text("a cat").effective_prompt == f"a cat in {EMB_TOKEN} style"
        already = _text(f"a cat in {EMB_TOKEN} style")
        assert already.effective_prompt == f"a cat in {EMB_TOKEN} style"

    def test_image_mode_needs_image(self):
        with pytest.raises(ContractViolationError, match="input image"):
            InferenceRequest(GenerationMode.IMAGE, "a cat")

    @pytest.mark.parametrize("strength", [0.0, 1.5, -0.1])
    def test_strength_range(self, strength):
        with pytest.raises(ContractViolationError, match="strength"):
            InferenceRequest(GenerationMode.TEXT, "a cat", strength=strength)


class TestControlPolicy:
    """Tests for the boundary policy table."""

    def test_strict(self):
        assert control_policy(True) == {TILE, CANNY, COLOR_CORRECTION}

    def test_loose(self):
        assert control_policy(False) == {TILE}

    @pytest.mark.parametrize("strict", [True, False])
    def test_text_mode_has_no_controls(self, strict):
        assert control_policy(strict, GenerationMode.TEXT) == frozenset()


class TestColorCorrection:
    """Tests for LAB chroma transfer."""

    def test_lightness_from_generated_chroma_from_design(self):
        """Output L follows the generated image; a and b follow the design."""
        rng = np.random.default_rng(3)
        generated = rng.uniform(0.35, 0.65, size=(16, 16, 3))
        design = rng.uniform(0.35, 0.65, size=(16, 16, 3))
        out_lab = rgb2lab(color_correct(generated, design))
        gen_lab, des_lab = rgb2lab(generated), rgb2lab(design)
        assert np.abs(out_lab[..., 0] - gen_lab[..., 0]).mean() < 2.0
        assert np.abs(out_lab[..., 1:] - des_lab[..., 1:]).mean() < 2.0

    def test_same_image_is_fixed_point(self):
        image = synthetic_design(1, size=16)
        np.testing.assert_allclose(color_correct(image, image), image, atol=1.5 / 255)

    def test_size_mismatch(self):
        with pytest.raises(ContractViolationError, match="equal sizes"):
            color_correct(synthetic_design(0, size=16), synthetic_design(0, size=32))


class TestApplyStyleBlocks:
    """Tests for restricting the adapter at inference."""

    def test_only_style_entries_act(self, fast_backbone, trained_adapter, partition, view):
        """Changing non-style entries does not change the output."""
        style_keys = set(trained_adapter.keys_in(partition.style_blocks))
        altered = trained_adapter.replace_entries(
            {
                key: entry if key in style_keys else LoraEntry(entry.A, entry.B * 5 + 1)
                for key, entry in trained_adapter.entries.items()
            }
        )
        other = apply_style_blocks(fast_backbone, altered, partition)
        assert set(view.adapter.entries) == style_keys
        np.testing.assert_array_equal(
            generate_text(view, _text()).image, generate_text(other, _text()).image
        )

    def test_use_all_blocks_keeps_everything(
        self, fast_backbone, trained_adapter, partition
    ):
        full = apply_style_blocks(fast_backbone, trained_adapter, partition, True)
        assert full.adapter == trained_adapter
        assert full.active_blocks == set(fast_backbone.block_names)

    def test_partition_must_match_backbone(self, fast_backbone, trained_adapter):
        foreign = BlockPartition(("a",), ("a", "b"))
        with pytest.raises(AdapterError):
            apply_style_blocks(fast_backbone, trained_adapter, foreign)


class TestGeneration:
    """Tests for text and image generation."""

    def test_text_is_seeded(self, view):
        first = generate_text(view, _text(seed=1))
        again = generate_text(view, _text(seed=1))
        other = generate_text(view, _text(seed=2))
        np.testing.assert_array_equal(first.image, again.image)
        assert not np.array_equal(first.image, other.image)
        assert first.image.shape == (16, 16, 3)
        assert first.metadata["controls"] == []
        assert first.metadata["effective_prompt"].endswith(f"in {EMB_TOKEN} style")

    def test_text_size_must_fit_codec(self, view):
        with pytest.raises(ContractViolationError, match="divisible"):
            generate_text(view, _text(size=18))

    def test_sdedit_noising_steps(self, view):
        result = sdedit_generate(view, _image(strength=0.5))
        assert result.metadata["noising_steps"] == 5
        assert result.image.shape == (16, 16, 3)

    def test_small_strength_returns_input(self, view):
        """Fewer than one noising step leaves the input untouched."""
        request = _image(strength=0.05)
        result = sdedit_generate(view, request)
        assert result.metadata["noising_steps"] == 0
        np.testing.assert_array_equal(result.image, request.input_image)

    def test_strict_boundary_controls(self, view):
        result = sdedit_generate(view, _image(strict=True))
        assert result.metadata["controls"] == [CANNY, TILE]
        assert result.metadata["color_correction"] is True

    def test_loose_boundary_controls(self, view):
        result = sdedit_generate(view, _image(strict=False))
        assert result.metadata["controls"] == [TILE]
        assert result.metadata["color_correction"] is False

    def test_explicit_controls_are_filtered_by_policy(self, view):
        controls = {
            TILE: torch.zeros(3, 4, 4, dtype=torch.float64),
            CANNY: torch.zeros(1, 4, 4, dtype=torch.float64),
        }
        result = sdedit_generate(view, _image(strict=False), controls)
        assert result.metadata["controls"] == [TILE]

    def test_sdedit_is_seeded(self, view):
        a = sdedit_generate(view, _image(strength=1.0))
        b = sdedit_generate(view, _image(strength=1.0))
        np.testing.assert_array_equal(a.image, b.image)

    def test_sdedit_needs_image_request(self, view):
        with pytest.raises(ContractViolationError):
            sdedit_generate(view, _text())

    def test_generate_dispatches_on_mode(self, view):
        settings = InferenceConfig(guidance_scale=2.0, negative_prompt="blurry")
        text = generate(view, _text(), settings)
        image = generate(view, _image(), settings)
        assert text.metadata["mode"] == "text"
        assert image.metadata["mode"] == "image"
        assert text.metadata["guidance_scale"] == 2.0
