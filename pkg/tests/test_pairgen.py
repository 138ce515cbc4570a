"""
Test module for control signals, the design emulator and training pairs.
"""

from unittest.mock import patch

import numpy as np
import pytest

from embroidery_lora import EMB_TOKEN
from embroidery_lora.captioning import MockCaptioner
from embroidery_lora.config import PairgenConfig
from embroidery_lora.errors import (
    BackendError,
    BackendUnavailableError,
    ContractViolationError,
)
from embroidery_lora.fixtures import synthetic_design, synthetic_embroidery
from embroidery_lora.pairgen import (
    EDGE_DETECTORS,
    PairOrigin,
    TrainingPair,
    backend_logger,
    build_control_signals,
    compose_design_prompt,
    emulate_design,
    find_pairs,
    gradient_edges,
    load_pair,
    make_pair,
    palette_quantize,
    save_pair,
)


def _unavailable(image):
    raise BackendUnavailableError("annotator weights missing")


class TestControlSignals:
    """Tests for edge and blur conditions."""

    def test_gradient_edges_peak_at_one(self):
        edges = gradient_edges(synthetic_embroidery(0))
        assert edges.shape == (64, 64)
        assert edges.max() == pytest.approx(1.0)
        assert edges.min() >= 0.0

    def test_constant_image_has_no_edges(self):
        assert not gradient_edges(np.full((16, 16, 3), 0.5)).any()

    def test_blur_map(self):
        """The blur map keeps the image shape and smooths it."""
        image = synthetic_embroidery(0)
        signals = build_control_signals(image, "sobel", sigma=4.0)
        assert signals.blur_map.shape == image.shape
        assert signals.blur_map.std() < image.std()
        assert signals.detector == "sobel"
        assert signals.warnings == []

    def test_unavailable_detector_falls_back(self):
        """A missing HED annotator degrades to sobel with a warning."""
        with patch.dict(EDGE_DETECTORS, {"hed": _unavailable}):
            signals = build_control_signals(synthetic_embroidery(0), "hed")
        assert signals.detector == "sobel"
        assert "annotator weights missing" in signals.warnings[0]
        np.testing.assert_array_equal(
            signals.edge_map, gradient_edges(synthetic_embroidery(0))
        )

    def test_unknown_detector(self):
        with pytest.raises(ContractViolationError, match="unknown edge detector"):
            build_control_signals(synthetic_embroidery(0), "laplace")


class TestDesignEmulator:
    """Tests for the design emulator backends."""

    def test_palette_quantize_limits_colors(self):
        flat = palette_quantize(synthetic_embroidery(0), 6, seed=0)
        assert len(np.unique(flat.reshape(-1, 3), axis=0)) <= 6

    def test_mock_backend_is_deterministic(self):
        """Same inputs and seed give the same design."""
        image = synthetic_embroidery(1)
        signals = build_control_signals(image, "sobel")
        prompt = compose_design_prompt("red rose")
        first = emulate_design(image, signals, prompt, "mock", PairgenConfig(), seed=3)
        second = emulate_design(image, signals, prompt, "mock", PairgenConfig(), seed=3)
        np.testing.assert_array_equal(first, second)
        assert first.shape == image.shape

    def test_mock_design_is_flat(self):
        """The design has fewer colors than the embroidery."""
        image = synthetic_embroidery(1)
        signals = build_control_signals(image, "sobel")
        design = emulate_design(image, signals, "x", "mock", PairgenConfig(palette_size=4))
        colors = len(np.unique(design.reshape(-1, 3), axis=0))
        assert colors <= 4 < len(np.unique(image.reshape(-1, 3), axis=0))

    def test_unknown_backend(self):
        image = synthetic_embroidery(0)
        with pytest.raises(BackendUnavailableError, match="mock"):
            emulate_design(image, build_control_signals(image, "sobel"), "x", "nope")

    def test_real_backend_unavailable(self):
        image = synthetic_embroidery(0)
        with pytest.raises(BackendUnavailableError):
            emulate_design(image, build_control_signals(image, "sobel"), "x", "real")

    def test_failing_backend_carries_log(self):
        """A crashing backend is wrapped with its recent log lines."""

        def broken(style, signals, prompt, settings, seed):
            backend_logger.info("loading pipeline for %s", prompt)
            raise RuntimeError("CUDA out of memory")

        image = synthetic_embroidery(0)
        signals = build_control_signals(image, "sobel")
        with patch.dict("embroidery_lora.pairgen._DESIGN_BACKENDS", {"broken": broken}):
            with pytest.raises(BackendError) as info:
                emulate_design(image, signals, "a rose", "broken")
        assert info.value.backend == "broken"
        assert "CUDA out of memory" in str(info.value)
        assert "loading pipeline for a rose" in info.value.log_excerpt

    def test_design_prompt(self):
        assert compose_design_prompt("red rose").startswith("red rose, ")
        with pytest.raises(ContractViolationError):
            compose_design_prompt("  ")


class TestTrainingPair:
    """Tests for the pair record."""

    def test_style_prompt_extends_content_prompt(self):
        pair = TrainingPair.build(
            synthetic_embroidery(0), synthetic_design(0), "a red rose", "red rose"
        )
        assert pair.prompt_style == f"a red rose in {EMB_TOKEN} style"
        assert pair.origin is PairOrigin.REFERENCE

    def test_inconsistent_prompts(self):
        with pytest.raises(ContractViolationError, match="style prompt"):
            TrainingPair(
                synthetic_embroidery(0),
                synthetic_design(0),
                "a red rose",
                "a red rose in other style",
                "red rose",
            )

    def test_size_mismatch(self):
        with pytest.raises(ContractViolationError, match="differ in size"):
            TrainingPair.build(
                synthetic_embroidery(0), synthetic_design(0, size=32), "a rose", "rose"
            )

    def test_make_pair(self):
        """The captioner supplies the caption and provenance is recorded."""
        image = synthetic_embroidery(4)
        captioner = MockCaptioner(seed=0)
        settings = PairgenConfig(edge_detector="sobel")
        pair = make_pair(image, captioner, settings, seed=0)
        caption = captioner.caption(image)
        assert pair.caption == caption
        assert pair.prompt_content == f"a {caption}"
        assert pair.metadata["pair_mode"] == "design"
        assert pair.metadata["edge_detector"] == "sobel"
        np.testing.assert_array_equal(pair.style_image, image)

    def test_explicit_caption(self):
        pair = make_pair(
            synthetic_embroidery(4),
            MockCaptioner(),
            PairgenConfig(edge_detector="sobel"),
            caption="green frog",
        )
        assert pair.prompt_content == "a green frog"

    @pytest.mark.parametrize("mode", ["sketch", "appearance"])
    def test_edge_pair_modes(self, mode):
        """Sketch and appearance pairs use grayscale edge images."""
        settings = PairgenConfig(edge_detector="sobel", pair_mode=mode)
        pair = make_pair(synthetic_embroidery(4), MockCaptioner(), settings)
        content = pair.content_image
        np.testing.assert_array_equal(content[..., 0], content[..., 2])
        assert pair.metadata["pair_mode"] == mode

    def test_artwork_mode_needs_stylizer(self):
        settings = PairgenConfig(edge_detector="sobel", pair_mode="artwork")
        with pytest.raises(BackendUnavailableError, match="artwork"):
            make_pair(synthetic_embroidery(4), MockCaptioner(), settings)

    def test_save_and_load(self, tmp_path, reference_pair):
        """A saved pair directory reloads to an equal pair."""
        paths = save_pair(reference_pair, tmp_path / "pairs" / "rose")
        assert set(paths) == {"style", "content", "manifest"}
        loaded = load_pair(tmp_path / "pairs" / "rose")
        assert loaded.prompt_style == reference_pair.prompt_style
        np.testing.assert_array_equal(loaded.style_image, reference_pair.style_image)
        np.testing.assert_array_equal(loaded.content_image, reference_pair.content_image)

    def test_find_pairs(self, tmp_path, reference_pair, small_pair):
        save_pair(reference_pair, tmp_path / "b")
        save_pair(small_pair, tmp_path / "a")
        assert find_pairs(tmp_path) == [tmp_path / "a", tmp_path / "b"]
        assert find_pairs(tmp_path / "a") == [tmp_path / "a"]

    def test_load_non_pair(self, tmp_path):
        with pytest.raises(ContractViolationError, match="pair.yaml"):
            load_pair(tmp_path)
