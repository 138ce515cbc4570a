"""
Test module for HFRD, the histogram loss and the benchmark harness.
"""

from unittest.mock import MagicMock

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from embroidery_lora.errors import BackendError, ContractViolationError
from embroidery_lora.fixtures import (
    checkerboard,
    synthetic_design,
    synthetic_embroidery,
)
from embroidery_lora.images import quantize, save_rgb
from embroidery_lora.metrics import (
    CLIP_SCORE,
    HFRD,
    HISTOGRAM,
    LPIPS,
    NOT_AVAILABLE,
    MetricRegistry,
    evaluate_directories,
    hf_ratio,
    hfrd,
    histogram_loss,
    run_benchmark,
)


def _solid(rgb, size=8):
    return np.broadcast_to(np.asarray(rgb, dtype=np.float64), (size, size, 3)).copy()


def _dense_hf_ratio(gray, cutoff):
    """Reference ratio from an explicit DFT matrix."""
    n = gray.shape[0]
    k = np.arange(n)
    dft = np.exp(-2j * np.pi * np.outer(k, k) / n)
    power = np.abs(dft @ (gray - gray.mean()) @ dft.T) ** 2
    freq = np.where(k < n / 2, k, k - n) / n
    radius = np.sqrt(freq[:, None] ** 2 + freq[None, :] ** 2) / 0.5
    power[0, 0] = 0.0
    return power[radius > cutoff].sum() / power.sum()


class TestHighFrequencyRatio:
    """Tests for the spectral texture ratio."""

    def test_constant_image(self):
        assert hf_ratio(_solid([0.3, 0.6, 0.9])) == 0.0

    def test_checkerboard_is_all_high_frequency(self):
        assert hf_ratio(checkerboard(16)) == pytest.approx(1.0)

    def test_matches_dense_dft(self, rng):
        gray = rng.uniform(0, 1, size=(8, 8))
        for cutoff in (0.1, 0.25, 0.6):
            assert hf_ratio(gray, cutoff) == pytest.approx(_dense_hf_ratio(gray, cutoff))

    def test_blur_lowers_ratio(self, rng):
        noise = rng.uniform(0, 1, size=(32, 32))
        assert hf_ratio(gaussian_filter(noise, 1.5)) < hf_ratio(noise)

    def test_brightness_invariant(self, rng):
        image = rng.uniform(0.2, 0.8, size=(16, 16, 3))
        assert hf_ratio(image + 0.1) == pytest.approx(hf_ratio(image))

    @pytest.mark.parametrize("cutoff", [0.0, 1.0, -0.5])
    def test_cutoff_range(self, cutoff):
        with pytest.raises(ContractViolationError, match="cutoff"):
            hf_ratio(checkerboard(8), cutoff)

    def test_embroidery_has_more_texture_than_design(self):
        assert hf_ratio(synthetic_embroidery(0)) > hf_ratio(synthetic_design(0))


class TestHfrd:
    """Tests for the scaled ratio difference."""

    def test_identical(self):
        image = synthetic_embroidery(1)
        assert hfrd(image, image) == 0.0

    def test_symmetric(self):
        a, b = synthetic_embroidery(1), synthetic_design(2)
        assert hfrd(a, b) == pytest.approx(hfrd(b, a))

    def test_extremes(self):
        assert hfrd(checkerboard(16), _solid([0.5] * 3, 16)) == pytest.approx(100.0)


class TestHistogramLoss:
    """Tests for the per-channel histogram distance."""

    def test_identical_and_permuted(self, rng):
        image = quantize(rng.uniform(0, 1, size=(16, 16, 3)))
        shuffled = rng.permutation(image.reshape(-1, 3)).reshape(image.shape)
        assert histogram_loss(image, image) == 0.0
        assert histogram_loss(image, shuffled) == pytest.approx(0.0, abs=1e-12)

    def test_red_versus_blue(self):
        """Two disjoint channels and one shared channel give 200/3."""
        red, blue = _solid([1.0, 0.0, 0.0]), _solid([0.0, 0.0, 1.0])
        assert histogram_loss(red, blue) == pytest.approx(200 / 3)

    def test_bounded_and_symmetric(self, rng):
        for _ in range(5):
            a = rng.uniform(0, 1, size=(8, 8, 3))
            b = rng.uniform(0, 1, size=(8, 8, 3)) ** 3
            loss = histogram_loss(a, b)
            assert 0.0 <= loss <= 100.0
            assert loss == pytest.approx(histogram_loss(b, a))


class TestMetricRegistry:
    """Tests for optional metric backends."""

    def test_missing_backend_is_none(self):
        assert MetricRegistry()(LPIPS, generated=None, target=None) is None

    def test_registered_backend(self):
        registry = MetricRegistry()
        backend = MagicMock(return_value=0.5)
        registry.register(LPIPS, backend)
        assert registry.available(LPIPS)
        assert registry(LPIPS, generated=1, target=2) == 0.5
        backend.assert_called_once_with(generated=1, target=2)

    def test_unknown_metric(self):
        with pytest.raises(ContractViolationError, match="unknown external metric"):
            MetricRegistry().register("fid", MagicMock())


class TestBenchmark:
    """Tests for the benchmark grid and reports."""

    @pytest.fixture
    def grid(self):
        references = [("ref", synthetic_embroidery(0))]
        inputs = [("a.png", synthetic_design(1)), ("b.png", synthetic_design(2))]
        outputs = {"a.png": synthetic_embroidery(1), "b.png": synthetic_embroidery(2)}
        return references, inputs, outputs

    def test_image_mode_aggregates(self, grid):
        """Aggregates are the mean and population std over rows."""
        references, inputs, outputs = grid
        registry = MetricRegistry()
        lpips_backend = MagicMock(return_value=0.5)
        registry.register(LPIPS, lpips_backend)
        report = run_benchmark(
            references,
            inputs,
            ["a rose"],
            lambda cell: outputs[cell.input_id],
            registry=registry,
            progress=False,
        )
        expected = [hfrd(outputs[n], references[0][1]) for n, _ in inputs]
        mean, std, n = report.aggregates()[HFRD]
        assert n == 2
        assert mean == pytest.approx(np.mean(expected))
        assert std == pytest.approx(np.std(expected))
        assert report.aggregates()[LPIPS] == (0.5, 0.0, 2)
        assert lpips_backend.call_count == 2
        assert report.metrics == [HFRD, HISTOGRAM, LPIPS]
        assert report.metadata["mode"] == "image"

    def test_unavailable_metric_reports_na(self, grid, tmp_path):
        references, inputs, outputs = grid
        report = run_benchmark(
            references,
            inputs[:1],
            [],
            lambda cell: outputs[cell.input_id],
            registry=MetricRegistry(),
            progress=False,
        )
        assert report.formatted()[LPIPS] == NOT_AVAILABLE
        assert " ± " in report.formatted()[HFRD]
        lines = report.to_csv(tmp_path / "report.csv").read_text().splitlines()
        assert lines[0] == "reference,input,mode,status,hfrd,histogram_loss,lpips,error"
        assert lines[1].startswith("ref,a.png,image,ok,")
        assert ",n/a," in lines[1]
        markdown = report.to_markdown()
        assert "| lpips | n/a | 0 |" in markdown
        assert "full_scale_reference_hfrd" in markdown

    def test_failing_cell_is_kept(self, grid):
        """A failing pipeline call becomes a failed row."""
        references, inputs, outputs = grid

        def pipeline(cell):
            if cell.input_id == "b.png":
                raise BackendError("toy", "diverged")
            return outputs[cell.input_id]

        report = run_benchmark(
            references, inputs, [], pipeline, registry=MetricRegistry(), progress=False
        )
        assert report.failures == 1
        assert report.rows[1]["status"] == "failed"
        assert "diverged" in report.rows[1]["error"]
        assert report.aggregates()[HFRD][2] == 1

    def test_unexpected_exception_fails_only_its_cell(self, grid):
        """A non-package exception inside one cell does not abort the grid."""
        references, inputs, outputs = grid

        def pipeline(cell):
            if cell.input_id == "a.png":
                raise RuntimeError("shape mismatch in backend")
            return outputs[cell.input_id]

        report = run_benchmark(
            references, inputs, [], pipeline, registry=MetricRegistry(), progress=False
        )
        assert [row["status"] for row in report.rows] == ["failed", "ok"]
        assert report.rows[0]["error"] == "RuntimeError: shape mismatch in backend"
        assert report.aggregates()[HFRD][2] == 1

    def test_text_mode(self, grid):
        references, _, _ = grid
        registry = MetricRegistry()
        registry.register(CLIP_SCORE, MagicMock(return_value=30.0))
        report = run_benchmark(
            references,
            [],
            ["a dog", "a cat", "a fox"],
            lambda cell: synthetic_embroidery(5),
            "text",
            registry=registry,
            progress=False,
        )
        assert len(report.rows) == 3
        assert [row["input"] for row in report.rows] == ["a dog", "a cat", "a fox"]
        assert report.metrics == [CLIP_SCORE, HISTOGRAM]
        assert report.aggregates()[CLIP_SCORE] == (30.0, 0.0, 3)

    @pytest.mark.parametrize(
        "references, inputs, prompts, mode",
        [
            ([], [("a", None)], [], "image"),
            ([("r", None)], [], [], "image"),
            ([("r", None)], [], [], "text"),
            ([("r", None)], [], ["p"], "video"),
        ],
    )
    def test_empty_or_unknown_grid(self, references, inputs, prompts, mode):
        with pytest.raises(ContractViolationError):
            run_benchmark(references, inputs, prompts, MagicMock(), mode)


class TestEvaluateDirectories:
    """Tests for scoring images already on disk."""

    def test_image_mode_matches_names(self, tmp_path):
        save_rgb(synthetic_embroidery(0), tmp_path / "reference.png")
        for name, seed in (("x.png", 1), ("y.png", 2)):
            save_rgb(synthetic_design(seed), tmp_path / "inputs" / name)
        save_rgb(synthetic_embroidery(1), tmp_path / "generated" / "x.png")
        report = evaluate_directories(
            tmp_path / "generated",
            tmp_path / "reference.png",
            tmp_path / "inputs",
            registry=MetricRegistry(),
        )
        assert [row["input"] for row in report.rows] == ["x.png"]
        assert report.rows[0]["reference"] == "reference"

    def test_text_mode_needs_prompts(self, tmp_path):
        save_rgb(synthetic_embroidery(0), tmp_path / "reference.png")
        save_rgb(synthetic_embroidery(1), tmp_path / "generated" / "0.png")
        with pytest.raises(ContractViolationError, match="one prompt per image"):
            evaluate_directories(tmp_path / "generated", tmp_path / "reference.png")
        report = evaluate_directories(
            tmp_path / "generated",
            tmp_path / "reference.png",
            prompts=["a dog"],
            registry=MetricRegistry(),
        )
        assert report.rows[0]["input"] == "0.png"
        assert report.rows[0]["status"] == "ok"

    def test_text_mode_repeated_prompts(self, tmp_path):
        """Files sharing a prompt are each scored and named by file."""
        save_rgb(synthetic_embroidery(0), tmp_path / "reference.png")
        for name, seed in (("x.png", 1), ("y.png", 2), ("z.png", 3)):
            save_rgb(synthetic_embroidery(seed), tmp_path / "generated" / name)
        registry = MetricRegistry()
        clip_backend = MagicMock(return_value=30.0)
        registry.register(CLIP_SCORE, clip_backend)
        report = evaluate_directories(
            tmp_path / "generated",
            tmp_path / "reference.png",
            prompts=["a", "a", "b", "c"],
            registry=registry,
        )
        assert len(report.rows) == 3
        assert [row["input"] for row in report.rows] == ["x.png", "y.png", "z.png"]
        assert all(row["status"] == "ok" for row in report.rows)
        prompts = [c.kwargs["prompt"] for c in clip_backend.call_args_list]
        assert prompts == ["a", "a", "b"]
