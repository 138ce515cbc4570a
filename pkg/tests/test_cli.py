"""
Test module for the command-line interface.

Each test drives ``main`` with a temporary run root and a shortened
schedule, then inspects the run directory it prints.
"""

from pathlib import Path

import pytest
from omegaconf import OmegaConf

from embroidery_lora.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from embroidery_lora.fixtures import synthetic_design, synthetic_embroidery
from embroidery_lora.images import load_rgb, save_rgb
from embroidery_lora.runs import MANIFEST_FILE

FAST = [
    "--set",
    "backbone.steps=10",
    "--set",
    "analysis.renoise_iters=1",
    "--set",
    "training.stage1_iters=2",
    "--set",
    "training.stage2_iters=1",
    "--set",
    "training.checkpoint_every=1",
]


def _run(root, command, *extra, run_id=None):
    argv = [command, "--run-root", str(root), "--log-level", "WARNING"]
    argv += ["--config", "smoke", *FAST]
    if run_id:
        argv += ["--run-id", run_id]
    return main(argv + list(extra))


def _manifest(directory):
    return OmegaConf.to_container(OmegaConf.load(Path(directory) / MANIFEST_FILE))


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    """One trained run shared by the gen and eval tests."""
    root = tmp_path_factory.mktemp("runs")
    code = _run(root, "train", "--set", "training.N=10", run_id="trained")
    assert code == EXIT_OK
    return root / "trained"


class TestParser:
    """Tests for argument handling and exit codes."""

    def test_subcommand_required(self):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        """An unknown --set key exits with a usage error naming valid keys."""
        code = _run(tmp_path, "analyze", "--set", "training.bogus=1")
        assert code == EXIT_USAGE
        err = capsys.readouterr().err
        assert "embroidery-lora analyze: error:" in err
        assert "valid keys" in err

    def test_missing_input(self, tmp_path, capsys):
        code = _run(tmp_path, "pairgen", "--input", str(tmp_path / "absent.png"))
        assert code == EXIT_USAGE
        assert "--input not found" in capsys.readouterr().err

    def test_absolute_output_path(self, tmp_path, train_run):
        code = _run(
            tmp_path, "gen", "--adapter", str(train_run), "--prompt", "a cat",
            "--out", str(tmp_path / "x.png"),
        )
        assert code == EXIT_USAGE

    def test_runtime_failure(self, tmp_path, capsys):
        """A failing subcommand exits 1 and marks the run failed."""
        code = _run(
            tmp_path, "pairgen", "--set", "pairgen.pair_mode=artwork", run_id="bad"
        )
        assert code == EXIT_FAILURE
        assert "artwork" in capsys.readouterr().err
        assert _manifest(tmp_path / "bad")["status"] == "failed"


class TestPairgen:
    """Tests for the pairgen subcommand."""

    def test_fixtures(self, tmp_path, capsys):
        code = _run(tmp_path, "pairgen", "--fixtures", "2", run_id="pairs")
        assert code == EXIT_OK
        out = capsys.readouterr().out.strip()
        assert Path(out) == tmp_path / "pairs"
        for name in ("fixture_00", "fixture_01"):
            pair_dir = tmp_path / "pairs" / "pairs" / name
            assert (pair_dir / "style.png").exists()
            assert (pair_dir / "content.png").exists()
        manifest = _manifest(tmp_path / "pairs")
        assert manifest["status"] == "ok"
        assert "pairs/fixture_00/manifest" in manifest["artifacts"]

    def test_input_with_caption(self, tmp_path):
        save_rgb(synthetic_embroidery(9), tmp_path / "in" / "rose.png")
        code = _run(
            tmp_path, "pairgen", "--input", str(tmp_path / "in"),
            "--caption", "red rose", run_id="one",
        )
        assert code == EXIT_OK
        pair = OmegaConf.load(tmp_path / "one" / "pairs" / "rose" / "pair.yaml")
        assert pair.prompt_style == "a red rose in [emb] style"


class TestAnalyze:
    """Tests for the analyze subcommand."""

    def test_outputs_and_determinism(self, tmp_path):
        """Two runs with the same seed write byte-identical similarity files."""
        assert _run(tmp_path, "analyze", "--seed", "3", run_id="a") == EXIT_OK
        assert _run(tmp_path, "analyze", "--seed", "3", run_id="b") == EXIT_OK
        for name in ("similarity.csv", "heatmap.png", "blocks.yaml", "config.yaml"):
            assert (tmp_path / "a" / name).exists()
        first = (tmp_path / "a" / "similarity.csv").read_bytes()
        assert first == (tmp_path / "b" / "similarity.csv").read_bytes()
        blocks = OmegaConf.load(tmp_path / "a" / "blocks.yaml")
        assert len(blocks.style_blocks) == 4
        assert _manifest(tmp_path / "a")["details"]["style_blocks"] == list(
            blocks.style_blocks
        )

    def test_pairs_from_pairgen(self, tmp_path):
        assert _run(tmp_path, "pairgen", "--fixtures", "2", run_id="p") == EXIT_OK
        code = _run(
            tmp_path, "analyze", "--pairs", str(tmp_path / "p" / "pairs"), run_id="a"
        )
        assert code == EXIT_OK
        assert (tmp_path / "a" / "similarity" / "fixture_01.csv").exists()
        blocks = OmegaConf.load(tmp_path / "a" / "blocks.yaml")
        assert list(blocks.pairs) == ["fixture_00", "fixture_01"]


class TestTrain:
    """Tests for the train subcommand."""

    def test_artifacts(self, train_run):
        """The run holds the adapter, curves, checkpoints and the reference pair."""
        for name in (
            "adapter.safetensors",
            "adapter.manifest.yaml",
            "losses_stage1.csv",
            "losses_stage2.csv",
            "reference/pair.yaml",
            "checkpoints/stage1_0002.safetensors",
        ):
            assert (train_run / name).exists(), name
        manifest = _manifest(train_run)
        assert manifest["status"] == "ok"
        assert manifest["details"]["complementary"] == {"style_selected": 5, "final": 3}

    def test_pairgen_then_train_is_deterministic(self, tmp_path):
        """Two seeded pairgen and train chains write byte-identical adapters."""
        for run in ("a", "b"):
            code = _run(tmp_path, "pairgen", "--seed", "5", run_id=f"pairs_{run}")
            assert code == EXIT_OK
            code = _run(
                tmp_path, "train", "--seed", "5",
                "--pair", str(tmp_path / f"pairs_{run}" / "pairs"),
                run_id=f"train_{run}",
            )
            assert code == EXIT_OK
        for name in ("adapter.safetensors", "losses_stage1.csv", "losses_stage2.csv"):
            first = (tmp_path / "train_a" / name).read_bytes()
            assert first == (tmp_path / "train_b" / name).read_bytes(), name

    def test_complementary_selection(self, train_run):
        data = OmegaConf.load(train_run / "complementary" / "complementary.yaml")
        assert data.N == 10
        assert len(data.style_selected) == 5
        assert len(data.final) == 3
        assert set(data.final) <= set(data.style_selected)


class TestGen:
    """Tests for the gen subcommand."""

    def test_text_mode(self, tmp_path, train_run):
        code = _run(
            tmp_path, "gen", "--adapter", str(train_run), "--mode", "text",
            "--prompt", "a blue whale", "--size", "32", run_id="g",
        )
        assert code == EXIT_OK
        image = load_rgb(tmp_path / "g" / "generated.png")
        assert image.shape == (32, 32, 3)
        meta = OmegaConf.load(tmp_path / "g" / "generated.yaml")
        assert meta.effective_prompt == "a blue whale in [emb] style"

    def test_image_mode_loose(self, tmp_path, train_run):
        save_rgb(synthetic_design(4), tmp_path / "design.png")
        code = _run(
            tmp_path, "gen", "--adapter", str(train_run / "adapter.safetensors"),
            "--mode", "image", "--input", str(tmp_path / "design.png"),
            "--loose-boundary", "--strength", "0.5", "--out", "out/styled.png",
            run_id="g",
        )
        assert code == EXIT_OK
        meta = OmegaConf.load(tmp_path / "g" / "out" / "styled.yaml")
        assert list(meta.controls) == ["tile"]
        assert meta.noising_steps == 5

    def test_text_mode_needs_prompt(self, tmp_path, train_run):
        code = _run(tmp_path, "gen", "--adapter", str(train_run), "--mode", "text")
        assert code == EXIT_USAGE


class TestEval:
    """Tests for the eval subcommand."""

    def test_trained_run(self, tmp_path, train_run):
        code = _run(
            tmp_path, "eval", "--run", str(train_run), "--fixtures", "2", run_id="e"
        )
        assert code == EXIT_OK
        lines = (tmp_path / "e" / "report.csv").read_text().splitlines()
        assert lines[0].startswith("reference,input,mode,status,hfrd")
        assert len(lines) == 3
        details = _manifest(tmp_path / "e")["details"]
        assert details["failures"] == 0
        assert details["aggregates"]["lpips"] == "n/a"
        assert "hfrd" in (tmp_path / "e" / "report.md").read_text()

    def test_generated_directory(self, tmp_path):
        save_rgb(synthetic_embroidery(0), tmp_path / "ref.png")
        save_rgb(synthetic_embroidery(1), tmp_path / "gen" / "a.png")
        save_rgb(synthetic_design(1), tmp_path / "inputs" / "a.png")
        code = _run(
            tmp_path, "eval", "--generated", str(tmp_path / "gen"),
            "--reference", str(tmp_path / "ref.png"),
            "--inputs", str(tmp_path / "inputs"), run_id="e",
        )
        assert code == EXIT_OK
        assert (tmp_path / "e" / "report.md").exists()
