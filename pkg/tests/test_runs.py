"""
Test module for run directories and their manifests.
"""

import logging
import os
from unittest.mock import patch

import pytest
from omegaconf import OmegaConf

from embroidery_lora import RUN_ROOT_ENV
from embroidery_lora.config import load_config
from embroidery_lora.errors import ContractViolationError
from embroidery_lora.runs import (
    CONFIG_FILE,
    EVENTS_FILE,
    MANIFEST_FILE,
    RunRecord,
    run_root,
)


def _manifest(run):
    return OmegaConf.to_container(OmegaConf.load(run.directory / MANIFEST_FILE))


@pytest.fixture
def config():
    return load_config("toy")


class TestRunRoot:
    """Tests for locating the run root."""

    def test_override_wins(self, tmp_path):
        with patch.dict(os.environ, {RUN_ROOT_ENV: "/elsewhere"}):
            assert run_root(tmp_path) == tmp_path

    def test_environment(self, tmp_path):
        with patch.dict(os.environ, {RUN_ROOT_ENV: str(tmp_path)}):
            assert run_root() == tmp_path

    def test_default(self):
        with patch.dict(os.environ, {RUN_ROOT_ENV: ""}):
            assert str(run_root()) == "runs"


class TestRunRecord:
    """Tests for the run directory lifecycle."""

    def test_successful_run(self, tmp_path, config):
        """A run writes its config, event log and artifact manifest."""
        with RunRecord("analyze", config, tmp_path, "r1") as run:
            logging.getLogger("embroidery_lora.test").warning("hello from the run")
            out = run.path("similarity", "sim.csv")
            out.write_text("block\n")
            run.add_artifact("similarity", out)
            run.details["style_blocks"] = ["mid"]
        assert (run.directory / CONFIG_FILE).exists()
        assert "hello from the run" in (run.directory / EVENTS_FILE).read_text()
        manifest = _manifest(run)
        assert manifest["status"] == "ok"
        assert manifest["command"] == "analyze"
        assert manifest["artifacts"] == {"similarity": "similarity/sim.csv"}
        assert manifest["details"] == {"style_blocks": ["mid"]}
        assert manifest["seed"] == config.seed

    def test_fresh_ids_do_not_collide(self, tmp_path, config):
        first = RunRecord("gen", config, tmp_path)
        first.open()
        first.close()
        second = RunRecord("gen", config, tmp_path)
        assert second.run_id != first.run_id
        assert second.run_id.startswith(f"{second.created:%Y%m%d}")

    def test_missing_artifact_fails_verification(self, tmp_path, config):
        run = RunRecord("train", config, tmp_path, "r2").open()
        run.add_artifact("adapter", run.directory / "adapter.safetensors")
        with pytest.raises(ContractViolationError, match="adapter"):
            run.close()
        manifest = _manifest(run)
        assert manifest["status"] == "failed"
        assert "missing artifacts" in manifest["error"]

    def test_artifact_outside_run(self, tmp_path, config):
        with RunRecord("eval", config, tmp_path, "r3") as run:
            with pytest.raises(ContractViolationError, match="outside"):
                run.add_artifact("report", tmp_path / "report.csv")
            with pytest.raises(ContractViolationError, match="outside"):
                run.path("..", "escape.txt")

    def test_exception_marks_run_failed(self, tmp_path, config):
        """An exception inside the block is recorded, not masked."""
        with pytest.raises(RuntimeError):
            with RunRecord("train", config, tmp_path, "r4") as run:
                run.add_artifact("adapter", run.directory / "never-written")
                raise RuntimeError("stage 1 diverged\nmore detail")
        manifest = _manifest(run)
        assert manifest["status"] == "failed"
        assert manifest["error"] == "stage 1 diverged"

    def test_log_handler_detached(self, tmp_path, config):
        root = logging.getLogger()
        before = list(root.handlers)
        with RunRecord("eval", config, tmp_path, "r5"):
            assert len(root.handlers) == len(before) + 1
        assert root.handlers == before
