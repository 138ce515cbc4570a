"""
Run Directory Module.

Every CLI invocation owns one run directory under the run root. The
directory holds the resolved config snapshot, an append-only ``events.log``,
the artifacts the subcommand produced and a ``manifest.yaml`` listing them.
"""

import logging
import os
from datetime import datetime
from pathlib import Path
from types import TracebackType
from typing import Any, Dict, Optional, Type, Union

from omegaconf import OmegaConf

from embroidery_lora import DEFAULT_RUN_ROOT, RUN_ROOT_ENV, __version__
from embroidery_lora.config import ExperimentConfig, save_config
from embroidery_lora.errors import ContractViolationError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
CONFIG_FILE = "config.yaml"
EVENTS_FILE = "events.log"
MANIFEST_FILE = "manifest.yaml"


def run_root(override: Optional[Union[str, Path]] = None) -> Path:
    """``override``, else ``$EMBROIDERY_LORA_RUN_ROOT``, else ``./runs``."""
    return Path(override or os.environ.get(RUN_ROOT_ENV) or DEFAULT_RUN_ROOT)


class RunRecord:
    """
    One run directory.

    Use as a context manager: the manifest is written on exit, with status
    ``failed`` when the block raised. A successful close verifies that every
    registered artifact exists.
    """

    def __init__(
        self,
        command: str,
        config: ExperimentConfig,
        root: Optional[Union[str, Path]] = None,
        run_id: Optional[str] = None,
    ) -> None:
        self.command = command
        self.config = config
        self.root = run_root(root)
        self.created = datetime.now()
        self.run_id = run_id or self._fresh_id()
        self.directory = self.root / self.run_id
        self.artifacts: Dict[str, Path] = {}
        self.details: Dict[str, Any] = {}
        self._handler: Optional[logging.Handler] = None
        self.closed = False

    def _fresh_id(self) -> str:
        base = f"{self.created:%Y%m%d-%H%M%S}-{self.command}"
        run_id, n = base, 1
        while (self.root / run_id).exists():
            run_id = f"{base}-{n}"
            n += 1
        return run_id

    def open(self) -> "RunRecord":
        self.directory.mkdir(parents=True, exist_ok=True)
        save_config(self.config, self.directory / CONFIG_FILE)
        handler = logging.FileHandler(
            self.directory / EVENTS_FILE, mode="a", encoding="utf-8"
        )
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(handler)
        self._handler = handler
        logger.info("Run %s started in %s", self.run_id, self.directory)
        return self

    @property
    def config_path(self) -> Path:
        return self.directory / CONFIG_FILE

    def path(self, *parts: str) -> Path:
        """A path inside the run directory; parent directories are created."""
        target = self.directory.joinpath(*parts)
        self._check_inside(target)
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def _check_inside(self, path: Path) -> None:
        try:
            path.resolve().relative_to(self.directory.resolve())
        except ValueError:
            raise ContractViolationError(
                f"{path} lies outside the run directory {self.directory}"
            ) from None

    def add_artifact(self, name: str, path: Union[str, Path]) -> Path:
        path = Path(path)
        self._check_inside(path)
        self.artifacts[name] = path
        return path

    def add_artifacts(self, artifacts: Dict[str, Path], prefix: str = "") -> None:
        for name, path in artifacts.items():
            self.add_artifact(f"{prefix}{name}", path)

    def close(self, status: str = "ok", error: str = "") -> Path:
        """
        Write ``manifest.yaml`` and detach the event log.

        Raises:
            ContractViolationError: If a successful run lists an artifact
                that is not on disk
        """
        try:
            missing = sorted(n for n, p in self.artifacts.items() if not p.exists())
            verify = status == "ok"
            if missing and verify:
                status, error = "failed", f"missing artifacts: {', '.join(missing)}"
            manifest = {
                "run_id": self.run_id,
                "command": self.command,
                "status": status,
                "version": __version__,
                "created": self.created.isoformat(timespec="seconds"),
                "seed": self.config.seed,
                "config": CONFIG_FILE,
                "events": EVENTS_FILE,
                "artifacts": {
                    name: os.path.relpath(path.resolve(), self.directory.resolve())
                    for name, path in sorted(self.artifacts.items())
                },
                "details": dict(self.details),
            }
            if error:
                manifest["error"] = error
            path = self.directory / MANIFEST_FILE
            OmegaConf.save(OmegaConf.create(manifest), path)
            logger.info("Run %s closed with status %s", self.run_id, status)
            if missing and verify:
                raise ContractViolationError(
                    f"run {self.run_id} lists missing artifacts: {', '.join(missing)}"
                )
            return path
        finally:
            self.closed = True
            if self._handler is not None:
                logging.getLogger().removeHandler(self._handler)
                self._handler.close()
                self._handler = None

    def __enter__(self) -> "RunRecord":
        return self.open()

    def __exit__(
        self,
        exc_type: Optional[Type[BaseException]],
        exc: Optional[BaseException],
        tb: Optional[TracebackType],
    ) -> None:
        if self.closed:
            return
        if exc is None:
            self.close()
        else:
            message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            self.close("failed", message)
