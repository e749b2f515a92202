"""
Experiment Runner - run directories for every CLI subcommand

Each run owns one output directory holding:
- config.resolved.json  (the RunConfig; enough to reproduce the run)
- experiment.log        (the run's log)
- results.json / summary.txt / metadata.json  (written by finish())
"""

import json
import logging
import os
import sys
from datetime import datetime
from typing import Any, Dict, Iterable, Optional

import pandas as pd

from .config import RunConfig, log_level_from_env
from .errors import GVSError
from .experiment_visualizer import ExperimentVisualizer

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

logger = logging.getLogger(__name__)


def configure_logging(log_file: Optional[str] = None) -> None:
    """Console logging, plus a file handler when a run directory exists."""
    handlers: list = [logging.StreamHandler()]
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(level=log_level_from_env(), format=LOG_FORMAT, handlers=handlers, force=True)


def _json_default(value: Any) -> Any:
    if hasattr(value, "model_dump"):
        return value.model_dump(mode="json")
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


class ExperimentRunner:
    """
    Owns the output directory of one subcommand invocation.

    Features:
    - Self-contained run directories under --out
    - Resolved configuration with content hash
    - JSON/CSV result helpers and a human-readable summary
    """

    def __init__(
        self,
        subcommand: str,
        out_dir: str,
        arguments: Optional[Dict[str, Any]] = None,
        configs: Optional[Dict[str, Any]] = None,
        seed: int = 0,
        visualizer: Optional[ExperimentVisualizer] = None,
    ):
        self.run_config = RunConfig(
            subcommand=subcommand,
            seed=seed,
            out_dir=out_dir,
            arguments=json.loads(json.dumps(arguments or {}, default=_json_default)),
            configs={
                name: (cfg.model_dump(mode="json") if hasattr(cfg, "model_dump") else dict(cfg))
                for name, cfg in (configs or {}).items()
            },
        )
        self.out_dir = out_dir
        self.visualizer = visualizer or ExperimentVisualizer()
        self.started = datetime.now()
        self.results_file = os.path.join(out_dir, "results.json")
        self.summary_file = os.path.join(out_dir, "summary.txt")
        self.metadata_file = os.path.join(out_dir, "metadata.json")

    @property
    def config_hash(self) -> str:
        return self.run_config.config_hash

    def path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    def setup(self) -> "ExperimentRunner":
        os.makedirs(self.out_dir, exist_ok=True)
        configure_logging(self.path("experiment.log"))
        self.save_json("config.resolved.json", self.run_config.model_dump(mode="json"))
        logger.info(f"🚀 {self.run_config.subcommand} -> {self.out_dir} (config {self.config_hash[:12]})")
        return self

    def save_json(self, name: str, data: Any) -> str:
        path = self.path(name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w") as f:
            json.dump(data, f, indent=2, default=_json_default)
        return path

    def save_frame(self, name: str, frame: pd.DataFrame) -> str:
        path = self.path(name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        frame.to_csv(path, index=False)
        return path

    def write_summary(self, headline: str, lines: Iterable[str]) -> str:
        with open(self.summary_file, "w") as f:
            f.write(f"{headline}\n{'=' * len(headline)}\n\n")
            f.write(f"Subcommand: {self.run_config.subcommand}\n")
            f.write(f"Config hash: {self.config_hash}\n")
            f.write(f"Started: {self.started.isoformat()}\n\n")
            for line in lines:
                f.write(f"{line}\n")
        return self.summary_file

    def finish(self, results: Dict[str, Any]) -> str:
        metadata = {
            "subcommand": self.run_config.subcommand,
            "out_dir": self.out_dir,
            "config_hash": self.config_hash,
            "started": self.started.isoformat(),
            "finished": datetime.now().isoformat(),
        }
        self.save_json("results.json", {"metadata": metadata, "results": results})
        self.save_json("metadata.json", metadata)
        logger.info(f"💾 Results saved:")
        logger.info(f"   📄 Detailed results: {self.results_file}")
        logger.info(f"   📄 Metadata: {self.metadata_file}")
        self.visualizer.show_status(f"{self.run_config.subcommand} finished: {self.results_file}")
        return self.results_file


def error_payload(error: BaseException) -> Dict[str, Any]:
    if isinstance(error, GVSError):
        return error.to_dict()
    return {"error": "InternalError", "message": str(error), "type": type(error).__name__}


def write_error(error: BaseException, stream=None) -> int:
    """Emit the machine-readable error JSON and return the process exit code."""
    stream = stream or sys.stderr
    stream.write(json.dumps(error_payload(error), default=_json_default) + "\n")
    return 2 if isinstance(error, GVSError) else 1
