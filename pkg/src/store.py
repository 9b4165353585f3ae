"""
Run Store
Single writer for every artifact of a run directory.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import pandas as pd

from config import RUNTIME_ONLY, ExperimentConfig


logger = logging.getLogger(__name__)


class RunStore:
    """Artifacts of one configuration, under <runs_dir>/<run id>."""

    def __init__(self, config: ExperimentConfig, root: Union[str, Path, None] = None):
        """
        Create the run directory and record the configuration in it.

        Args:
            config: Experiment configuration; its hash names the directory
            root: Parent directory, defaults to config.runs_dir
        """
        self.config = config
        self.run_dir = Path(root if root is not None else config.runs_dir) / config.run_id
        self.run_dir.mkdir(parents=True, exist_ok=True)
        doc = {k: v for k, v in config.to_dict().items() if k not in RUNTIME_ONLY}
        self.write_json("config.json", doc)

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def write_json(self, name: str, doc: Any) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        logger.debug("wrote %s", target)
        return target

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(target, index=False, float_format="%.10g")
        logger.debug("wrote %s", target)
        return target

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w") as f:
            f.write(text)
        return target

    def read_json(self, name: str) -> Dict:
        target = self.path(name)
        if not target.exists():
            raise FileNotFoundError(f"Run artifact not found: {target}")
        with open(target, "r") as f:
            return json.load(f)
