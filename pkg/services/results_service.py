import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from models.dataset import DatasetManifest
from models.results import RunSummary
from storage.dataset_store import DatasetStore
from storage.paths import get_data_root, get_runs_root

logger = logging.getLogger("factored_agent.api")

REPORT_FILES = ("report.json", "grid.json", "subgoals.json", "expert_report.json")


class ResultsService:
    """Read-only access to the dataset and run directories for the API."""

    def __init__(self, data_root: Optional[Union[str, Path]] = None, runs_root: Optional[Union[str, Path]] = None):
        self.data_root = Path(data_root or get_data_root()).resolve()
        self.runs_root = Path(runs_root or get_runs_root()).resolve()
        self.store = DatasetStore(self.data_root)

    def _is_safe_path(self, path: Path, root: Path) -> bool:
        """True when ``path`` exists and resolves inside ``root``."""
        try:
            resolved = path.resolve()
            return resolved.exists() and resolved.is_relative_to(root)
        except (ValueError, OSError):
            logger.warning(f"Unsafe path access attempt: {path}")
            return False

    def get_manifest(self) -> Optional[DatasetManifest]:
        if not self.store.exists():
            return None
        return self.store.load_manifest()

    def get_episode(self, split: str, index: int) -> Optional[Dict[str, Any]]:
        meta_path, _ = self.store.episode_paths(split, index)
        if not self._is_safe_path(meta_path, self.data_root):
            return None
        return self.store.load_metadata(split, index)

    def _run_dir(self, name: str) -> Optional[Path]:
        run_dir = self.runs_root / name
        if not self._is_safe_path(run_dir, self.runs_root) or not run_dir.is_dir():
            return None
        return run_dir

    def list_runs(self) -> List[RunSummary]:
        if not self.runs_root.exists():
            return []
        runs = []
        for run_dir in sorted(p for p in self.runs_root.iterdir() if p.is_dir()):
            command = None
            config_path = run_dir / "config.json"
            if config_path.exists():
                try:
                    command = json.loads(config_path.read_text()).get("command")
                except json.JSONDecodeError:
                    logger.warning(f"Unreadable config in run {run_dir.name}")
            runs.append(RunSummary(
                name=run_dir.name,
                command=command,
                has_report=(run_dir / "report.json").exists(),
                has_grid=(run_dir / "grid.json").exists(),
                has_checkpoint=(run_dir / "model.ckpt").exists(),
            ))
        return runs

    def get_report(self, name: str) -> Optional[Dict[str, Any]]:
        """All report files of a run keyed by file stem; None when the run has none."""
        run_dir = self._run_dir(name)
        if run_dir is None:
            return None
        found = {}
        for filename in REPORT_FILES:
            path = run_dir / filename
            if path.exists():
                found[path.stem] = json.loads(path.read_text())
        return found or None
