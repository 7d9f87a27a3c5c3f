"""
Locations of the dataset root and the runs root.
"""

import logging
import os
from pathlib import Path

from dotenv import load_dotenv

logger = logging.getLogger("factored_agent.storage")

load_dotenv()

DATA_ROOT_ENV = "FACTORED_AGENT_DATA_ROOT"
RUNS_ROOT_ENV = "FACTORED_AGENT_RUNS_ROOT"


def _resolve(env_var: str, test_name: str, default: str) -> Path:
    # Priority order:
    # 1. Explicit environment variable
    # 2. For testing environments, a local test_data directory
    # 3. Default directory under the working directory
    if os.environ.get(env_var):
        return Path(os.environ[env_var])

    if os.environ.get("CI") or os.environ.get("PYTEST_CURRENT_TEST"):
        test_dir = Path(os.getcwd()) / "test_data" / test_name
        test_dir.mkdir(parents=True, exist_ok=True)
        return test_dir

    return Path(os.getcwd()) / default


def get_data_root() -> Path:
    """Default dataset directory used when --data is not given."""
    path = _resolve(DATA_ROOT_ENV, "data", "data")
    logger.debug(f"Data root resolved to {path}")
    return path


def get_runs_root() -> Path:
    """Directory holding training, evaluation and ablation runs."""
    path = _resolve(RUNS_ROOT_ENV, "runs", "runs")
    logger.debug(f"Runs root resolved to {path}")
    return path
