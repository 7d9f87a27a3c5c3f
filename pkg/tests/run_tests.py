#!/usr/bin/env python3
"""
Test runner for the factored agent.
Runs pytest over the selected test directories.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import pytest

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger("factored_agent.tests")

# Get project root directory
PROJECT_ROOT = Path(__file__).parent.parent.absolute()

# Add project root to Python path
sys.path.insert(0, str(PROJECT_ROOT))

TEST_TYPES = {
    "unit": PROJECT_ROOT / "tests" / "unit",
    "integration": PROJECT_ROOT / "tests" / "integration",
}


def run_tests(test_types: Optional[List[str]] = None, slow: bool = False, coverage: bool = False) -> int:
    """
    Run the selected test directories.

    Args:
        test_types: Subset of "unit" and "integration". If None, all tests are run.
        slow: Also run the learning tests (sets RUN_SLOW_TESTS=1).
        coverage: Report coverage of the project packages.

    Returns:
        int: pytest's exit code
    """
    test_types = test_types or list(TEST_TYPES)
    logger.info(f"Running test types: {', '.join(test_types)}")

    args = []
    for test_type in test_types:
        directory = TEST_TYPES[test_type]
        if directory.exists():
            args.append(str(directory))
        else:
            logger.warning(f"Test directory not found: {directory}")

    if slow:
        os.environ["RUN_SLOW_TESTS"] = "1"
    if coverage:
        args += [f"--cov={pkg}" for pkg in ("agent", "services", "storage", "models", "api")]
        args += ["--cov-report=term-missing"]
    args.append("-v")

    os.chdir(PROJECT_ROOT)
    return int(pytest.main(args))


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run tests for the factored agent")
    parser.add_argument(
        "--types",
        type=str,
        nargs="*",
        choices=["unit", "integration", "all"],
        default=["all"],
        help="Types of tests to run"
    )
    parser.add_argument("--slow", action="store_true", help="Include the learning tests")
    parser.add_argument("--coverage", action="store_true", help="Report coverage")

    args = parser.parse_args()
    test_types = None if "all" in args.types else args.types
    sys.exit(run_tests(test_types, args.slow, args.coverage))
