"""
Line-delimited JSON episode logs: one record per rollout step.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import numpy as np


def _default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_record(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, default=_default)


def write_episode_log(path: Union[str, Path], records: Iterable[Dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(dumps_record(record) + "\n")


def read_episode_log(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
