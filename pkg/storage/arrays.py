"""
Portable dense-array container.

A container is a zip archive with a ``header.json`` member and one ``.npy``
member per array. Member order and timestamps are fixed so identical content
always produces identical bytes (np.savez stamps the current time).
"""

import io
import json
import logging
import os
import zipfile
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

logger = logging.getLogger("factored_agent.storage")

HEADER_MEMBER = "header.json"
_FIXED_TIME = (1980, 1, 1, 0, 0, 0)

PathLike = Union[str, Path]


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_FIXED_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_arrays(path: PathLike, arrays: Dict[str, np.ndarray], header: Dict[str, Any]) -> None:
    """Write arrays plus a JSON header; the file is replaced atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp_path, "w") as archive:
        archive.writestr(_member(HEADER_MEMBER), json.dumps(header, sort_keys=True, indent=2))
        for name in sorted(arrays):
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            archive.writestr(_member(f"{name}.npy"), buffer.getvalue())
    os.replace(tmp_path, path)
    logger.debug(f"Wrote {len(arrays)} arrays to {path}")


def read_arrays(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"array container not found: {path}")
    arrays = {}
    with zipfile.ZipFile(path, "r") as archive:
        header = json.loads(archive.read(HEADER_MEMBER))
        for name in archive.namelist():
            if name == HEADER_MEMBER:
                continue
            with archive.open(name) as member:
                arrays[name[: -len(".npy")]] = np.lib.format.read_array(
                    io.BytesIO(member.read()), allow_pickle=False
                )
    return header, arrays


def read_header(path: PathLike) -> Dict[str, Any]:
    with zipfile.ZipFile(path, "r") as archive:
        return json.loads(archive.read(HEADER_MEMBER))


def rle_encode(mask: np.ndarray) -> Dict[str, List[int]]:
    """Run-length encode a boolean mask in row-major order, starting with a False run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    counts = []
    current = False
    run = 0
    for value in flat:
        if value == current:
            run += 1
        else:
            counts.append(run)
            current = bool(value)
            run = 1
    counts.append(run)
    return {"shape": [int(s) for s in np.shape(mask)], "counts": counts}


def rle_decode(encoded: Dict[str, List[int]]) -> np.ndarray:
    shape = tuple(encoded["shape"])
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    position = 0
    value = False
    for run in encoded["counts"]:
        if value:
            flat[position:position + run] = True
        position += run
        value = not value
    if position != flat.size:
        raise ValueError(f"run lengths cover {position} pixels, expected {flat.size}")
    return flat.reshape(shape)
