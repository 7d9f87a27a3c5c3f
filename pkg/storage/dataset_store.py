"""
Dataset directory: manifest, vocabulary, channel manifest and one metadata
JSON plus one observation container per episode.
"""

import fcntl
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import numpy as np

from models.dataset import DatasetManifest, EpisodeRecord, InstructionPair, Subgoal, Trajectory
from models.world import ActionTag, AgentPose, ChannelManifest, GoalSpec, Layout
from storage.arrays import read_arrays, rle_decode, rle_encode, write_arrays

logger = logging.getLogger("factored_agent.storage")

MANIFEST_FILE = "manifest.json"
VOCAB_FILE = "vocab.json"
CHANNELS_FILE = "channels.json"


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _dump_json(path: Path, payload: Any) -> None:
    """Write JSON under an exclusive lock so only one writer touches a file at a time."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            json.dump(payload, f, sort_keys=True, indent=2)
            f.write("\n")
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def _load_json(path: Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        fcntl.flock(f, fcntl.LOCK_SH)
        try:
            return json.load(f)
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def trajectory_metadata(trajectory: Trajectory, index: int) -> Dict[str, Any]:
    """Everything about an episode except the observation raster."""
    language = trajectory.language
    return {
        "episode_id": trajectory.episode_id,
        "split": trajectory.split,
        "index": index,
        "layout": trajectory.layout.model_dump(mode="json"),
        "goal": trajectory.goal.model_dump(mode="json"),
        "start": trajectory.start.model_dump(mode="json"),
        "language": None if language is None else {
            "goal": list(language.goal),
            "instructions": [list(s) for s in language.instructions],
        },
        "actions": [tag.value for tag in trajectory.actions],
        "classes": list(trajectory.classes),
        "masks": [None if m is None else rle_encode(m) for m in trajectory.masks],
        "instance_ids": list(trajectory.instance_ids),
        "subgoals": [sg.model_dump(mode="json") for sg in trajectory.subgoals],
    }


class DatasetStore:
    """Reads and writes one dataset directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def episode_paths(self, split: str, index: int):
        stem = self.root / split / f"ep_{index:04d}"
        return stem.with_suffix(".json"), stem.with_suffix(".npz")

    def exists(self) -> bool:
        return (self.root / MANIFEST_FILE).exists()

    # ----------------------------------------------------------------- writing
    def write_episode(self, trajectory: Trajectory, index: int) -> EpisodeRecord:
        meta_path, obs_path = self.episode_paths(trajectory.split, index)
        _dump_json(meta_path, trajectory_metadata(trajectory, index))
        observations = np.round(np.clip(trajectory.observations, 0.0, 1.0) * 255.0).astype(np.uint8)
        write_arrays(obs_path, {"observations": observations},
                     {"episode_id": trajectory.episode_id, "dtype": "uint8", "scale": 255})
        digest = hashlib.sha256()
        digest.update(meta_path.read_bytes())
        digest.update(obs_path.read_bytes())
        return EpisodeRecord(
            episode_id=trajectory.episode_id,
            split=trajectory.split,
            index=index,
            layout_seed=trajectory.layout.seed,
            arrangement_id=trajectory.layout.arrangement_id,
            task_type=trajectory.goal.task_type.value,
            n_steps=len(trajectory),
            metadata_file=str(meta_path.relative_to(self.root)),
            observations_file=str(obs_path.relative_to(self.root)),
            sha256=digest.hexdigest(),
        )

    def write_manifest(self, manifest: DatasetManifest) -> None:
        _dump_json(self.root / MANIFEST_FILE, manifest.model_dump(mode="json"))
        logger.info(f"Manifest written to {self.root / MANIFEST_FILE}")

    def write_vocab(self, tokens: List[str]) -> None:
        _dump_json(self.root / VOCAB_FILE, {"tokens": tokens, "ids": {t: i for i, t in enumerate(tokens)}})

    def write_channels(self, channels: ChannelManifest) -> None:
        _dump_json(self.root / CHANNELS_FILE, channels.to_dict())

    # ----------------------------------------------------------------- reading
    def load_manifest(self) -> DatasetManifest:
        path = self.root / MANIFEST_FILE
        if not path.exists():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        return DatasetManifest.model_validate(_load_json(path))

    def manifest_hash(self) -> str:
        return file_sha256(self.root / MANIFEST_FILE)

    def load_vocab(self) -> List[str]:
        return list(_load_json(self.root / VOCAB_FILE)["tokens"])

    def load_channels(self) -> Dict[str, Any]:
        return _load_json(self.root / CHANNELS_FILE)

    def load_metadata(self, split: str, index: int) -> Dict[str, Any]:
        meta_path, _ = self.episode_paths(split, index)
        if not meta_path.exists():
            raise FileNotFoundError(f"episode {split}/{index} not found under {self.root}")
        return _load_json(meta_path)

    def load_episode(self, split: str, index: int, with_observations: bool = True) -> Trajectory:
        meta = self.load_metadata(split, index)
        observations = np.zeros((0,), dtype=np.float32)
        if with_observations:
            _, obs_path = self.episode_paths(split, index)
            _, arrays = read_arrays(obs_path)
            observations = arrays["observations"].astype(np.float32) / 255.0
        language = None
        if meta["language"] is not None:
            language = InstructionPair(
                goal=tuple(meta["language"]["goal"]),
                instructions=tuple(tuple(s) for s in meta["language"]["instructions"]),
            )
        return Trajectory(
            observations=observations,
            actions=[ActionTag(a) for a in meta["actions"]],
            classes=list(meta["classes"]),
            masks=[None if m is None else rle_decode(m) for m in meta["masks"]],
            subgoals=[Subgoal.model_validate(sg) for sg in meta["subgoals"]],
            layout=Layout.model_validate(meta["layout"]),
            goal=GoalSpec.model_validate(meta["goal"]),
            start=AgentPose.model_validate(meta["start"]),
            language=language,
            episode_id=meta["episode_id"],
            split=meta["split"],
            instance_ids=list(meta.get("instance_ids", [])),
        )

    def iter_split(self, split: str, with_observations: bool = True,
                   limit: Optional[int] = None) -> Iterator[Trajectory]:
        records = self.load_manifest().splits.get(split, [])
        for record in records[:limit]:
            yield self.load_episode(split, record.index, with_observations)

    def load_split(self, split: str, with_observations: bool = True, limit: Optional[int] = None) -> List[Trajectory]:
        return list(self.iter_split(split, with_observations, limit))
