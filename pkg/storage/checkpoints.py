"""
Model checkpoints stored in the array container: one array per parameter or
buffer plus a header with the model configuration and provenance.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import torch

from storage.arrays import read_arrays, write_arrays

logger = logging.getLogger("factored_agent.storage")

CHECKPOINT_FORMAT = 1


def save_checkpoint(
    path: Union[str, Path],
    module: torch.nn.Module,
    model_config: Dict[str, Any],
    vocab_tokens: list,
    vocab_hash: str,
    channels: Dict[str, Any],
    step: int,
) -> None:
    state = module.state_dict()
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in state.items()}
    header = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model_config,
        "vocab_tokens": vocab_tokens,
        "vocab_hash": vocab_hash,
        "channels": channels,
        "step": step,
        "parameters": {name: list(array.shape) for name, array in arrays.items()},
    }
    write_arrays(path, arrays, header)
    logger.info(f"Checkpoint saved to {path} at step {step}")


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    header, arrays = read_arrays(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {header.get('format')} in {path}")
    missing = set(header["parameters"]) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint {path} is missing arrays: {sorted(missing)}")
    state = {name: torch.from_numpy(np.array(array)) for name, array in arrays.items()}
    return header, state
