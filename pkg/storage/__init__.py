"""
Storage package: on-disk locations, the portable array container, the dataset
store, checkpoints and line-delimited episode logs.
"""

from storage.arrays import read_arrays, rle_decode, rle_encode, write_arrays
from storage.paths import get_data_root, get_runs_root

__all__ = [
    'get_data_root', 'get_runs_root',
    'read_arrays', 'write_arrays',
    'rle_encode', 'rle_decode',
]
