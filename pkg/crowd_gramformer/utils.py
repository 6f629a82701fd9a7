"""
Utility functions for the Gramformer crowd counter
"""
import math
import os
from typing import List, Sequence, Tuple

import numpy as np


def grid_position(node: int, grid: Tuple[int, int]) -> Tuple[int, int]:
    """Column and row of a node in a row-major (W, H) grid"""
    width, _ = grid
    return node % width, node // width


def node_count(grid: Tuple[int, int]) -> int:
    width, height = grid
    return width * height


def spawn_seeds(seed: int, count: int) -> List[int]:
    """Independent integer seeds derived from one master seed"""
    if count <= 0:
        return []
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation, (0, 0) for no values"""
    if len(values) == 0:
        return 0.0, 0.0
    array = np.asarray(values, dtype=np.float64)
    return float(array.mean()), float(array.std())


def ensure_directory(path: str) -> str:
    """Create a directory (and parents) if missing"""
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def is_finite_array(array: np.ndarray) -> bool:
    """No NaN or Inf anywhere"""
    return bool(np.all(np.isfinite(array)))


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))
