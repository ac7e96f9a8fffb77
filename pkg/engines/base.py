from abc import ABC, abstractmethod
from typing import Tuple

import numpy as np

Offset = Tuple[int, int, int]

CONNECTIVITIES = ("slice8", "3d26")


class TextureEngine(ABC):
    """
    Abstract base class for texture-matrix kernels.
    Every engine works on a quantized level grid indexed [x, y, z] where
    in-mask voxels hold levels 1..n_levels and out-of-mask voxels hold 0.
    Engines must return identical integer counts for identical input.
    """

    def __init__(self):
        self.name = "AbstractEngine"

    @abstractmethod
    def glcm(self, levels: np.ndarray, n_levels: int, offset: Offset) -> np.ndarray:
        """
        Symmetric co-occurrence counts for voxel pairs (p, p + offset).

        Returns:
            int64 array of shape (n_levels, n_levels); entry [r-1, c-1]
            counts level pair (r, c), each pair counted in both orders.
        """

    @abstractmethod
    def glrlm(self, levels: np.ndarray, n_levels: int, direction: Offset) -> np.ndarray:
        """
        Run-length counts along direction.

        Returns:
            int64 array of shape (n_levels, max_run_length(shape, direction));
            entry [r-1, c-1] counts maximal runs of level r with length c.
        """

    @abstractmethod
    def glszm(self, levels: np.ndarray, n_levels: int, connectivity: str = "slice8") -> np.ndarray:
        """
        Size-zone counts.

        Returns:
            int64 array of shape (n_levels, max(1, largest zone size));
            entry [r-1, c-1] counts connected zones of level r with c voxels.
        """

    def describe(self) -> str:
        """Return a human-readable description of how this engine computes."""
        return f"{self.name}: Base texture engine."


def max_run_length(shape, direction: Offset) -> int:
    """Longest lattice line along direction that fits inside shape."""
    lengths = [n for n, step in zip(shape, direction) if step != 0]
    return int(min(lengths)) if lengths else 1


def check_connectivity(connectivity: str) -> None:
    if connectivity not in CONNECTIVITIES:
        raise ValueError(f"Unknown connectivity '{connectivity}', expected one of {CONNECTIVITIES}")


def neighbor_offsets(connectivity: str):
    """Neighbor steps for zone connectivity."""
    check_connectivity(connectivity)
    steps = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if (dx, dy, dz) == (0, 0, 0):
                    continue
                if connectivity == "slice8" and dz != 0:
                    continue
                steps.append((dx, dy, dz))
    return steps
