from collections import deque

import numpy as np

from .base import Offset, TextureEngine, max_run_length, neighbor_offsets


class NaiveTextureEngine(TextureEngine):
    """
    Straightforward per-voxel Python loops. Reference implementation the
    optimized engine is checked against.
    """

    def __init__(self):
        super().__init__()
        self.name = "Naive (Reference)"

    def glcm(self, levels: np.ndarray, n_levels: int, offset: Offset) -> np.ndarray:
        m = np.zeros((n_levels, n_levels), dtype=np.int64)
        w, h, d = levels.shape
        dx, dy, dz = offset
        for x in range(w):
            for y in range(h):
                for z in range(d):
                    a = levels[x, y, z]
                    if a == 0:
                        continue
                    qx, qy, qz = x + dx, y + dy, z + dz
                    if not (0 <= qx < w and 0 <= qy < h and 0 <= qz < d):
                        continue
                    b = levels[qx, qy, qz]
                    if b == 0:
                        continue
                    m[a - 1, b - 1] += 1
                    m[b - 1, a - 1] += 1
        return m

    def glrlm(self, levels: np.ndarray, n_levels: int, direction: Offset) -> np.ndarray:
        shape = levels.shape
        m = np.zeros((n_levels, max_run_length(shape, direction)), dtype=np.int64)
        dx, dy, dz = direction

        def inside(x, y, z):
            return 0 <= x < shape[0] and 0 <= y < shape[1] and 0 <= z < shape[2]

        # Walk every lattice line: start where the previous step leaves the grid.
        for x in range(shape[0]):
            for y in range(shape[1]):
                for z in range(shape[2]):
                    if inside(x - dx, y - dy, z - dz):
                        continue
                    line = []
                    px, py, pz = x, y, z
                    while inside(px, py, pz):
                        line.append(int(levels[px, py, pz]))
                        px, py, pz = px + dx, py + dy, pz + dz
                    run_level, run_len = 0, 0
                    for value in line + [0]:
                        if value != 0 and value == run_level:
                            run_len += 1
                            continue
                        if run_level != 0:
                            m[run_level - 1, run_len - 1] += 1
                        run_level, run_len = value, 1
        return m

    def glszm(self, levels: np.ndarray, n_levels: int, connectivity: str = "slice8") -> np.ndarray:
        steps = neighbor_offsets(connectivity)
        shape = levels.shape
        seen = np.zeros(shape, dtype=bool)
        zones = []
        for x in range(shape[0]):
            for y in range(shape[1]):
                for z in range(shape[2]):
                    g = levels[x, y, z]
                    if g == 0 or seen[x, y, z]:
                        continue
                    # breadth-first flood fill
                    size = 0
                    queue = deque([(x, y, z)])
                    seen[x, y, z] = True
                    while queue:
                        cx, cy, cz = queue.popleft()
                        size += 1
                        for sx, sy, sz in steps:
                            nx, ny, nz = cx + sx, cy + sy, cz + sz
                            if not (0 <= nx < shape[0] and 0 <= ny < shape[1] and 0 <= nz < shape[2]):
                                continue
                            if seen[nx, ny, nz] or levels[nx, ny, nz] != g:
                                continue
                            seen[nx, ny, nz] = True
                            queue.append((nx, ny, nz))
                    zones.append((int(g), size))

        width = max([size for _, size in zones], default=1)
        m = np.zeros((n_levels, width), dtype=np.int64)
        for g, size in zones:
            m[g - 1, size - 1] += 1
        return m

    def describe(self) -> str:
        return (
            "Naive (Reference) Mode:\n"
            "  - One Python iteration per voxel.\n"
            "  - Explicit line walks and breadth-first flood fill.\n"
            "  - Used as the correctness oracle."
        )
