"""Uniform grid index for torus range queries.

Cells are at least as wide as the query radius, so any disk of that radius is
covered by the 3x3 block of cells around its center (with wrap-around).  The
index is purely a performance device: results must match the brute-force
all-pairs scan exactly.
"""

from __future__ import annotations

import numpy as np

from .geometry import WorldExtent


class SpatialGrid:
    """Snapshot index over parallel x/y coordinate arrays."""

    def __init__(self, xs: np.ndarray, ys: np.ndarray, extent: WorldExtent, cell_size: float):
        self.extent = extent
        self.ncx = max(1, int(extent.width / cell_size))
        self.ncy = max(1, int(extent.height / cell_size))
        self.cell_w = extent.width / self.ncx
        self.cell_h = extent.height / self.ncy
        self.xs = xs
        self.ys = ys
        cix = np.minimum((xs / self.cell_w).astype(np.int64), self.ncx - 1)
        ciy = np.minimum((ys / self.cell_h).astype(np.int64), self.ncy - 1)
        linear = cix * self.ncy + ciy
        # Stable sort keeps ids ascending within a cell, making query output
        # order deterministic.
        self._order = np.argsort(linear, kind="stable")
        counts = np.bincount(linear, minlength=self.ncx * self.ncy)
        self._starts = np.zeros(self.ncx * self.ncy + 1, dtype=np.int64)
        np.cumsum(counts, out=self._starts[1:])
        self._neighbor_cells: dict[tuple[int, int], list[int]] = {}

    def _cells_around(self, cx: int, cy: int) -> list[int]:
        key = (cx, cy)
        cached = self._neighbor_cells.get(key)
        if cached is None:
            seen = set()
            cached = []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    cell = ((cx + dx) % self.ncx) * self.ncy + (cy + dy) % self.ncy
                    if cell not in seen:
                        seen.add(cell)
                        cached.append(cell)
            self._neighbor_cells[key] = cached
        return cached

    def query(self, x: float, y: float, radius: float, exclude: int = -1):
        """Indices within `radius` of (x, y) and their torus distances.

        Returns (ids, dists) as parallel lists, ordered by cell then index.
        The radius must not exceed the cell size the grid was built with,
        otherwise the 3x3 cell block would not cover the disk.
        """
        if (self.ncx > 3 and radius > self.cell_w) or (self.ncy > 3 and radius > self.cell_h):
            raise ValueError(f"query radius {radius} exceeds grid cell size")
        cx = min(int(x / self.cell_w), self.ncx - 1)
        cy = min(int(y / self.cell_h), self.ncy - 1)
        chunks = [
            self._order[self._starts[c] : self._starts[c + 1]]
            for c in self._cells_around(cx, cy)
        ]
        cand = chunks[0] if len(chunks) == 1 else np.concatenate(chunks)
        if cand.size == 0:
            return [], []
        w, h = self.extent.width, self.extent.height
        dx = np.abs(self.xs[cand] - x)
        np.minimum(dx, w - dx, out=dx)
        dy = np.abs(self.ys[cand] - y)
        np.minimum(dy, h - dy, out=dy)
        d2 = dx * dx + dy * dy
        mask = d2 <= radius * radius
        if exclude >= 0:
            mask &= cand != exclude
        ids = cand[mask]
        if ids.size == 0:
            return [], []
        return ids.tolist(), np.sqrt(d2[mask]).tolist()
