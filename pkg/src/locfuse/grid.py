"""Patch-grid geometry and radius neighborhoods between two token grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid extents must be positive, got {self.rows}x{self.cols}")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def coords(self) -> np.ndarray:
        """``(N, 2)`` integer (row, col) in raster order."""
        r, c = np.divmod(np.arange(self.n), self.cols)
        return np.stack([r, c], axis=1)

    @property
    def diameter(self) -> float:
        return math.hypot(self.rows - 1, self.cols - 1)

    def index(self, p) -> int:
        self._check(p)
        return int(p[0]) * self.cols + int(p[1])

    def _check(self, p) -> None:
        if not (0 <= p[0] < self.rows and 0 <= p[1] < self.cols):
            raise ValueError(f"coordinate {tuple(p)} lies outside {self.rows}x{self.cols} grid")


def grid_from_image(height: int, width: int, patch: int) -> PatchGrid:
    if patch < 1:
        raise ValueError("patch size must be positive")
    rh, rw = height % patch, width % patch
    if rh or rw:
        raise ValueError(
            f"patch {patch} does not tile {height}x{width} image (remainders {rh}, {rw})"
        )
    return PatchGrid(height // patch, width // patch)


def _map_axis(x, n_src: int, n_dst: int):
    if n_src == n_dst:
        return x
    y = np.round((np.asarray(x) + 0.5) * n_dst / n_src - 0.5)
    return np.clip(y, 0, n_dst - 1).astype(int)


def map_coords(p, src: PatchGrid, dst: PatchGrid) -> tuple[int, int]:
    """Patch-centre scaling from ``src`` onto ``dst``, rounded to the nearest cell.

    ``np.round`` rounds halves to even; this is part of the mapping contract.
    """
    src._check(p)
    return int(_map_axis(p[0], src.rows, dst.rows)), int(_map_axis(p[1], src.cols, dst.cols))


@dataclass(frozen=True)
class NeighborhoodTable:
    """For each query token, the sorted key indices within Euclidean radius ``r``."""

    radius: float
    query: PatchGrid
    key: PatchGrid
    neighbors: tuple[tuple[int, ...], ...] = field(repr=False)

    def __len__(self) -> int:
        return len(self.neighbors)

    def counts(self) -> np.ndarray:
        return np.array([len(v) for v in self.neighbors])

    @cached_property
    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """``(index, valid)`` arrays of shape ``(N_q, M)``, M the largest list.

        Padding slots point at key 0 and are marked invalid.
        """
        m = max(1, int(self.counts().max(initial=0)))
        idx = np.zeros((len(self), m), dtype=np.intp)
        valid = np.zeros((len(self), m), dtype=bool)
        for u, vs in enumerate(self.neighbors):
            idx[u, : len(vs)] = vs
            valid[u, : len(vs)] = True
        return idx, valid

    @cached_property
    def scatter(self) -> sparse.csr_matrix:
        """``(N_k, N_q * M)`` 0/1 matrix summing gathered slots back onto keys."""
        idx, valid = self.padded
        cols = np.flatnonzero(valid.ravel())
        rows = idx.ravel()[cols]
        return sparse.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(self.key.n, idx.size))

    def dense_mask(self) -> np.ndarray:
        """Boolean ``(N_q, N_k)`` membership matrix."""
        mask = np.zeros((self.query.n, self.key.n), dtype=bool)
        for u, vs in enumerate(self.neighbors):
            mask[u, list(vs)] = True
        return mask


def build_neighborhood(query: PatchGrid, key: PatchGrid, r: float) -> NeighborhoodTable:
    if r < 0:
        raise ValueError(f"radius must be non-negative, got {r}")
    qc = query.coords
    centres = np.stack(
        [_map_axis(qc[:, 0], query.rows, key.rows), _map_axis(qc[:, 1], query.cols, key.cols)],
        axis=1,
    )
    kc = key.coords
    d2 = ((centres[:, None, :] - kc[None, :, :]) ** 2).sum(axis=-1)
    # sqrt is correctly rounded, so r = hypot(dx, dy) keeps its own endpoint
    inside = np.sqrt(d2) <= r
    neighbors = tuple(tuple(int(v) for v in np.flatnonzero(row)) for row in inside)
    return NeighborhoodTable(float(r), query, key, neighbors)
