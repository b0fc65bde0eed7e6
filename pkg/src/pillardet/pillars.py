"""Pillar voxelization: x-y binning with a single full-height vertical layer.

Each occupied cell ("pillar") keeps up to a fixed number of points in input
order. Per-point features are augmented from 4 to 9 channels: the raw
(x, y, z, reflectance) plus offsets from the pillar's point centroid and
from the cell center in the plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import difftensor as dt
from .errors import ConfigError, DataError

POINT_FEATURE_DIM = 9


@dataclass(frozen=True)
class GridSpec:
    """Detection grid: ranges in meters, voxel size (vx, vy, vz).

    vz must span the whole z range, so the grid is a single layer of pillars.
    Rows of the pseudo image index y bins, columns index x bins.
    """

    x_range: tuple
    y_range: tuple
    z_range: tuple
    voxel_size: tuple

    def __post_init__(self):
        for name, (lo, hi), v in (("x", self.x_range, self.voxel_size[0]),
                                  ("y", self.y_range, self.voxel_size[1]),
                                  ("z", self.z_range, self.voxel_size[2])):
            if hi <= lo:
                raise ConfigError(f"{name}_range {lo, hi} is empty")
            if v <= 0:
                raise ConfigError(f"voxel size along {name} must be positive")
            bins = (hi - lo) / v
            if abs(bins - round(bins)) > 1e-9:
                raise ConfigError(f"{name} extent {hi - lo} is not a multiple of voxel {v}")
        nz = round((self.z_range[1] - self.z_range[0]) / self.voxel_size[2])
        if nz != 1:
            raise ConfigError(f"vertical voxel size must cover the full z range "
                              f"(got {nz} layers)")

    @property
    def nx(self) -> int:
        return round((self.x_range[1] - self.x_range[0]) / self.voxel_size[0])

    @property
    def ny(self) -> int:
        return round((self.y_range[1] - self.y_range[0]) / self.voxel_size[1])

    @property
    def shape_hw(self) -> tuple:
        """(rows, cols) = (y bins, x bins) of the pseudo image."""
        return (self.ny, self.nx)

    def cell_centers(self, coords: np.ndarray) -> np.ndarray:
        """(N, 2) cell-center x, y for (row, col) integer coords."""
        coords = np.asarray(coords)
        cx = self.x_range[0] + (coords[:, 1] + 0.5) * self.voxel_size[0]
        cy = self.y_range[0] + (coords[:, 0] + 0.5) * self.voxel_size[1]
        return np.column_stack([cx, cy])


@dataclass
class PillarBatch:
    """Voxelized scene: N pillars holding up to V points each.

    features: (N, V, 9) augmented per-point features, zero padded
    raw: (N, V, 4) the retained raw points, zero padded
    counts: (N,) valid points per pillar, always >= 1
    coords: (N, 2) integer (row, col) cells, unique, ascending by flat index
    """

    features: np.ndarray
    raw: np.ndarray
    counts: np.ndarray
    coords: np.ndarray

    @property
    def n_pillars(self) -> int:
        return self.features.shape[0]

    def flatten_points(self) -> np.ndarray:
        """(M, 4) all retained raw points, pillar by pillar."""
        keep = np.arange(self.raw.shape[1])[None, :] < self.counts[:, None]
        return self.raw[keep]


def voxelize(points: np.ndarray, grid: GridSpec, max_points_per_pillar: int,
             max_pillars: int, rng: np.random.Generator | None = None) -> PillarBatch:
    """Bin points into pillars and build augmented features.

    Points outside the grid ranges are dropped. Overflow is resolved by
    seeded uniform subsampling on the supplied rng: first the occupied cells
    when they exceed max_pillars (one draw), then the members of each
    overfull pillar in (row, col) enumeration order (one draw per such
    pillar). Each draw is `rng.choice(n, size=k, replace=False)` and the
    selection is re-sorted, so pillar enumeration stays lexicographic and
    points keep input order. Inputs that fit both caps never touch the rng;
    an overflow without an rng is a configuration error, never an unseeded
    sample.
    """
    if max_points_per_pillar < 1 or max_pillars < 1:
        raise ConfigError("max_points_per_pillar and max_pillars must be >= 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if points.size and not np.all(np.isfinite(points)):
        raise DataError("non-finite values in input point cloud")

    (xlo, xhi), (ylo, yhi), (zlo, zhi) = grid.x_range, grid.y_range, grid.z_range
    keep = ((points[:, 0] >= xlo) & (points[:, 0] < xhi)
            & (points[:, 1] >= ylo) & (points[:, 1] < yhi)
            & (points[:, 2] >= zlo) & (points[:, 2] < zhi))
    pts = points[keep]
    v = max_points_per_pillar
    if pts.shape[0] == 0:
        return PillarBatch(features=np.zeros((0, v, POINT_FEATURE_DIM)),
                           raw=np.zeros((0, v, 4)),
                           counts=np.zeros(0, dtype=np.int64),
                           coords=np.zeros((0, 2), dtype=np.int64))

    ix = np.floor((pts[:, 0] - xlo) / grid.voxel_size[0]).astype(np.int64)
    iy = np.floor((pts[:, 1] - ylo) / grid.voxel_size[1]).astype(np.int64)
    ix = np.clip(ix, 0, grid.nx - 1)
    iy = np.clip(iy, 0, grid.ny - 1)
    flat = iy * grid.nx + ix

    order = np.argsort(flat, kind="stable")  # group by cell, keep input order inside
    flat_sorted = flat[order]
    cells, starts, cell_counts = np.unique(flat_sorted, return_index=True, return_counts=True)

    def need_rng() -> np.random.Generator:
        if rng is None:
            raise ConfigError("voxelize overflow requires an rng for seeded subsampling")
        return rng

    if cells.size > max_pillars:
        sel = need_rng().choice(cells.size, size=max_pillars, replace=False)
        sel.sort()  # back to ascending cell index
        cells, starts, cell_counts = cells[sel], starts[sel], cell_counts[sel]

    n = cells.size
    counts = np.minimum(cell_counts, v).astype(np.int64)
    raw = np.zeros((n, v, 4))
    for i in range(n):
        members = order[starts[i] : starts[i] + cell_counts[i]]
        if cell_counts[i] > v:
            pick = need_rng().choice(cell_counts[i], size=v, replace=False)
            pick.sort()  # selected points keep input order
            members = members[pick]
        raw[i, : counts[i]] = pts[members]
    coords = np.column_stack([cells // grid.nx, cells % grid.nx]).astype(np.int64)

    features = augment_point_features(raw, counts, coords, grid)
    return PillarBatch(features=features, raw=raw, counts=counts, coords=coords)


def augment_point_features(raw: np.ndarray, counts: np.ndarray, coords: np.ndarray,
                           grid: GridSpec) -> np.ndarray:
    """Expand (N, V, 4) raw points to the 9 per-point channels.

    Channels: x, y, z, reflectance, offsets from the pillar centroid (3),
    offsets from the cell center in the plane (2). Padded slots stay zero.
    """
    n, v, _ = raw.shape
    out = np.zeros((n, v, POINT_FEATURE_DIM))
    if n == 0:
        return out
    valid = np.arange(v)[None, :] < counts[:, None]
    denom = counts[:, None].astype(np.float64)
    centroid = (raw[:, :, :3] * valid[:, :, None]).sum(axis=1) / denom
    centers = grid.cell_centers(coords)
    out[:, :, 0:4] = raw
    out[:, :, 4:7] = raw[:, :, :3] - centroid[:, None, :]
    out[:, :, 7] = raw[:, :, 0] - centers[:, 0][:, None]
    out[:, :, 8] = raw[:, :, 1] - centers[:, 1][:, None]
    out[~valid] = 0.0
    return out


def scatter_to_image(columns: dt.Tensor, coords: np.ndarray, grid: GridSpec) -> dt.Tensor:
    """Place per-pillar feature columns (C, N) into a (C, H, W) pseudo image."""
    return dt.tensor.scatter_cols(columns, coords, grid.shape_hw)
