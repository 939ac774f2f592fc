# voxelizer.py
"""
Rasterize fiber clusters into voxel occupancy masks.

The default rasterizer walks every segment [v_i(t), v_i(t+1)] through the grid
(Amanatides-Woo), advancing all segments of a cluster together so the Python
loop runs once per voxel crossing, not once per segment. A point lying exactly
on a voxel face belongs to the voxel with the larger index (floor convention).
"""
import logging
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from bundle_io import FiberCluster
from errors import DataError

logger = logging.getLogger(__name__)

# 6-connected face neighbours
FACE_OFFSETS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64
)


class RasterMode(str, Enum):
    TRAVERSAL = "traversal"
    POINTS = "points"


class VoxelMask(BaseModel):
    """Occupied voxel indices (sorted, unique rows) at a given spacing in mm."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    spacing: float = Field(gt=0)
    voxels: np.ndarray

    @field_validator("voxels", mode="before")
    @classmethod
    def unique_rows(cls, v):
        arr = np.asarray(v, dtype=np.int64).reshape(-1, 3)
        if len(arr):
            arr = np.unique(arr, axis=0)
        arr.setflags(write=False)
        return arr

    @property
    def count(self) -> int:
        return len(self.voxels)

    @property
    def occupied(self) -> frozenset[tuple[int, int, int]]:
        return frozenset(map(tuple, self.voxels.tolist()))

    def issubset(self, other: "VoxelMask") -> bool:
        return self.occupied <= other.occupied

    def shifted(self, offset) -> "VoxelMask":
        return VoxelMask(spacing=self.spacing, voxels=self.voxels + np.asarray(offset, dtype=np.int64))


def cluster_segments(cluster: FiberCluster) -> tuple[np.ndarray, np.ndarray]:
    """Start and end points of every segment in the cluster, shape (N, 3) each."""
    if cluster.n == 0:
        empty = np.empty((0, 3))
        return empty, empty
    starts = np.concatenate([s[:-1] for s in cluster.streamlines], axis=0)
    ends = np.concatenate([s[1:] for s in cluster.streamlines], axis=0)
    return starts, ends


def traverse_segments(starts: np.ndarray, ends: np.ndarray, spacing: float) -> np.ndarray:
    """Voxel indices crossed by each segment, all segments advanced in lockstep."""
    if len(starts) == 0:
        return np.empty((0, 3), dtype=np.int64)

    a = starts / spacing
    b = ends / spacing
    cur = np.floor(a).astype(np.int64)
    last = np.floor(b).astype(np.int64)
    step = np.sign(last - cur)
    remaining = np.abs(last - cur)
    d = b - a

    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = np.where(step > 0, cur + 1, cur).astype(np.float64)
        t_max = np.where(remaining > 0, (boundary - a) / d, np.inf)
        t_delta = np.where(remaining > 0, 1.0 / np.abs(d), np.inf)

    visited = [cur.copy()]
    active = np.flatnonzero(remaining.sum(axis=1) > 0)
    while active.size:
        axis = np.argmin(t_max[active], axis=1)
        cur[active, axis] += step[active, axis]
        remaining[active, axis] -= 1
        t_max[active, axis] += t_delta[active, axis]
        done_axis = remaining[active, axis] == 0
        t_max[active[done_axis], axis[done_axis]] = np.inf
        visited.append(cur[active].copy())
        active = active[remaining[active].sum(axis=1) > 0]

    return np.concatenate(visited, axis=0)


def voxelize(cluster: FiberCluster, spacing: float, mode: RasterMode | str = RasterMode.TRAVERSAL) -> VoxelMask:
    """Occupancy mask of every voxel a streamline segment passes through."""
    if not spacing > 0:
        raise DataError(f"Voxel spacing must be positive, got {spacing}")
    mode = RasterMode(mode)
    if cluster.n == 0:
        return VoxelMask(spacing=spacing, voxels=np.empty((0, 3), dtype=np.int64))

    if mode == RasterMode.POINTS:
        voxels = np.floor(cluster.all_points() / spacing).astype(np.int64)
    else:
        voxels = traverse_segments(*cluster_segments(cluster), spacing)
    return VoxelMask(spacing=spacing, voxels=voxels)


def mask_volume(mask: VoxelMask) -> float:
    """Occupied voxel count times voxel volume (mm^3)."""
    return mask.count * mask.spacing ** 3


def _neighbour_hits(mask: VoxelMask) -> np.ndarray:
    """Boolean (K, 6): whether each face neighbour of each voxel is occupied."""
    voxels = mask.voxels
    lo = voxels.min(axis=0) - 1
    dims = voxels.max(axis=0) - lo + 2

    def keys(idx: np.ndarray) -> np.ndarray:
        rel = idx - lo
        return (rel[..., 0] * dims[1] + rel[..., 1]) * dims[2] + rel[..., 2]

    occupied_keys = keys(voxels)
    neighbours = voxels[:, None, :] + FACE_OFFSETS[None, :, :]
    return np.isin(keys(neighbours), occupied_keys)


def surface_voxel_count(mask: VoxelMask) -> int:
    """Occupied voxels with at least one unoccupied face neighbour."""
    if mask.count == 0:
        return 0
    return int(np.count_nonzero(~_neighbour_hits(mask).all(axis=1)))


def surface_face_count(mask: VoxelMask) -> int:
    """Exposed voxel faces (alternative surface measure)."""
    if mask.count == 0:
        return 0
    return int(np.count_nonzero(~_neighbour_hits(mask)))
