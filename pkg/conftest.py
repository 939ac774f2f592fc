"""Pytest configuration file: seeded builders shared by the test modules."""

import itertools

import numpy as np
import pytest

from bundle_io import FiberCluster
from feature_matrix import FeatureDataset, FeatureKind


def random_cluster(rng: np.random.Generator, n: int = 5, max_points: int = 8, scale: float = 10.0, cluster_id: int = 1) -> FiberCluster:
    """Random polylines with 2..max_points points each."""
    streamlines = [rng.uniform(-scale, scale, size=(int(rng.integers(2, max_points + 1)), 3)) for _ in range(n)]
    return FiberCluster(id=cluster_id, streamlines=streamlines)


def bundle_cluster(rng: np.random.Generator, n: int = 6, m: int = 12, length: float = 30.0, radius: float = 2.0) -> FiberCluster:
    """Roughly parallel streamlines along x with wiggle; a plausible tract."""
    streamlines = []
    for _ in range(n):
        offset = rng.normal(scale=radius, size=2)
        x = np.linspace(0.0, length, m)
        pts = np.stack([x, offset[0] + rng.normal(scale=0.3, size=m), offset[1] + rng.normal(scale=0.3, size=m)], axis=1)
        streamlines.append(pts + 0.37)
    return FiberCluster(id=1, streamlines=streamlines)


def segment_oracle(a: np.ndarray, b: np.ndarray, spacing: float) -> set:
    """Every voxel in the segment's bounding box whose cube the segment actually passes through (slab test)."""
    a, b = a / spacing, b / spacing
    d = b - a
    lo = np.floor(np.minimum(a, b)).astype(int)
    hi = np.floor(np.maximum(a, b)).astype(int)
    hit = set()
    for idx in itertools.product(*(range(l, h + 1) for l, h in zip(lo, hi))):
        t0, t1 = 0.0, 1.0
        for axis in range(3):
            if d[axis] == 0:
                if not idx[axis] <= a[axis] < idx[axis] + 1:
                    t0, t1 = 1.0, 0.0
                continue
            u = (idx[axis] - a[axis]) / d[axis]
            v = (idx[axis] + 1 - a[axis]) / d[axis]
            t0, t1 = max(t0, min(u, v)), min(t1, max(u, v))
        if t0 < t1:
            hit.add(tuple(idx))
    return hit


def cluster_oracle(cluster: FiberCluster, spacing: float) -> set:
    hit = set()
    for s in cluster.streamlines:
        for a, b in zip(s[:-1], s[1:]):
            hit |= segment_oracle(a, b, spacing)
    return hit


def surface_oracle(occupied: set) -> int:
    """Occupied voxels with at least one of the six face neighbours empty."""
    steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    return sum(
        any((x + dx, y + dy, z + dz) not in occupied for dx, dy, dz in steps)
        for x, y, z in occupied
    )


def planted_dataset(
    rng: np.random.Generator,
    subjects: int = 30,
    clusters: int = 6,
    kinds=(FeatureKind.VOLUME, FeatureKind.DIAMETER),
    signal: FeatureKind = FeatureKind.VOLUME,
    noise: float = 0.0,
) -> FeatureDataset:
    """Random matrices; the target is the row mean of the `signal` matrix plus noise."""
    matrices = {FeatureKind(k): rng.normal(size=(subjects, clusters)) for k in kinds}
    target = matrices[FeatureKind(signal)].mean(axis=1) + noise * rng.normal(size=subjects)
    return FeatureDataset(
        assessment="SYNTH",
        subject_ids=tuple(f"sub-{i + 1:04d}" for i in range(subjects)),
        target=target,
        matrices=matrices,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
