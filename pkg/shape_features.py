# shape_features.py
"""
Fiber cluster shape descriptors plus the traditional FA / MD / NoS features.

Streamline-based measures (length, span, curl, end regions) are analytic; the
remaining ones come from a single voxel mask shared by compute_all. Every
descriptor carries a validity flag: empty clusters and degenerate ratios give
value 0 with valid=False, so feature matrices keep a fixed C columns.
"""
import logging
import math
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import config
from bundle_io import FiberCluster, ScalarMap
from errors import DataError
from voxelizer import RasterMode, VoxelMask, mask_volume, surface_face_count, surface_voxel_count, voxelize

logger = logging.getLogger(__name__)

END_REGION_SCALE = 1.5


class ShapeKind(str, Enum):
    # listing order is also the tie-break order for helper selection
    LENGTH = "length"
    DIAMETER = "diameter"
    ELONGATION = "elongation"
    SPAN = "span"
    CURL = "curl"
    VOLUME = "volume"
    TRUNK_VOLUME = "trunk_volume"
    BRANCH_VOLUME = "branch_volume"
    TOTAL_SURFACE_AREA = "total_surface_area"
    TOTAL_END_REGION_RADIUS = "total_end_region_radius"
    TOTAL_END_REGION_AREA = "total_end_region_area"
    IRREGULARITY = "irregularity"


SHAPE_KINDS: tuple[ShapeKind, ...] = tuple(ShapeKind)


class Descriptor(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: float = 0.0
    valid: bool = False


INVALID = Descriptor()


def _valid(value: float) -> Descriptor:
    return Descriptor(value=float(value), valid=True)


class ShapeOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    spacing: float = Field(default=config.VOXEL_SPACING, gt=0)
    raster_mode: RasterMode = Field(default=config.RASTER_MODE, validate_default=True)
    cylinder_diameter: bool = config.CYLINDER_DIAMETER
    surface_faces: bool = config.SURFACE_FACES


class ShapeDescriptorVector(BaseModel):
    model_config = ConfigDict(frozen=True)

    length: Descriptor = INVALID
    diameter: Descriptor = INVALID
    elongation: Descriptor = INVALID
    span: Descriptor = INVALID
    curl: Descriptor = INVALID
    volume: Descriptor = INVALID
    trunk_volume: Descriptor = INVALID
    branch_volume: Descriptor = INVALID
    total_surface_area: Descriptor = INVALID
    total_end_region_radius: Descriptor = INVALID
    total_end_region_area: Descriptor = INVALID
    irregularity: Descriptor = INVALID

    def get(self, kind: ShapeKind) -> Descriptor:
        return getattr(self, ShapeKind(kind).value)

    def values(self) -> dict[ShapeKind, float]:
        return {kind: self.get(kind).value for kind in SHAPE_KINDS}

    def as_array(self) -> np.ndarray:
        return np.array([self.get(kind).value for kind in SHAPE_KINDS], dtype=np.float64)


class EndRegionSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    flipped: tuple[bool, ...] = ()
    centroids: tuple[tuple[float, float, float], ...] = ()
    radii: tuple[float, ...] = ()
    areas: tuple[float, ...] = ()
    valid: bool = False

    @property
    def total_radius(self) -> float:
        return float(sum(self.radii))

    @property
    def total_area(self) -> float:
        return float(sum(self.areas))


class TraditionalFeatures(BaseModel):
    model_config = ConfigDict(frozen=True)

    fa_mean: Descriptor = INVALID
    md_mean: Descriptor = INVALID
    nos: int = 0


# ---------------------------------------------------------------------------
# Streamline measures
# ---------------------------------------------------------------------------

def streamline_lengths(cluster: FiberCluster) -> np.ndarray:
    return np.array([np.linalg.norm(np.diff(s, axis=0), axis=1).sum() for s in cluster.streamlines])


def streamline_spans(cluster: FiberCluster) -> np.ndarray:
    return np.array([np.linalg.norm(s[0] - s[-1]) for s in cluster.streamlines])


def length(cluster: FiberCluster) -> Descriptor:
    """Mean polyline length over streamlines (mm)."""
    if cluster.n == 0:
        return INVALID
    return _valid(streamline_lengths(cluster).mean())


def span(cluster: FiberCluster) -> Descriptor:
    """Mean endpoint-to-endpoint distance (mm)."""
    if cluster.n == 0:
        return INVALID
    return _valid(streamline_spans(cluster).mean())


def curl_from(length_d: Descriptor, span_d: Descriptor) -> Descriptor:
    if not (length_d.valid and span_d.valid) or span_d.value == 0:
        return INVALID
    return _valid(length_d.value / span_d.value)


def curl(cluster: FiberCluster) -> Descriptor:
    return curl_from(length(cluster), span(cluster))


# ---------------------------------------------------------------------------
# Voxel measures
# ---------------------------------------------------------------------------

def diameter_from(volume: float, length_mm: float, cylinder: bool = False) -> Descriptor:
    """sqrt(V / (pi L)); doubled when the cylinder convention is requested."""
    if not length_mm > 0:
        return INVALID
    radius = math.sqrt(volume / (math.pi * length_mm))
    return _valid(2.0 * radius if cylinder else radius)


def diameter(cluster: FiberCluster, mask: VoxelMask, cylinder: bool = config.CYLINDER_DIAMETER) -> Descriptor:
    length_d = length(cluster)
    if not length_d.valid:
        return INVALID
    return diameter_from(mask_volume(mask), length_d.value, cylinder)


def elongation_from(length_d: Descriptor, diameter_d: Descriptor) -> Descriptor:
    if not (length_d.valid and diameter_d.valid) or diameter_d.value == 0:
        return INVALID
    return _valid(length_d.value / diameter_d.value)


def elongation(cluster: FiberCluster, mask: VoxelMask, cylinder: bool = config.CYLINDER_DIAMETER) -> Descriptor:
    return elongation_from(length(cluster), diameter(cluster, mask, cylinder))


def surface_area(mask: VoxelMask, faces: bool = config.SURFACE_FACES) -> Descriptor:
    """Surface voxel count (or exposed face count) times spacing squared."""
    count = surface_face_count(mask) if faces else surface_voxel_count(mask)
    return _valid(count * mask.spacing ** 2)


def irregularity_from(area_d: Descriptor, diameter_d: Descriptor, length_d: Descriptor) -> Descriptor:
    if not (area_d.valid and diameter_d.valid and length_d.valid):
        return INVALID
    denom = math.pi * diameter_d.value * length_d.value
    if denom == 0:
        return INVALID
    return _valid(area_d.value / denom)


def irregularity(
    cluster: FiberCluster,
    mask: VoxelMask,
    cylinder: bool = config.CYLINDER_DIAMETER,
    faces: bool = config.SURFACE_FACES,
) -> Descriptor:
    return irregularity_from(surface_area(mask, faces), diameter(cluster, mask, cylinder), length(cluster))


# ---------------------------------------------------------------------------
# End regions
# ---------------------------------------------------------------------------

def orient_streamlines(cluster: FiberCluster) -> tuple[bool, ...]:
    """Flip flags against streamline 1: flip when that brings both endpoints closer to the reference ends."""
    if cluster.n == 0:
        return ()
    ref_start = cluster.streamlines[0][0]
    ref_end = cluster.streamlines[0][-1]
    flips = [False]
    for s in cluster.streamlines[1:]:
        keep = np.linalg.norm(s[0] - ref_start) + np.linalg.norm(s[-1] - ref_end)
        flip = np.linalg.norm(s[-1] - ref_start) + np.linalg.norm(s[0] - ref_end)
        flips.append(bool(flip < keep))
    return tuple(flips)


def oriented_endpoints(cluster: FiberCluster, flipped: tuple[bool, ...]) -> tuple[np.ndarray, np.ndarray]:
    starts = np.array([s[-1] if f else s[0] for s, f in zip(cluster.streamlines, flipped)])
    ends = np.array([s[0] if f else s[-1] for s, f in zip(cluster.streamlines, flipped)])
    return starts, ends


def end_regions(cluster: FiberCluster, flipped: Optional[tuple[bool, ...]] = None) -> EndRegionSummary:
    """Disk summary per end: radius 1.5x the mean distance of the end's points to their centroid."""
    if cluster.n == 0:
        return EndRegionSummary()
    if flipped is None:
        flipped = orient_streamlines(cluster)

    centroids, radii, areas = [], [], []
    for points in oriented_endpoints(cluster, flipped):
        centroid = points.mean(axis=0)
        radius = END_REGION_SCALE * float(np.linalg.norm(points - centroid, axis=1).mean())
        centroids.append(tuple(float(c) for c in centroid))
        radii.append(radius)
        areas.append(math.pi * radius ** 2)
    return EndRegionSummary(
        flipped=flipped, centroids=tuple(centroids), radii=tuple(radii), areas=tuple(areas), valid=True
    )


def trunk_streamlines(cluster: FiberCluster, summary: EndRegionSummary) -> list[int]:
    """Indices of streamlines whose oriented endpoints both fall inside their end disks."""
    if not summary.valid:
        return []
    starts, ends = oriented_endpoints(cluster, summary.flipped)
    (c1, c2), (r1, r2) = summary.centroids, summary.radii
    inside_start = np.linalg.norm(starts - np.array(c1), axis=1) <= r1
    inside_end = np.linalg.norm(ends - np.array(c2), axis=1) <= r2
    return [int(i) for i in np.flatnonzero(inside_start & inside_end)]


def trunk_mask(
    cluster: FiberCluster,
    spacing: float,
    summary: Optional[EndRegionSummary] = None,
    mode: RasterMode | str = RasterMode.TRAVERSAL,
) -> VoxelMask:
    if summary is None:
        summary = end_regions(cluster)
    trunk = FiberCluster(id=cluster.id, streamlines=[cluster.streamlines[i] for i in trunk_streamlines(cluster, summary)])
    return voxelize(trunk, spacing, mode)


def trunk_branch_volume(
    cluster: FiberCluster,
    mask: VoxelMask,
    spacing: float,
    summary: Optional[EndRegionSummary] = None,
    mode: RasterMode | str = RasterMode.TRAVERSAL,
) -> tuple[Descriptor, Descriptor]:
    """Trunk = voxels of streamlines inside both end disks; branch = the rest of the volume."""
    if cluster.n == 0:
        return INVALID, INVALID
    volume = mask_volume(mask)
    trunk = mask_volume(trunk_mask(cluster, spacing, summary, mode))
    return _valid(trunk), _valid(volume - trunk)


# ---------------------------------------------------------------------------
# Traditional features
# ---------------------------------------------------------------------------

def _point_mean(cluster: FiberCluster, smap: Optional[ScalarMap]) -> Descriptor:
    if smap is None or cluster.n == 0:
        return INVALID
    if not smap.matches(cluster):
        raise DataError(f"{smap.kind.value} map does not match the shape of cluster {cluster.id}")
    return _valid(np.concatenate(smap.values).mean())


def traditional(
    cluster: FiberCluster, fa: Optional[ScalarMap] = None, md: Optional[ScalarMap] = None
) -> TraditionalFeatures:
    """Point-mean FA and MD over every point of every streamline, plus the streamline count."""
    return TraditionalFeatures(fa_mean=_point_mean(cluster, fa), md_mean=_point_mean(cluster, md), nos=cluster.n)


# ---------------------------------------------------------------------------
# All at once
# ---------------------------------------------------------------------------

def compute_all(
    cluster: FiberCluster,
    spacing: Optional[float] = None,
    fa: Optional[ScalarMap] = None,
    md: Optional[ScalarMap] = None,
    options: Optional[ShapeOptions] = None,
) -> tuple[ShapeDescriptorVector, TraditionalFeatures]:
    """All 12 shape descriptors and the traditional features, sharing one voxelization."""
    options = options or ShapeOptions()
    if spacing is not None:
        options = options.model_copy(update={"spacing": spacing})
    trad = traditional(cluster, fa, md)
    if cluster.n == 0:
        return ShapeDescriptorVector(), trad

    mask = voxelize(cluster, options.spacing, options.raster_mode)
    length_d = length(cluster)
    span_d = span(cluster)
    volume = mask_volume(mask)
    diameter_d = diameter_from(volume, length_d.value, options.cylinder_diameter)
    area_d = surface_area(mask, options.surface_faces)
    summary = end_regions(cluster)
    trunk_d, branch_d = trunk_branch_volume(cluster, mask, options.spacing, summary, options.raster_mode)

    shape = ShapeDescriptorVector(
        length=length_d,
        diameter=diameter_d,
        elongation=elongation_from(length_d, diameter_d),
        span=span_d,
        curl=curl_from(length_d, span_d),
        volume=_valid(volume),
        trunk_volume=trunk_d,
        branch_volume=branch_d,
        total_surface_area=area_d,
        total_end_region_radius=_valid(summary.total_radius),
        total_end_region_area=_valid(summary.total_area),
        irregularity=irregularity_from(area_d, diameter_d, length_d),
    )
    return shape, trad
