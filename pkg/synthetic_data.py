# synthetic_data.py
"""
Seeded synthetic subject trees for desk-scale verification.

Every cluster has a fixed layout (anchor, axis, geometry family) shared by all
subjects; each subject draws its own bundle length and radius per cluster, so
shape descriptors vary across subjects. The target is a weighted sum of
z-scored subject-level descriptors (mean over clusters) plus Gaussian noise,
and manifest.json records the descriptor values the rule used.
"""
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

import config
from bundle_io import FiberCluster, ScalarKind, ScalarMap, SubjectData, write_subject
from errors import DataError, UsageError
from feature_matrix import SHAPE_FEATURES, FeatureKind
from shape_features import ShapeOptions, compute_all

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
RULE_FEATURES = SHAPE_FEATURES + (FeatureKind.NOS,)


class GeometryFamily(str, Enum):
    ROD = "rod"
    ARC = "arc"
    HELIX = "helix"
    MIXED = "mixed"


class SynthSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    subjects: int = Field(default=12, ge=6)
    clusters: int = Field(default=8, ge=2)
    streamlines: int = Field(default=12, ge=1)
    points: int = Field(default=20, ge=2)
    family: GeometryFamily = GeometryFamily.MIXED
    length_range: tuple[float, float] = (20.0, 60.0)
    radius_range: tuple[float, float] = (1.0, 4.0)
    jitter: float = Field(default=0.2, ge=0.0)
    missing_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    weights: dict[FeatureKind, float] = Field(default_factory=lambda: {FeatureKind.VOLUME: 1.0})
    noise: float = Field(default=0.3, ge=0.0)
    with_maps: bool = False
    spacing: float = Field(default=config.VOXEL_SPACING, gt=0)
    assessment: str = config.ASSESSMENT
    seed: int = config.SEED

    @field_validator("weights")
    @classmethod
    def rule_features(cls, v):
        if not v:
            raise ValueError("target rule needs at least one weighted feature")
        bad = [k.value for k in v if k not in RULE_FEATURES]
        if bad:
            raise ValueError(f"target rule features must be shape descriptors or nos, got {bad}")
        return v

    @model_validator(mode="after")
    def positive_ranges(self):
        for name in ("length_range", "radius_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        return self


class ManifestSubject(BaseModel):
    subject_id: str
    score: float
    # feature -> per-cluster values in cluster order
    descriptors: dict[FeatureKind, list[float]]


class SynthManifest(BaseModel):
    spec: SynthSpec
    subjects: list[ManifestSubject]


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _frame(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random orthonormal (u, v, w)."""
    u = _unit(rng.normal(size=3))
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    v = _unit(np.cross(u, helper))
    return u, v, np.cross(u, v)


class ClusterLayout(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    family: GeometryFamily
    anchor: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    bend: float  # arc angle (rad) or helix turns


def cluster_layouts(spec: SynthSpec) -> list[ClusterLayout]:
    rng = np.random.default_rng([spec.seed, 0])
    families = [GeometryFamily.ROD, GeometryFamily.ARC, GeometryFamily.HELIX]
    layouts = []
    for _ in range(spec.clusters):
        family = families[int(rng.integers(3))] if spec.family == GeometryFamily.MIXED else spec.family
        u, v, w = _frame(rng)
        anchor = rng.uniform(-50.0, 50.0, size=3)
        if family == GeometryFamily.ARC:
            bend = float(rng.uniform(math.pi / 4, math.pi))
        elif family == GeometryFamily.HELIX:
            bend = float(rng.uniform(1.0, 3.0))
        else:
            bend = 0.0
        layouts.append(ClusterLayout(family=family, anchor=anchor, u=u, v=v, w=w, bend=bend))
    return layouts


def _disk_offsets(rng: np.random.Generator, count: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(size=count))
    theta = rng.uniform(0.0, 2 * math.pi, size=count)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def streamline_points(
    layout: ClusterLayout, length: float, offset: np.ndarray, m: int, rng: np.random.Generator, jitter: float
) -> np.ndarray:
    """One streamline of the layout's family, displaced by `offset` in its cross-section."""
    s = np.linspace(0.0, 1.0, m)[:, None]
    a, b = offset
    if layout.family == GeometryFamily.ROD:
        # no per-point jitter: rods stay exactly straight
        return layout.anchor + (s - 0.5) * length * layout.u + a * layout.v + b * layout.w

    if layout.family == GeometryFamily.ARC:
        bend_radius = length / layout.bend
        phi = s * layout.bend
        tangent_normal = -np.sin(phi) * layout.u + np.cos(phi) * layout.v
        centre = layout.anchor + bend_radius * (np.sin(phi) * layout.u + (1.0 - np.cos(phi)) * layout.v)
        points = centre + a * layout.w + b * tangent_normal
    else:
        coil = 3.0
        angle = 2 * math.pi * layout.bend * s
        points = (
            layout.anchor
            + (s - 0.5) * length * layout.u
            + (coil + a) * np.cos(angle) * layout.v
            + (coil + b) * np.sin(angle) * layout.w
        )
    if jitter > 0:
        points = points + rng.normal(scale=jitter, size=points.shape)
    return points


def generate_cluster(
    layout: ClusterLayout, cluster_id: int, spec: SynthSpec, rng: np.random.Generator
) -> FiberCluster:
    length = rng.uniform(*spec.length_range)
    radius = rng.uniform(*spec.radius_range)
    offsets = _disk_offsets(rng, spec.streamlines, radius)
    lows = max(2, spec.points // 2)
    streamlines = [
        streamline_points(layout, length, offsets[i], int(rng.integers(lows, spec.points + 1)), rng, spec.jitter)
        for i in range(spec.streamlines)
    ]
    return FiberCluster(id=cluster_id, streamlines=streamlines)


def _scalar_maps(cluster: FiberCluster, rng: np.random.Generator) -> tuple[ScalarMap, ScalarMap]:
    fa = [np.clip(rng.normal(0.5, 0.1, size=len(s)), 0.0, 1.0) for s in cluster.streamlines]
    md = [np.abs(rng.normal(8e-4, 1e-4, size=len(s))) for s in cluster.streamlines]
    return ScalarMap(kind=ScalarKind.FA, values=fa), ScalarMap(kind=ScalarKind.MD, values=md)


# ---------------------------------------------------------------------------
# Subjects and targets
# ---------------------------------------------------------------------------

def _descriptor_table(clusters: list[FiberCluster], spacing: float) -> dict[FeatureKind, list[float]]:
    options = ShapeOptions(spacing=spacing)
    table: dict[FeatureKind, list[float]] = {k: [] for k in RULE_FEATURES}
    for cluster in clusters:
        shape, trad = compute_all(cluster, options=options)
        for kind in SHAPE_FEATURES:
            table[kind].append(shape.get(kind.value).value)
        table[FeatureKind.NOS].append(float(trad.nos))
    return table


def rule_targets(
    descriptors: list[dict[FeatureKind, list[float]]], weights: dict[FeatureKind, float]
) -> np.ndarray:
    """Noise-free target per subject: sum_k w_k * z(mean over clusters of descriptor k)."""
    target = np.zeros(len(descriptors))
    for kind, weight in weights.items():
        level = np.array([np.mean(d[kind]) for d in descriptors])
        std = level.std()
        target = target + weight * (level - level.mean()) / (std if std > 0 else 1.0)
    return target


def generate(spec: SynthSpec) -> tuple[list[SubjectData], SynthManifest]:
    layouts = cluster_layouts(spec)
    subjects_clusters, subjects_maps, descriptors = [], [], []
    for i in range(spec.subjects):
        rng = np.random.default_rng([spec.seed, 1, i])
        clusters, fa_maps, md_maps = [], {}, {}
        for k, layout in enumerate(layouts, start=1):
            cluster = generate_cluster(layout, k, spec, rng)
            if spec.missing_rate and rng.uniform() < spec.missing_rate:
                cluster = FiberCluster(id=k)
            clusters.append(cluster)
            if spec.with_maps and cluster.n:
                fa_maps[k], md_maps[k] = _scalar_maps(cluster, rng)
        subjects_clusters.append(clusters)
        subjects_maps.append((fa_maps, md_maps))
        descriptors.append(_descriptor_table(clusters, spec.spacing))

    noise_rng = np.random.default_rng([spec.seed, 2])
    scores = rule_targets(descriptors, spec.weights) + noise_rng.normal(scale=spec.noise, size=spec.subjects)

    subjects, entries = [], []
    for i, clusters in enumerate(subjects_clusters):
        subject_id = f"sub-{i + 1:04d}"
        fa_maps, md_maps = subjects_maps[i]
        subjects.append(SubjectData(
            subject_id=subject_id,
            clusters=tuple(clusters),
            fa_maps=fa_maps,
            md_maps=md_maps,
            scores={spec.assessment: float(scores[i])},
        ))
        entries.append(ManifestSubject(subject_id=subject_id, score=float(scores[i]), descriptors=descriptors[i]))
    return subjects, SynthManifest(spec=spec, subjects=entries)


def cmd_synth(spec: SynthSpec, output_root: Path | str) -> SynthManifest:
    """Write S subject directories plus manifest.json under output_root."""
    output_root = Path(output_root)
    subjects, manifest = generate(spec)
    try:
        output_root.mkdir(parents=True, exist_ok=True)
        for subject in subjects:
            write_subject(output_root, subject)
        (output_root / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataError(f"Cannot write synthetic data under {output_root}: {e}")
    logger.info(f"Wrote {spec.subjects} synthetic subjects ({spec.clusters} clusters, {spec.family.value}) to {output_root}")
    return manifest


def read_manifest(path: Path | str) -> SynthManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    if not path.is_file():
        raise DataError(f"Manifest not found: {path}")
    return SynthManifest.model_validate_json(path.read_text(encoding="utf-8"))


def manifest_targets(manifest: SynthManifest) -> np.ndarray:
    """Recompute the noise-free rule targets from the recorded descriptors."""
    return rule_targets([s.descriptors for s in manifest.subjects], manifest.spec.weights)


def parse_weights(items: Optional[list[str]]) -> dict[FeatureKind, float]:
    """`feature=weight` items from the command line; a bare feature gets weight 1."""
    if not items:
        return {FeatureKind.VOLUME: 1.0}
    weights = {}
    for item in items:
        name, _, weight = item.partition("=")
        try:
            weights[FeatureKind(name.strip())] = float(weight) if weight else 1.0
        except ValueError:
            raise UsageError(f"Bad target rule item {item!r}; expected feature=weight")
    return weights
