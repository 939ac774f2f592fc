# feature_matrix.py
"""
Subject x cluster feature matrices, z-score normalization and CSV exchange.

Files written to a features directory:
    matrix_<kind>.csv     wide format, one row per subject, C cluster columns
    features_long.csv     subject_id, cluster_id, <feature>...
    targets.csv           subject_id, one column per assessment
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator

from bundle_io import SubjectData
from errors import DataError
from shape_features import SHAPE_KINDS, ShapeOptions, compute_all

logger = logging.getLogger(__name__)

TARGETS_FILE = "targets.csv"
LONG_FILE = "features_long.csv"


class FeatureKind(str, Enum):
    FA = "fa"
    MD = "md"
    NOS = "nos"
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


TRADITIONAL_FEATURES = (FeatureKind.FA, FeatureKind.MD, FeatureKind.NOS)
SHAPE_FEATURES = tuple(FeatureKind(kind.value) for kind in SHAPE_KINDS)
ALL_FEATURES = TRADITIONAL_FEATURES + SHAPE_FEATURES


def matrix_filename(kind: FeatureKind) -> str:
    return f"matrix_{FeatureKind(kind).value}.csv"


def cluster_columns(cluster_count: int) -> list[str]:
    return [f"cluster_{c:04d}" for c in range(1, cluster_count + 1)]


class NormalizationStats(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: np.ndarray
    std: np.ndarray

    @property
    def columns(self) -> int:
        return len(self.mean)


class FeatureMatrix(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    feature_kind: FeatureKind
    values: np.ndarray
    subject_ids: tuple[str, ...]
    target: np.ndarray
    normalization: Optional[NormalizationStats] = None

    @field_validator("values", mode="before")
    @classmethod
    def finite_matrix(cls, v):
        arr = np.array(v, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature matrix contains non-finite entries")
        return arr

    @field_validator("target", mode="before")
    @classmethod
    def target_vector(cls, v):
        return np.array(v, dtype=np.float64).reshape(-1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def rows(self, index: Sequence[int]) -> np.ndarray:
        return self.values[np.asarray(index, dtype=np.int64)]


class SubjectFeatures(BaseModel):
    """Per-cluster feature vectors of one subject, keyed by kind."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    subject_id: str
    values: dict[FeatureKind, np.ndarray]
    scores: dict[str, float]
    has_fa: bool = False
    has_md: bool = False

    @property
    def cluster_count(self) -> int:
        return len(self.values[FeatureKind.NOS])


# ---------------------------------------------------------------------------
# Extraction and assembly
# ---------------------------------------------------------------------------

def extract_features(subject: SubjectData, options: Optional[ShapeOptions] = None, threads: int = 1) -> SubjectFeatures:
    """Run compute_all on every cluster of a subject; invalid features become zeros."""
    options = options or ShapeOptions()

    def one(cluster):
        return compute_all(
            cluster, fa=subject.fa_maps.get(cluster.id), md=subject.md_maps.get(cluster.id), options=options
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, subject.clusters))
    else:
        results = [one(c) for c in subject.clusters]

    values = {
        FeatureKind.FA: np.array([t.fa_mean.value for _, t in results]),
        FeatureKind.MD: np.array([t.md_mean.value for _, t in results]),
        FeatureKind.NOS: np.array([float(t.nos) for _, t in results]),
    }
    for kind in SHAPE_KINDS:
        values[FeatureKind(kind.value)] = np.array([s.get(kind).value for s, _ in results])

    return SubjectFeatures(
        subject_id=subject.subject_id,
        values=values,
        scores=dict(subject.scores),
        has_fa=bool(subject.fa_maps),
        has_md=bool(subject.md_maps),
    )


def _as_features(subjects: Iterable[SubjectData | SubjectFeatures], options: Optional[ShapeOptions]) -> list[SubjectFeatures]:
    return [s if isinstance(s, SubjectFeatures) else extract_features(s, options) for s in subjects]


def assemble(
    subjects: Sequence[SubjectData | SubjectFeatures],
    kind: FeatureKind,
    assessment: str,
    options: Optional[ShapeOptions] = None,
) -> FeatureMatrix:
    """Row s, column c = feature `kind` of subject s, cluster c; target = the assessment score."""
    kind = FeatureKind(kind)
    features = _as_features(subjects, options)
    if not features:
        raise DataError("No subjects to assemble")
    counts = {f.cluster_count for f in features}
    if len(counts) != 1:
        raise DataError(f"Subjects disagree on cluster count: {sorted(counts)}")
    for f in features:
        if assessment not in f.scores:
            raise DataError(f"Subject {f.subject_id} has no score for assessment {assessment!r}")
    return FeatureMatrix(
        feature_kind=kind,
        values=np.stack([f.values[kind] for f in features]),
        subject_ids=tuple(f.subject_id for f in features),
        target=[f.scores[assessment] for f in features],
    )


def available_kinds(features: Sequence[SubjectFeatures]) -> tuple[FeatureKind, ...]:
    """All kinds with data: FA/MD only when at least one subject carries the maps."""
    kinds = []
    if any(f.has_fa for f in features):
        kinds.append(FeatureKind.FA)
    if any(f.has_md for f in features):
        kinds.append(FeatureKind.MD)
    kinds.append(FeatureKind.NOS)
    return tuple(kinds) + SHAPE_FEATURES


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _as_values(matrix: FeatureMatrix | np.ndarray) -> np.ndarray:
    values = matrix.values if isinstance(matrix, FeatureMatrix) else np.asarray(matrix, dtype=np.float64)
    return values.reshape(len(values), -1)


def zscore_fit(matrix: FeatureMatrix | np.ndarray, train_index: Sequence[int]) -> NormalizationStats:
    """Per-column mean / population std over the training rows only; zero std is recorded as 1."""
    train_index = np.asarray(train_index, dtype=np.int64)
    if len(train_index) < 2:
        raise DataError(f"Normalization needs at least 2 training rows, got {len(train_index)}")
    rows = _as_values(matrix)[train_index]
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std[std == 0] = 1.0
    return NormalizationStats(mean=mean, std=std)


def zscore_apply(matrix: FeatureMatrix | np.ndarray, stats: NormalizationStats) -> np.ndarray:
    values = _as_values(matrix)
    if values.shape[1] != stats.columns:
        raise DataError(f"Normalization stats have {stats.columns} columns, matrix has {values.shape[1]}")
    return (values - stats.mean) / stats.std


def zscore_invert(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(values) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# Datasets and files
# ---------------------------------------------------------------------------

class FeatureDataset(BaseModel):
    """Matrices of several kinds over the same subjects and target."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    assessment: str
    subject_ids: tuple[str, ...]
    target: np.ndarray
    matrices: dict[FeatureKind, np.ndarray]

    @property
    def size(self) -> int:
        return len(self.subject_ids)

    def matrix(self, kind: FeatureKind) -> FeatureMatrix:
        kind = FeatureKind(kind)
        if kind not in self.matrices:
            raise DataError(f"No {kind.value} matrix in dataset (available: {[k.value for k in self.matrices]})")
        return FeatureMatrix(
            feature_kind=kind, values=self.matrices[kind], subject_ids=self.subject_ids, target=self.target
        )

    @classmethod
    def from_features(cls, features: Sequence[SubjectFeatures], assessment: str) -> "FeatureDataset":
        kinds = available_kinds(features)
        first = assemble(features, kinds[0], assessment)
        return cls(
            assessment=assessment,
            subject_ids=first.subject_ids,
            target=first.target,
            matrices={k: np.stack([f.values[k] for f in features]) for k in kinds},
        )


def write_matrix_csv(kind: FeatureKind, subject_ids: Sequence[str], values: np.ndarray, path: Path) -> None:
    frame = pd.DataFrame(values, index=pd.Index(list(subject_ids), name="subject_id"), columns=cluster_columns(values.shape[1]))
    frame.to_csv(path)


def read_matrix_csv(path: Path) -> pd.DataFrame:
    if not Path(path).is_file():
        raise DataError(f"Matrix file not found: {path}")
    frame = pd.read_csv(path, index_col="subject_id", dtype={"subject_id": str}, float_precision="round_trip")
    if not np.all(np.isfinite(frame.to_numpy(dtype=np.float64))):
        raise DataError(f"{path}: non-finite entries")
    return frame


def write_long_csv(features: Sequence[SubjectFeatures], kinds: Sequence[FeatureKind], path: Path) -> None:
    rows = []
    for f in features:
        for c in range(f.cluster_count):
            row = {"subject_id": f.subject_id, "cluster_id": c + 1}
            row.update({k.value: f.values[k][c] for k in kinds})
            rows.append(row)
    pd.DataFrame(rows, columns=["subject_id", "cluster_id"] + [k.value for k in kinds]).to_csv(path, index=False)


def write_targets_csv(features: Sequence[SubjectFeatures], path: Path) -> None:
    names = sorted({name for f in features for name in f.scores})
    frame = pd.DataFrame(
        [[f.scores.get(name, np.nan) for name in names] for f in features],
        index=pd.Index([f.subject_id for f in features], name="subject_id"),
        columns=names,
    )
    frame.to_csv(path)


def read_targets(path: Path, assessment: str) -> pd.Series:
    if not Path(path).is_file():
        raise DataError(f"Targets file not found: {path}")
    frame = pd.read_csv(path, index_col="subject_id", dtype={"subject_id": str}, float_precision="round_trip")
    if assessment not in frame.columns:
        raise DataError(f"Assessment {assessment!r} not in {path} (have {list(frame.columns)})")
    series = frame[assessment]
    missing = series.index[series.isna()].tolist()
    if missing:
        raise DataError(f"Assessment {assessment!r} missing for subjects {missing[:5]}")
    return series


def write_features_dir(features: Sequence[SubjectFeatures], output_dir: Path) -> list[FeatureKind]:
    """Write every available matrix plus the long table and targets; returns the kinds written."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    kinds = list(available_kinds(features))
    ids = [f.subject_id for f in features]
    for kind in kinds:
        write_matrix_csv(kind, ids, np.stack([f.values[kind] for f in features]), output_dir / matrix_filename(kind))
    write_long_csv(features, kinds, output_dir / LONG_FILE)
    write_targets_csv(features, output_dir / TARGETS_FILE)
    return kinds


def load_dataset(features_dir: Path, assessment: str, kinds: Optional[Iterable[FeatureKind]] = None) -> FeatureDataset:
    """Read matrices (all present ones unless kinds is given) aligned to the targets file."""
    features_dir = Path(features_dir)
    targets = read_targets(features_dir / TARGETS_FILE, assessment)
    wanted = list(kinds) if kinds is not None else [k for k in ALL_FEATURES if (features_dir / matrix_filename(k)).is_file()]
    if not wanted:
        raise DataError(f"No feature matrices found in {features_dir}")

    matrices = {}
    for kind in wanted:
        frame = read_matrix_csv(features_dir / matrix_filename(kind))
        missing = [s for s in frame.index if s not in targets.index]
        if missing:
            raise DataError(f"{matrix_filename(kind)}: subjects without targets: {missing[:5]}")
        if list(frame.index) != list(targets.index):
            frame = frame.reindex(targets.index)
            if frame.isna().any().any():
                raise DataError(f"{matrix_filename(kind)}: subjects in targets missing from matrix")
        matrices[FeatureKind(kind)] = frame.to_numpy(dtype=np.float64)

    counts = {m.shape[1] for m in matrices.values()}
    if len(counts) != 1:
        raise DataError(f"Matrices disagree on cluster count: {sorted(counts)}")
    return FeatureDataset(
        assessment=assessment,
        subject_ids=tuple(targets.index),
        target=targets.to_numpy(dtype=np.float64),
        matrices=matrices,
    )


def write_fold_file(path: Path, subject_ids: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{s}\n" for s in subject_ids), encoding="utf-8")


def read_fold_file(path: Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
