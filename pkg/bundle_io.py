# bundle_io.py
"""
Streamline bundle, scalar map and subject directory I/O.

SLB binary format (little-endian):
    "SLB1" | u32 n | n x ( u32 m_i | m_i x 3 float64 )

Text twin (hand-written fixtures):
    one streamline per line, points separated by ';', coordinates by
    whitespace, '#' starts a comment

SLS scalar map:
    "SLS1" | u32 n | n x ( u32 m_i | m_i float64 )

Subject layout:
    <root>/<subject_id>/cluster_0001.slb ... fa_0001.sls, md_0001.sls, scores.tsv
"""
import logging
import math
import re
import struct
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from errors import BundleFormatError, DataError, FormatErrorCode

logger = logging.getLogger(__name__)

SLB_MAGIC = b"SLB1"
TEXT_LEAD_CHARS = frozenset("0123456789+-.#;")
SLS_MAGIC = b"SLS1"
_U32 = struct.Struct("<I")
_F8 = np.dtype("<f8")

CLUSTER_FILE = "cluster_{:04d}.slb"
FA_FILE = "fa_{:04d}.sls"
MD_FILE = "md_{:04d}.sls"
SCORES_FILE = "scores.tsv"

_CLUSTER_RE = re.compile(r"^cluster_(\d+)\.(slb|txt)$")
_MAP_RE = re.compile(r"^(fa|md)_(\d+)\.sls$")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class ScalarKind(str, Enum):
    FA = "FA"
    MD = "MD"


class FiberCluster(BaseModel):
    """One brain connection: streamlines as (m_i, 3) float64 arrays in mm."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: int = Field(default=1, ge=1)
    streamlines: tuple[np.ndarray, ...] = ()

    @field_validator("streamlines", mode="before")
    @classmethod
    def validate_streamlines(cls, v):
        checked = []
        for i, pts in enumerate(v):
            arr = np.array(pts, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 3:
                raise ValueError(f"streamline {i} must have shape (m, 3), got {arr.shape}")
            if arr.shape[0] < 2:
                raise ValueError(f"streamline {i} has {arr.shape[0]} point(s); at least 2 required")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"streamline {i} has non-finite coordinates")
            checked.append(_frozen(arr))
        return tuple(checked)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FiberCluster):
            return NotImplemented
        return (
            self.id == other.id
            and self.n == other.n
            and all(np.array_equal(a, b) for a, b in zip(self.streamlines, other.streamlines))
        )

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.streamlines)

    @property
    def point_counts(self) -> list[int]:
        return [len(s) for s in self.streamlines]

    def all_points(self) -> np.ndarray:
        if not self.streamlines:
            return np.empty((0, 3))
        return np.concatenate(self.streamlines, axis=0)

    def transformed(self, fn) -> "FiberCluster":
        """Apply fn to every streamline array; used for rigid motions and rescaling."""
        return FiberCluster(id=self.id, streamlines=[fn(s) for s in self.streamlines])


class ScalarMap(BaseModel):
    """Per-point FA or MD values, shape-locked to a cluster."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: ScalarKind
    values: tuple[np.ndarray, ...] = ()

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v):
        return tuple(_frozen(np.array(vals, dtype=np.float64).reshape(-1)) for vals in v)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScalarMap):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.n == other.n
            and all(np.array_equal(a, b) for a, b in zip(self.values, other.values))
        )

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.values)

    def matches(self, cluster: FiberCluster) -> bool:
        return [len(v) for v in self.values] == cluster.point_counts


class SubjectData(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    subject_id: str
    clusters: tuple[FiberCluster, ...]
    fa_maps: dict[int, ScalarMap] = Field(default_factory=dict)
    md_maps: dict[int, ScalarMap] = Field(default_factory=dict)
    scores: dict[str, float] = Field(default_factory=dict)

    @property
    def cluster_count(self) -> int:
        return len(self.clusters)


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------

def _read_u32(data: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(data):
        raise BundleFormatError(FormatErrorCode.TRUNCATED, offset, f"expected u32 {what}, file ends")
    return _U32.unpack_from(data, offset)[0]


def _read_f8(data: bytes, offset: int, count: int, what: str) -> np.ndarray:
    end = offset + count * 8
    if end > len(data):
        raise BundleFormatError(
            FormatErrorCode.TRUNCATED, offset,
            f"expected {count} float64 values for {what}, only {len(data) - offset} bytes left",
        )
    return np.frombuffer(data, dtype=_F8, count=count, offset=offset).astype(np.float64)


def _check_magic(data: bytes, magic: bytes) -> None:
    if len(data) < 4:
        raise BundleFormatError(FormatErrorCode.TRUNCATED, 0, "header shorter than magic")
    if data[:3] == magic[:3] and data[3:4] != magic[3:4]:
        raise BundleFormatError(
            FormatErrorCode.BAD_VERSION, 3, f"unsupported version {data[3:4]!r}, expected {magic[3:4]!r}"
        )
    if data[:4] != magic:
        raise BundleFormatError(FormatErrorCode.BAD_MAGIC, 0, f"expected {magic!r}, got {data[:4]!r}")


def _first_non_finite(values: np.ndarray) -> Optional[int]:
    bad = np.flatnonzero(~np.isfinite(values))
    return int(bad[0]) if bad.size else None


def parse_bundle(data: bytes, cluster_id: int = 1) -> FiberCluster:
    """Parse SLB bytes or the text twin into a FiberCluster, preserving file order."""
    if data[:3] == SLB_MAGIC[:3]:
        return _parse_bundle_binary(data, cluster_id)
    text = _as_bundle_text(data)
    if text is None:
        raise BundleFormatError(FormatErrorCode.BAD_MAGIC, 0, f"expected {SLB_MAGIC!r} or coordinate text, got {data[:4]!r}")
    return _parse_bundle_text(text, cluster_id)


def _as_bundle_text(data: bytes) -> Optional[str]:
    """Decoded text when data can only be the text twin: no NUL bytes and a coordinate or comment first."""
    if b"\x00" in data:
        return None
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        return None
    stripped = text.lstrip()
    if stripped and stripped[0] not in TEXT_LEAD_CHARS:
        return None
    return text


def _parse_bundle_binary(data: bytes, cluster_id: int) -> FiberCluster:
    _check_magic(data, SLB_MAGIC)
    n = _read_u32(data, 4, "streamline count")
    offset = 8
    streamlines = []
    for i in range(n):
        m = _read_u32(data, offset, f"point count of streamline {i}")
        if m < 2:
            raise BundleFormatError(
                FormatErrorCode.SHORT_STREAMLINE, offset, f"streamline {i} has {m} point(s)"
            )
        offset += 4
        coords = _read_f8(data, offset, m * 3, f"streamline {i}")
        bad = _first_non_finite(coords)
        if bad is not None:
            raise BundleFormatError(
                FormatErrorCode.NON_FINITE, offset + bad * 8,
                f"streamline {i}, point {bad // 3} has a non-finite coordinate",
            )
        streamlines.append(coords.reshape(m, 3))
        offset += m * 24
    if offset != len(data):
        raise BundleFormatError(
            FormatErrorCode.TRAILING_DATA, offset, f"{len(data) - offset} bytes after declared {n} streamlines"
        )
    return FiberCluster(id=cluster_id, streamlines=streamlines)


def _parse_bundle_text(text: str, cluster_id: int) -> FiberCluster:
    streamlines = []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), start=1):
        line_offset = offset
        offset += len(line.encode("utf-8"))
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        points = []
        for token in body.split(";"):
            token = token.strip()
            if not token:
                continue
            parts = token.split()
            if len(parts) != 3:
                raise BundleFormatError(
                    FormatErrorCode.BAD_TEXT, line_offset,
                    f"line {lineno}: point {token!r} does not have 3 coordinates",
                )
            try:
                xyz = [float(p) for p in parts]
            except ValueError:
                raise BundleFormatError(
                    FormatErrorCode.BAD_TEXT, line_offset, f"line {lineno}: cannot parse {token!r}"
                )
            if not all(math.isfinite(c) for c in xyz):
                raise BundleFormatError(
                    FormatErrorCode.NON_FINITE, line_offset, f"line {lineno}: non-finite coordinate in {token!r}"
                )
            points.append(xyz)
        if len(points) < 2:
            raise BundleFormatError(
                FormatErrorCode.SHORT_STREAMLINE, line_offset, f"line {lineno}: streamline has {len(points)} point(s)"
            )
        streamlines.append(np.array(points, dtype=np.float64))
    return FiberCluster(id=cluster_id, streamlines=streamlines)


def write_bundle(cluster: FiberCluster) -> bytes:
    """Canonical SLB bytes; parse_bundle is the exact inverse."""
    chunks = [SLB_MAGIC, _U32.pack(cluster.n)]
    for pts in cluster.streamlines:
        chunks.append(_U32.pack(len(pts)))
        chunks.append(np.ascontiguousarray(pts, dtype=_F8).tobytes())
    return b"".join(chunks)


def write_bundle_text(cluster: FiberCluster) -> bytes:
    """Text twin with full-precision coordinates (repr round-trips exactly)."""
    lines = [f"# cluster {cluster.id}: {cluster.n} streamlines"]
    for pts in cluster.streamlines:
        lines.append("; ".join(" ".join(repr(float(c)) for c in p) for p in pts))
    return ("\n".join(lines) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# Scalar maps
# ---------------------------------------------------------------------------

def parse_scalar_map(data: bytes, cluster: FiberCluster, kind: ScalarKind) -> ScalarMap:
    """Parse an SLS file; it must declare the same streamline/point counts as the cluster."""
    kind = ScalarKind(kind)
    _check_magic(data, SLS_MAGIC)
    n = _read_u32(data, 4, "streamline count")
    if n != cluster.n:
        raise BundleFormatError(
            FormatErrorCode.SHAPE_MISMATCH, 4, f"map declares {n} streamlines, cluster {cluster.id} has {cluster.n}"
        )
    offset = 8
    values = []
    for i, expected in enumerate(cluster.point_counts):
        m = _read_u32(data, offset, f"point count of streamline {i}")
        if m != expected:
            raise BundleFormatError(
                FormatErrorCode.SHAPE_MISMATCH, offset, f"streamline {i}: map has {m} points, cluster has {expected}"
            )
        offset += 4
        vals = _read_f8(data, offset, m, f"streamline {i}")
        bad = _first_non_finite(vals)
        if bad is not None:
            raise BundleFormatError(
                FormatErrorCode.NON_FINITE, offset + bad * 8, f"streamline {i}, point {bad} is non-finite"
            )
        if kind == ScalarKind.FA:
            out = np.flatnonzero((vals < 0.0) | (vals > 1.0))
        else:
            out = np.flatnonzero(vals < 0.0)
        if out.size:
            j = int(out[0])
            raise BundleFormatError(
                FormatErrorCode.OUT_OF_RANGE, offset + j * 8,
                f"{kind.value} value {vals[j]!r} out of range at streamline {i}, point {j}",
            )
        values.append(vals)
        offset += m * 8
    if offset != len(data):
        raise BundleFormatError(
            FormatErrorCode.TRAILING_DATA, offset, f"{len(data) - offset} bytes after declared {n} streamlines"
        )
    return ScalarMap(kind=kind, values=values)


def write_scalar_map(smap: ScalarMap) -> bytes:
    chunks = [SLS_MAGIC, _U32.pack(smap.n)]
    for vals in smap.values:
        chunks.append(_U32.pack(len(vals)))
        chunks.append(np.ascontiguousarray(vals, dtype=_F8).tobytes())
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

def parse_scores(text: str, source: str = SCORES_FILE) -> dict[str, float]:
    """Parse "assessment<TAB>value" lines."""
    scores: dict[str, float] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 2 or not parts[0].strip():
            raise DataError(f"{source}:{lineno}: expected 'name<TAB>value', got {line!r}")
        name = parts[0].strip()
        try:
            value = float(parts[1])
        except ValueError:
            raise DataError(f"{source}:{lineno}: score for {name!r} is not a number: {parts[1]!r}")
        if not math.isfinite(value):
            raise DataError(f"{source}:{lineno}: score for {name!r} is not finite")
        if name in scores:
            raise DataError(f"{source}:{lineno}: duplicate assessment {name!r}")
        scores[name] = value
    return scores


def write_scores(scores: dict[str, float]) -> str:
    return "".join(f"{name}\t{value!r}\n" for name, value in scores.items())


# ---------------------------------------------------------------------------
# Subjects
# ---------------------------------------------------------------------------

def _index_files(directory: Path, cluster_count: int) -> tuple[dict[int, Path], dict[tuple[str, int], Path]]:
    bundles: dict[int, Path] = {}
    maps: dict[tuple[str, int], Path] = {}
    for entry in sorted(directory.iterdir()):
        if not entry.is_file():
            continue
        match = _CLUSTER_RE.match(entry.name)
        if match:
            index = int(match.group(1))
            if index in bundles:
                raise DataError(f"{directory}: duplicate cluster index {index} ({bundles[index].name}, {entry.name})")
            if not 1 <= index <= cluster_count:
                raise DataError(f"{directory}: cluster index {index} outside 1..{cluster_count}")
            bundles[index] = entry
            continue
        match = _MAP_RE.match(entry.name)
        if match:
            key = (match.group(1), int(match.group(2)))
            if key in maps:
                raise DataError(f"{directory}: duplicate {key[0]} map for cluster {key[1]}")
            if not 1 <= key[1] <= cluster_count:
                raise DataError(f"{directory}: {key[0]} map index {key[1]} outside 1..{cluster_count}")
            maps[key] = entry
    return bundles, maps


def _with_file(exc: BundleFormatError, path: Path) -> BundleFormatError:
    return BundleFormatError(exc.code, exc.offset, f"{path}: {exc.reason}")


def load_subject(path: Path | str, cluster_count: int, assessments: Iterable[str] = ()) -> SubjectData:
    """Load one subject directory. Absent cluster files become empty clusters."""
    directory = Path(path)
    if not directory.is_dir():
        raise DataError(f"Subject directory not found or unreadable: {directory}")
    try:
        bundles, maps = _index_files(directory, cluster_count)
    except OSError as e:
        raise DataError(f"Cannot read subject directory {directory}: {e}")

    clusters = []
    for k in range(1, cluster_count + 1):
        file = bundles.get(k)
        if file is None:
            clusters.append(FiberCluster(id=k))
            continue
        try:
            clusters.append(parse_bundle(file.read_bytes(), cluster_id=k))
        except BundleFormatError as e:
            raise _with_file(e, file)

    scalar_maps: dict[str, dict[int, ScalarMap]] = {"fa": {}, "md": {}}
    for (prefix, k), file in sorted(maps.items()):
        kind = ScalarKind.FA if prefix == "fa" else ScalarKind.MD
        try:
            scalar_maps[prefix][k] = parse_scalar_map(file.read_bytes(), clusters[k - 1], kind)
        except BundleFormatError as e:
            raise _with_file(e, file)

    scores: dict[str, float] = {}
    scores_path = directory / SCORES_FILE
    if scores_path.is_file():
        scores = parse_scores(scores_path.read_text(encoding="utf-8"), source=str(scores_path))
    for name in assessments:
        if name not in scores:
            raise DataError(f"{directory.name}: assessment {name!r} missing from {SCORES_FILE}")

    missing = cluster_count - len(bundles)
    if missing:
        logger.debug(f"{directory.name}: {missing} cluster file(s) absent, treated as empty")

    return SubjectData(
        subject_id=directory.name,
        clusters=tuple(clusters),
        fa_maps=scalar_maps["fa"],
        md_maps=scalar_maps["md"],
        scores=scores,
    )


def subject_dirs(root: Path | str) -> list[Path]:
    """Subject directories under root, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"Input root not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir())


def write_subject(root: Path | str, subject: SubjectData) -> Path:
    directory = Path(root) / subject.subject_id
    directory.mkdir(parents=True, exist_ok=True)
    for cluster in subject.clusters:
        (directory / CLUSTER_FILE.format(cluster.id)).write_bytes(write_bundle(cluster))
    for k, smap in subject.fa_maps.items():
        (directory / FA_FILE.format(k)).write_bytes(write_scalar_map(smap))
    for k, smap in subject.md_maps.items():
        (directory / MD_FILE.format(k)).write_bytes(write_scalar_map(smap))
    if subject.scores:
        (directory / SCORES_FILE).write_text(write_scores(subject.scores), encoding="utf-8")
    return directory
