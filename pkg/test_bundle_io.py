import struct

import numpy as np
import pytest

from bundle_io import (
    FiberCluster,
    ScalarKind,
    ScalarMap,
    SubjectData,
    load_subject,
    parse_bundle,
    parse_scalar_map,
    parse_scores,
    write_bundle,
    write_bundle_text,
    write_scalar_map,
    write_scores,
    write_subject,
)
from conftest import random_cluster
from errors import BundleFormatError, DataError, FormatErrorCode


def test_text_minimal_streamline():
    cluster = parse_bundle(b"0 0 0; 1 0 0\n")
    assert cluster.n == 1
    assert cluster.point_counts == [2]
    np.testing.assert_array_equal(cluster.streamlines[0], [[0, 0, 0], [1, 0, 0]])


def test_text_comments_and_blank_lines():
    cluster = parse_bundle(b"# header\n\n0 0 0; 1 0 0 # tail\n1 1 1;2 2 2;3 3 3\n")
    assert cluster.point_counts == [2, 3]


def test_empty_sections_give_missing_cluster():
    assert parse_bundle(b"").n == 0
    assert parse_bundle(b"# nothing here\n").n == 0
    assert parse_bundle(b"SLB1" + struct.pack("<I", 0)).n == 0


def test_write_empty_cluster_is_header_only():
    assert write_bundle(FiberCluster(id=3)) == b"SLB1" + struct.pack("<I", 0)


def test_write_single_segment_layout():
    cluster = FiberCluster(streamlines=[[[0, 0, 0], [1, 2, 3]]])
    data = write_bundle(cluster)
    assert len(data) == 4 + 4 + 4 + 6 * 8
    assert struct.unpack_from("<I", data, 8)[0] == 2
    np.testing.assert_array_equal(np.frombuffer(data, dtype="<f8", offset=12), [0, 0, 0, 1, 2, 3])


def test_binary_round_trip_is_bit_exact(rng):
    for _ in range(25):
        cluster = random_cluster(rng, n=int(rng.integers(0, 6)))
        data = write_bundle(cluster)
        parsed = parse_bundle(data, cluster_id=cluster.id)
        assert parsed == cluster
        assert write_bundle(parsed) == data


def test_text_twin_matches_binary(rng):
    cluster = random_cluster(rng, n=4)
    assert parse_bundle(write_bundle_text(cluster)) == parse_bundle(write_bundle(cluster))


def test_streamline_order_preserved():
    cluster = FiberCluster(streamlines=[[[9, 9, 9], [8, 8, 8]], [[0, 0, 0], [1, 1, 1], [2, 2, 2]]])
    parsed = parse_bundle(write_bundle(cluster))
    np.testing.assert_array_equal(parsed.streamlines[0][0], [9, 9, 9])
    assert parsed.point_counts == [2, 3]


@pytest.mark.parametrize(
    "data, code, offset",
    [
        (b"XYZ1\x00\x00\x00\x00", FormatErrorCode.BAD_MAGIC, 0),
        (b"SLB2\x00\x00\x00\x00", FormatErrorCode.BAD_VERSION, 3),
        (b"SLB1\x01\x00", FormatErrorCode.TRUNCATED, 4),
        (b"SLB1" + struct.pack("<II", 1, 1) + np.zeros(3).tobytes(), FormatErrorCode.SHORT_STREAMLINE, 8),
        (b"SLB1" + struct.pack("<II", 1, 2) + np.zeros(5).tobytes(), FormatErrorCode.TRUNCATED, 12),
        (b"SLB1" + struct.pack("<I", 0) + b"\x00", FormatErrorCode.TRAILING_DATA, 8),
    ],
)
def test_binary_errors_carry_code_and_offset(data, code, offset):
    with pytest.raises(BundleFormatError) as info:
        parse_bundle(data)
    assert info.value.code == code
    assert info.value.offset == offset
    assert f"at byte {offset}" in info.value.detail


def test_non_finite_coordinate_offset():
    coords = np.zeros(6)
    coords[4] = np.nan
    data = b"SLB1" + struct.pack("<II", 1, 2) + coords.astype("<f8").tobytes()
    with pytest.raises(BundleFormatError) as info:
        parse_bundle(data)
    assert info.value.code == FormatErrorCode.NON_FINITE
    assert info.value.offset == 12 + 4 * 8


def test_declared_count_larger_than_payload_never_drops_streamlines():
    data = write_bundle(FiberCluster(streamlines=[[[0, 0, 0], [1, 0, 0]]]))
    lying = data[:4] + struct.pack("<I", 2) + data[8:]
    with pytest.raises(BundleFormatError) as info:
        parse_bundle(lying)
    assert info.value.code == FormatErrorCode.TRUNCATED


@pytest.mark.parametrize(
    "text, code",
    [
        (b"0 0 0\n", FormatErrorCode.SHORT_STREAMLINE),
        (b"0 0; 1 1 1\n", FormatErrorCode.BAD_TEXT),
        (b"0 0 x; 1 1 1\n", FormatErrorCode.BAD_TEXT),
        (b"0 0 inf; 1 1 1\n", FormatErrorCode.NON_FINITE),
        (b"\xff\xfe\x00", FormatErrorCode.BAD_MAGIC),
    ],
)
def test_text_errors(text, code):
    with pytest.raises(BundleFormatError) as info:
        parse_bundle(text)
    assert info.value.code == code



@pytest.mark.parametrize("data", [b"XYZ1\x00\x00\x00\x00", b"XYZ1 0 0 0", b"HDR\n0 0 0; 1 1 1\n", b"0 0 0; 1 1 1\x00"])
def test_unknown_header_is_bad_magic(data):
    with pytest.raises(BundleFormatError) as info:
        parse_bundle(data)
    assert info.value.code == FormatErrorCode.BAD_MAGIC
    assert info.value.offset == 0


def test_text_with_comment_or_blank_lead_parses():
    assert parse_bundle(b"\n  # header\n0 0 0; 1 1 1\n").n == 1
    assert parse_bundle(b"-1 0 0; .5 1 1\n").point_counts == [2]
    assert parse_bundle(b"").n == 0


# ---------------------------------------------------------------------------
# Scalar maps
# ---------------------------------------------------------------------------

def _map_bytes(values) -> bytes:
    return write_scalar_map(ScalarMap(kind=ScalarKind.MD, values=values))


def test_zero_md_map_is_valid():
    cluster = FiberCluster(streamlines=[[[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 0], [1, 1, 0]]])
    smap = parse_scalar_map(_map_bytes([np.zeros(3), np.zeros(2)]), cluster, ScalarKind.MD)
    assert smap.matches(cluster)
    assert smap.kind == ScalarKind.MD


def test_fa_out_of_range_names_location():
    cluster = FiberCluster(streamlines=[[[0, 0, 0], [1, 0, 0]], [[0, 1, 0], [1, 1, 0]]])
    data = _map_bytes([[0.2, 0.3], [0.4, 1.2]])
    with pytest.raises(BundleFormatError) as info:
        parse_scalar_map(data, cluster, ScalarKind.FA)
    assert info.value.code == FormatErrorCode.OUT_OF_RANGE
    assert "streamline 1, point 1" in info.value.detail


def test_map_point_count_off_by_one():
    cluster = FiberCluster(streamlines=[[[0, 0, 0], [1, 0, 0], [2, 0, 0]]])
    with pytest.raises(BundleFormatError) as info:
        parse_scalar_map(_map_bytes([[0.1, 0.2]]), cluster, ScalarKind.FA)
    assert info.value.code == FormatErrorCode.SHAPE_MISMATCH


def test_map_streamline_count_mismatch():
    cluster = FiberCluster(streamlines=[[[0, 0, 0], [1, 0, 0]]])
    with pytest.raises(BundleFormatError) as info:
        parse_scalar_map(_map_bytes([[0.1, 0.2], [0.1, 0.2]]), cluster, ScalarKind.MD)
    assert info.value.code == FormatErrorCode.SHAPE_MISMATCH


def test_scalar_map_round_trip(rng):
    cluster = random_cluster(rng, n=4)
    smap = ScalarMap(kind=ScalarKind.FA, values=[rng.uniform(size=m) for m in cluster.point_counts])
    data = write_scalar_map(smap)
    parsed = parse_scalar_map(data, cluster, ScalarKind.FA)
    assert parsed == smap
    assert write_scalar_map(parsed) == data


# ---------------------------------------------------------------------------
# Scores and subjects
# ---------------------------------------------------------------------------

def test_scores_round_trip():
    scores = {"TPVT": 104.25, "TORRT": 98.0}
    assert parse_scores(write_scores(scores)) == scores


@pytest.mark.parametrize("text", ["TPVT 100\n", "TPVT\tabc\n", "TPVT\t1\nTPVT\t2\n", "TPVT\tnan\n"])
def test_malformed_scores(text):
    with pytest.raises(DataError):
        parse_scores(text)


def _subject(rng, clusters=4) -> SubjectData:
    members = tuple(random_cluster(rng, n=3, cluster_id=k) for k in range(1, clusters + 1))
    fa = {1: ScalarMap(kind=ScalarKind.FA, values=[np.full(m, 0.5) for m in members[0].point_counts])}
    return SubjectData(subject_id="sub-0001", clusters=members, fa_maps=fa, scores={"TPVT": 101.0})


def test_load_subject_round_trip(tmp_path, rng):
    subject = _subject(rng)
    write_subject(tmp_path, subject)
    loaded = load_subject(tmp_path / "sub-0001", 4, assessments=["TPVT"])
    assert loaded.subject_id == "sub-0001"
    assert loaded.cluster_count == 4
    assert all(a == b for a, b in zip(loaded.clusters, subject.clusters))
    assert loaded.fa_maps[1] == subject.fa_maps[1]
    assert loaded.md_maps == {}
    assert loaded.scores == {"TPVT": 101.0}


def test_missing_cluster_file_is_empty_cluster(tmp_path, rng):
    write_subject(tmp_path, _subject(rng, clusters=8))
    (tmp_path / "sub-0001" / "cluster_0007.slb").unlink()
    loaded = load_subject(tmp_path / "sub-0001", 8)
    assert loaded.clusters[6].n == 0
    assert loaded.clusters[6].id == 7


def test_text_cluster_file_is_accepted(tmp_path):
    directory = tmp_path / "sub-0002"
    directory.mkdir()
    (directory / "cluster_0002.txt").write_text("0 0 0; 1 0 0\n", encoding="utf-8")
    loaded = load_subject(directory, 2)
    assert [c.n for c in loaded.clusters] == [0, 1]


def test_missing_assessment_is_named(tmp_path, rng):
    write_subject(tmp_path, _subject(rng))
    with pytest.raises(DataError, match="TORRT"):
        load_subject(tmp_path / "sub-0001", 4, assessments=["TORRT"])


def test_duplicate_cluster_index(tmp_path, rng):
    write_subject(tmp_path, _subject(rng))
    (tmp_path / "sub-0001" / "cluster_0002.txt").write_text("0 0 0; 1 0 0\n", encoding="utf-8")
    with pytest.raises(DataError, match="duplicate"):
        load_subject(tmp_path / "sub-0001", 4)


def test_cluster_index_beyond_atlas(tmp_path, rng):
    write_subject(tmp_path, _subject(rng, clusters=4))
    with pytest.raises(DataError, match="outside"):
        load_subject(tmp_path / "sub-0001", 3)


def test_unreadable_directory(tmp_path):
    with pytest.raises(DataError):
        load_subject(tmp_path / "nope", 4)


def test_corrupt_file_error_names_path(tmp_path, rng):
    write_subject(tmp_path, _subject(rng))
    (tmp_path / "sub-0001" / "cluster_0003.slb").write_bytes(b"SLB1\x05\x00\x00\x00")
    with pytest.raises(BundleFormatError) as info:
        load_subject(tmp_path / "sub-0001", 4)
    assert "cluster_0003.slb" in info.value.detail
    assert info.value.code == FormatErrorCode.TRUNCATED
