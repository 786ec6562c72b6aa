import hashlib
import io
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmaudit.assembler import (
    AssemblyIOError,
    AssemblyReport,
    FetchFailed,
    assemble,
    download_and_assemble,
    export_manifest,
    fetch_parts,
    file_digest,
    manifest_entries,
    mark_partial,
    parse_manifest,
    part_filenames,
    verify_equivalence,
)
from dmaudit.mockserver import PART_LENGTHS, PLAYLIST_URL
from dmaudit.mockserver.scenario import fixture_bytes, study_part_paths, study_playlist_text
from dmaudit.playlist import parse_media_playlist


def naive_concat(parts):
    """Oracle: the shell's ``cat 00.mp4 01.m4s ... > out`` in memory."""
    out = b""
    for p in parts:
        out += p
    return out


@pytest.fixture(scope="module")
def study_playlist():
    return parse_media_playlist(study_playlist_text(), PLAYLIST_URL)


@pytest.fixture(scope="module")
def study_blobs():
    return [fixture_bytes(n, f"part-{i:02d}") for i, n in enumerate(PART_LENGTHS)]


_parts = st.lists(st.binary(max_size=300), min_size=1, max_size=12)


@settings(max_examples=100, deadline=None)
@given(_parts)
def test_assemble_matches_naive_concatenation(tmp_path_factory, parts):
    out = tmp_path_factory.mktemp("a") / "out.mp4"
    report = assemble(parts[0], parts[1:], out)
    expected = naive_concat(parts)
    assert out.read_bytes() == expected
    assert report.total_bytes == len(expected) == sum(report.part_lengths)
    assert report.part_lengths == [len(p) for p in parts]
    assert report.part_count == len(parts)
    assert report.digest == hashlib.sha256(expected).hexdigest()


def test_assemble_accepts_paths_and_streams(tmp_path):
    a = tmp_path / "a"
    a.write_bytes(b"init")
    report = assemble(a, [io.BytesIO(b"one"), bytearray(b"two")], tmp_path / "out")
    assert (tmp_path / "out").read_bytes() == b"initonetwo"
    assert report.part_lengths == [4, 3, 3]


def test_failed_assembly_leaves_no_output(tmp_path):
    with pytest.raises(AssemblyIOError):
        assemble(b"x", [tmp_path / "missing"], tmp_path / "out")
    assert list(tmp_path.iterdir()) == []


def test_unwritable_destination(tmp_path):
    with pytest.raises(AssemblyIOError):
        assemble(b"x", [], tmp_path / "no-such-dir" / "out")


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=200), st.binary(max_size=200))
def test_digest_equality_iff_byte_equality(tmp_path_factory, a, b):
    d = tmp_path_factory.mktemp("d")
    ra = assemble(a, [], d / "a")
    rb = assemble(b, [], d / "b")
    assert (ra.digest == rb.digest) == (a == b)
    eq = verify_equivalence(d / "a", d / "b")
    assert eq.identical == (a == b)


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=1, max_size=200_000).flatmap(
    lambda data: st.tuples(st.just(data), st.integers(0, len(data) - 1))))
def test_first_diff_offset_is_the_flipped_byte(tmp_path_factory, case):
    data, k = case
    d = tmp_path_factory.mktemp("f")
    (d / "a").write_bytes(data)
    flipped = bytearray(data)
    flipped[k] ^= 0xFF
    (d / "b").write_bytes(bytes(flipped))
    eq = verify_equivalence(d / "a", d / "b")
    assert not eq.identical and eq.first_diff_offset == k


def test_prefix_difference_at_shorter_length(tmp_path):
    (tmp_path / "a").write_bytes(b"abc")
    (tmp_path / "b").write_bytes(b"abcdef")
    eq = verify_equivalence(tmp_path / "a", tmp_path / "b")
    assert (eq.identical, eq.first_diff_offset, eq.length_a, eq.length_b) == (False, 3, 3, 6)


def test_report_dict_roundtrip(tmp_path):
    report = assemble(b"a", [b"bc"], tmp_path / "o")
    report.part_uris = ["https://x/0", "https://x/1"]
    report.fetched_at = "20221208194342"
    assert AssemblyReport.from_dict(report.to_dict()) == report
    assert AssemblyReport.from_dict({"assembly": report.to_dict()}) == report


def test_manifest_names_and_roundtrip(study_playlist):
    entries = manifest_entries(study_playlist)
    assert [e.local_name for e in entries][:3] == ["00.mp4", "01.m4s", "02.m4s"]
    assert entries[-1].local_name == "11.m4s"
    assert parse_manifest(export_manifest(study_playlist)) == entries


def test_part_filenames_widen():
    names = part_filenames([f"https://x/{i}" for i in range(120)])
    assert names[0] == "000.mp4" and names[119] == "119.m4s"


def test_manifest_rejects_bad_lines():
    with pytest.raises(ValueError):
        parse_manifest("00.mp4\n")


def test_study_assembly_matches_oracle(tmp_path, client, study_playlist, study_blobs):
    out = tmp_path / "video.mp4"
    report = download_and_assemble(study_playlist, out, client)
    expected = naive_concat(study_blobs)
    assert report.part_lengths == list(PART_LENGTHS)
    assert report.total_bytes == 406513 == len(expected)
    assert out.read_bytes() == expected
    assert report.digest == file_digest(out)
    assert report.part_uris == study_playlist.part_uris()
    assert report.fetched_at and len(report.fetched_at) == 14


def test_fetch_uses_no_request_headers(mock, client_for, tmp_path, study_playlist):
    fetch_parts(manifest_entries(study_playlist), tmp_path, client_for(mock))
    entries = mock.trace()
    assert len(entries) == 12
    for e in entries:
        assert [k.lower() for k, _ in e["headers"]] == ["host"]


def test_missing_part_fails_and_partials_kept(mock, client_for, tmp_path, study_playlist):
    mock.state.remove_route(study_part_paths()[5])
    fetched = fetch_parts(manifest_entries(study_playlist), tmp_path / "parts", client_for(mock))
    failed = [f for f in fetched if not f.ok]
    assert [f.entry.local_name for f in failed] == ["05.m4s"] and failed[0].status == 404
    kept = mark_partial(fetched)
    assert len(kept) == 11 and all(p.name.endswith(".partial") for p in kept)
    with pytest.raises(FetchFailed):
        download_and_assemble(study_playlist, tmp_path / "out.mp4", client_for(mock))
    assert not (tmp_path / "out.mp4").exists()


def test_results_in_manifest_order_despite_concurrency(client, tmp_path, study_playlist):
    fetched = fetch_parts(manifest_entries(study_playlist), tmp_path, client, concurrency=12)
    assert [f.entry.local_name for f in fetched] == [e.local_name for e in manifest_entries(study_playlist)]
    assert [f.length for f in fetched] == list(PART_LENGTHS)
    assert all(Path(f.path).exists() for f in fetched)
