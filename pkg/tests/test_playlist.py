from decimal import Decimal
from importlib import resources

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmaudit.playlist import (
    DanglingExtinf,
    InvalidUri,
    MalformedTag,
    MediaPlaylist,
    MissingHeader,
    PlaylistError,
    PlaylistType,
    Segment,
    is_complete,
    lint_dm_path_convention,
    lint_target_duration,
    parse_media_playlist,
    resolve_uri,
    serialize_media_playlist,
    total_duration,
)

BASE = "https://video.twimg.com/dm_video/1600877027330064385/pl/320x180/Vn4h391lbQ0jfr1D.m3u8?container=fmp4"
STUDY_TEXT = resources.files("dmaudit.data").joinpath("study_playlist.m3u8").read_text(encoding="utf-8")


@pytest.fixture(scope="module")
def study():
    return parse_media_playlist(STUDY_TEXT, BASE)


def test_study_playlist_header_fields(study):
    assert len(STUDY_TEXT.encode()) == 1177
    assert (study.version, study.media_sequence, study.target_duration) == (6, 0, 3)
    assert study.playlist_type is PlaylistType.VOD
    assert study.init_section_uri == (
        "https://video.twimg.com/dm_video/1600877027330064385/vid/0/0/320x180/jZY0JeLERXPOC4qe.mp4"
    )
    assert study.has_endlist and is_complete(study)


def test_study_playlist_segments(study):
    assert len(study.segments) == 11
    assert [s.duration_ms for s in study.segments] == [3000] * 10 + [2100]
    assert [s.index for s in study.segments] == list(range(11))
    assert study.segments[0].uri == (
        "https://video.twimg.com/dm_video/1600877027330064385/vid/0/3000/320x180/1lmZtezFzjRRYziE.m4s"
    )
    assert all("container=fmp4" not in s.uri for s in study.segments)
    assert total_duration(study) == Decimal("32.100")


def test_minimal_playlist():
    p = parse_media_playlist("#EXTM3U\n#EXT-X-ENDLIST\n", BASE)
    assert p.segments == () and p.init_section_uri is None and p.has_endlist
    assert total_duration(p) == 0


def test_crlf_and_trailing_whitespace_accepted():
    text = STUDY_TEXT.replace("\n", "  \r\n")
    assert parse_media_playlist(text, BASE) == parse_media_playlist(STUDY_TEXT, BASE)


def test_unknown_tags_preserved_not_fatal():
    text = "#EXTM3U\n#EXT-X-INDEPENDENT-SEGMENTS\n#EXTINF:1.5,\na.m4s\n#EXT-X-FOO:bar\n"
    p = parse_media_playlist(text, BASE)
    assert "#EXT-X-INDEPENDENT-SEGMENTS" in p.extra_tags and "#EXT-X-FOO:bar" in p.extra_tags
    assert p.segments[0].duration_ms == 1500
    assert not p.has_endlist and not is_complete(p)


@pytest.mark.parametrize(
    "text, error",
    [
        ("", MissingHeader),
        ("#EXT-X-VERSION:6\n", MissingHeader),
        ("#EXTM3U\n#EXTINF:abc,\nx.m4s\n", MalformedTag),
        ("#EXTM3U\n#EXTINF:-1,\nx.m4s\n", MalformedTag),
        ("#EXTM3U\n#EXTINF:0,\nx.m4s\n", MalformedTag),
        ('#EXTM3U\n#EXT-X-MAP:BYTERANGE="1@0"\n', MalformedTag),
        ("#EXTM3U\n#EXT-X-MAP:URI=unquoted\n", MalformedTag),
        ("#EXTM3U\n#EXT-X-STREAM-INF:BANDWIDTH=1\nv.m3u8\n", MalformedTag),
        ("#EXTM3U\n#EXTINF:3.0,\n", DanglingExtinf),
        ("#EXTM3U\n#EXTINF:3.0,\n#EXTINF:3.0,\nx.m4s\n", DanglingExtinf),
        ("#EXTM3U\n#EXT-X-TARGETDURATION:three\n", MalformedTag),
    ],
)
def test_named_errors(text, error):
    with pytest.raises(error):
        parse_media_playlist(text, BASE)


def test_master_playlist_note():
    with pytest.raises(MalformedTag, match="master playlist not supported"):
        parse_media_playlist("#EXTM3U\n#EXT-X-STREAM-INF:BANDWIDTH=1\nv.m3u8\n", BASE)


# RFC 3986 section 5.4.1 "normal examples", base http://a/b/c/d;p?q
RFC3986_NORMAL = [
    ("g:h", "g:h"),
    ("g", "http://a/b/c/g"),
    ("./g", "http://a/b/c/g"),
    ("g/", "http://a/b/c/g/"),
    ("/g", "http://a/g"),
    ("//g", "http://g"),
    ("?y", "http://a/b/c/d;p?y"),
    ("g?y", "http://a/b/c/g?y"),
    ("#s", "http://a/b/c/d;p?q#s"),
    ("g#s", "http://a/b/c/g#s"),
    ("g?y#s", "http://a/b/c/g?y#s"),
    (";x", "http://a/b/c/;x"),
    ("g;x", "http://a/b/c/g;x"),
    ("g;x?y#s", "http://a/b/c/g;x?y#s"),
    ("", "http://a/b/c/d;p?q"),
    (".", "http://a/b/c/"),
    ("./", "http://a/b/c/"),
    ("..", "http://a/b/"),
    ("../", "http://a/b/"),
    ("../g", "http://a/b/g"),
    ("../..", "http://a/"),
    ("../../", "http://a/"),
    ("../../g", "http://a/g"),
]


@pytest.mark.parametrize("reference, expected", RFC3986_NORMAL)
def test_rfc3986_normal_examples(reference, expected):
    assert resolve_uri("http://a/b/c/d;p?q", reference) == expected


def test_resolve_study_segment():
    ref = "/dm_video/1600877027330064385/vid/0/3000/320x180/1lmZtezFzjRRYziE.m4s"
    assert resolve_uri(BASE, ref) == "https://video.twimg.com" + ref
    absolute = "https://example.org/x.m4s"
    assert resolve_uri(BASE, absolute) == absolute


@pytest.mark.parametrize("bad", ["a b.m4s", "x\x00.m4s", "http://host:99999999/x", "tab\there"])
def test_resolve_rejects_unresolvable(bad):
    with pytest.raises(InvalidUri):
        resolve_uri(BASE, bad)


def test_resolve_requires_absolute_base():
    with pytest.raises(InvalidUri):
        resolve_uri("/relative/base", "x")


_segment_chars = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_.", min_size=1, max_size=12)
_refs = st.one_of(
    _segment_chars,
    st.builds(lambda a, b: f"/{a}/{b}", _segment_chars, _segment_chars),
    st.builds(lambda a: f"../{a}", _segment_chars),
    st.builds(lambda a: f"./{a}?q=1", _segment_chars),
)


@settings(max_examples=200, deadline=None)
@given(_refs)
def test_resolution_idempotent(ref):
    once = resolve_uri(BASE, ref)
    assert resolve_uri(BASE, once) == once


# random playlists for round-trip and duration oracles

_playlists = st.builds(
    lambda version, seq, durations, names, has_map, endlist, ptype: (
        version, seq, durations, names[: len(durations)], has_map, endlist, ptype
    ),
    st.integers(1, 9),
    st.integers(0, 10_000),
    st.lists(st.integers(1, 20_000), max_size=30),
    st.lists(_segment_chars, min_size=30, max_size=30),
    st.booleans(),
    st.booleans(),
    st.sampled_from(["VOD", "EVENT", None]),
)


def _render(spec) -> str:
    version, seq, durations, names, has_map, endlist, ptype = spec
    lines = ["#EXTM3U", f"#EXT-X-VERSION:{version}", f"#EXT-X-MEDIA-SEQUENCE:{seq}",
             f"#EXT-X-TARGETDURATION:{max([1] + [-(-d // 1000) for d in durations])}"]
    if ptype:
        lines.append(f"#EXT-X-PLAYLIST-TYPE:{ptype}")
    if has_map:
        lines.append('#EXT-X-MAP:URI="init.mp4"')
    for d, n in zip(durations, names):
        lines.append(f"#EXTINF:{d // 1000}.{d % 1000:03d},")
        lines.append(f"seg/{n}.m4s")
    if endlist:
        lines.append("#EXT-X-ENDLIST")
    return "\n".join(lines) + "\n"


@settings(max_examples=200, deadline=None)
@given(_playlists)
def test_serialize_roundtrip(spec):
    first = parse_media_playlist(_render(spec), BASE)
    again = parse_media_playlist(serialize_media_playlist(first), BASE)
    assert again == first


@settings(max_examples=200, deadline=None)
@given(_playlists)
def test_total_duration_matches_loop_sum(spec):
    p = parse_media_playlist(_render(spec), BASE)
    expected = Decimal(0)
    for d in spec[2]:
        expected += Decimal(d) / 1000
    assert total_duration(p) == expected
    assert [s.index for s in p.segments] == list(range(len(spec[2])))


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=200))
def test_parse_totality(text):
    try:
        parse_media_playlist(text, BASE)
    except (MissingHeader, MalformedTag, DanglingExtinf):
        pass


def test_corpus_totality_and_roundtrip(study):
    again = parse_media_playlist(serialize_media_playlist(study), BASE)
    assert again == study


def test_dm_path_lint_study_clean(study):
    assert lint_dm_path_convention(study) == []
    last = study.segments[-1]
    assert "/vid/30000/32100/" in last.uri
    assert total_duration(study) == Decimal(32100) / 1000


def test_dm_path_lint_one_mutation():
    mutated = STUDY_TEXT.replace("#EXTINF:3.000,\n/dm_video/1600877027330064385/vid/9000/",
                                 "#EXTINF:2.900,\n/dm_video/1600877027330064385/vid/9000/")
    findings = lint_dm_path_convention(parse_media_playlist(mutated, BASE))
    assert [(f.code, f.segment_index) for f in findings] == [("duration-mismatch", 3)]


def test_dm_path_lint_opaque_names():
    p = parse_media_playlist("#EXTM3U\n#EXTINF:3.0,\nabc.m4s\n#EXTINF:3.0,\ndef.m4s\n", BASE)
    findings = lint_dm_path_convention(p)
    assert [f.code for f in findings] == ["convention-not-detected"]


def test_target_duration_lint_is_warning():
    p = parse_media_playlist("#EXTM3U\n#EXT-X-TARGETDURATION:2\n#EXTINF:3.2,\na.m4s\n", BASE)
    findings = lint_target_duration(p)
    assert len(findings) == 1 and findings[0].segment_index == 0


def test_segment_duration_positive():
    with pytest.raises(ValueError):
        Segment(0, 0, "https://x/y")


def test_playlist_error_carries_line_number():
    with pytest.raises(PlaylistError) as info:
        parse_media_playlist("#EXTM3U\n#EXT-X-VERSION:6\n#EXTINF:x,\na\n", BASE)
    assert info.value.line_number == 3


def test_to_dict_is_json_ready(study):
    import json

    d = json.loads(json.dumps(study.to_dict()))
    assert d["segments"][-1]["duration"] == "2.100"
    assert isinstance(study, MediaPlaylist)
