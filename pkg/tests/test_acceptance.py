"""Exit criteria, each with its tolerance and runtime budget.

The terminal summary prints one PASS/FAIL line per criterion (see conftest).
"""
import hashlib
import random
import string
import time
from decimal import Decimal
from importlib import resources

import pytest

from dmaudit.archive import dedupe_by_media_id, parse_cdx_lines, push_all, roundtrip_verify
from dmaudit.assembler import assemble, download_and_assemble, verify_equivalence
from dmaudit.mockserver import IMAGE_URL, PART_LENGTHS, PLAYLIST_URL, STUDY_DM_ID
from dmaudit.mockserver.scenario import STUDY_CLOCK, fixture_bytes, study_playlist_text
from dmaudit.playlist import PlaylistType, parse_media_playlist, resolve_uri, total_duration
from dmaudit.probe import (
    EXPIRED,
    FULL_SESSION,
    NO_COOKIE,
    NO_REFERER,
    THIRD_PARTY,
    OutcomeKind,
    PlainHttpResult,
    ProbeOutcome,
    build_default_matrix,
    classify,
    run_matrix,
)
from dmaudit.tlsaudit import (
    EMPTY_SNAPSHOT,
    CspConnectSrc,
    PreloadStatus,
    StsPolicy,
    Verdict,
    audit_https,
    csp_connect_src_allows,
    evaluate_https_enforcement,
)
from test_playlist import RFC3986_NORMAL

ARCHIVE = "https://web.archive.org"
CDX_TEXT = resources.files("dmaudit.data").joinpath("dm_video_cdx.txt").read_text(encoding="utf-8")


class Budget:
    """Context manager asserting a wall-clock limit in seconds."""

    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.2f}s, budget {self.seconds}s"


def naive_concat(parts):
    out = b""
    for p in parts:
        out += p
    return out


@pytest.mark.acceptance(1, "playlist fidelity")
def test_playlist_fidelity():
    text = study_playlist_text()
    assert len(text.encode()) == 1177
    with Budget(1):
        p = parse_media_playlist(text, PLAYLIST_URL)
    assert (p.version, p.media_sequence, p.target_duration) == (6, 0, 3)
    assert p.playlist_type is PlaylistType.VOD
    assert p.init_section_uri is not None
    assert len(p.segments) == 11
    assert total_duration(p) == Decimal("32.100")


@pytest.mark.acceptance(2, "assembly fidelity")
def test_assembly_fidelity(mock, client_for, tmp_path):
    assert list(PART_LENGTHS) == [1130, 37919, 35423, 36960, 43395, 47333, 41711, 38884, 36449, 32279, 32413, 22617]
    playlist = parse_media_playlist(study_playlist_text(), PLAYLIST_URL)
    with Budget(5):
        report = download_and_assemble(playlist, tmp_path / "video.mp4", client_for(mock))
    oracle = naive_concat(fixture_bytes(n, f"part-{i:02d}") for i, n in enumerate(PART_LENGTHS))
    assert report.total_bytes == 406513 == len(oracle)
    assert report.digest == hashlib.sha256(oracle).hexdigest()
    assert (tmp_path / "video.mp4").read_bytes() == oracle


@pytest.mark.acceptance(3, "protection classification")
def test_protection_classification(mock, client_for):
    client = client_for(mock)
    with Budget(5):
        image = run_matrix(IMAGE_URL, build_default_matrix(), client)
        video = run_matrix(PLAYLIST_URL, build_default_matrix(), client)
    assert image.labels() == {
        FULL_SESSION: "200", NO_COOKIE: "401", NO_REFERER: "404", THIRD_PARTY: "404", EXPIRED: "EMPTY_REPLY",
    }
    prof = classify(image)
    assert prof.cookie_required is True and prof.referer_required is True
    assert prof.party_bound is True and prof.session_liveness_bound is True
    assert prof.unauthenticated_access is False
    assert set(video.labels().values()) == {"200"}
    assert classify(video).unauthenticated_access is True


@pytest.mark.acceptance(4, "archive round trip")
def test_archive_round_trip(mock, client_for, tmp_path):
    client = client_for(mock)
    playlist = parse_media_playlist(study_playlist_text(), PLAYLIST_URL)
    with Budget(10):
        live = download_and_assemble(playlist, tmp_path / "live.mp4", client)
        results = push_all(playlist.part_uris(), ARCHIVE, client, sleep=lambda s: None)
        assert len(results) == 12 and all(r.accepted for r in results)
        report = roundtrip_verify(playlist, live, ARCHIVE, client, output=tmp_path / "archived.mp4")
        assert report.identical
        assert verify_equivalence(tmp_path / "live.mp4", tmp_path / "archived.mp4").identical

        rng = random.Random(4)
        uri = rng.choice(playlist.part_uris())
        offset = rng.randrange(PART_LENGTHS[playlist.part_uris().index(uri)])
        mock.state.corrupt_capture(STUDY_CLOCK, uri, offset)
        broken = roundtrip_verify(playlist, live, ARCHIVE, client, output=tmp_path / "broken.mp4")
    assert broken.identical is False
    assert not verify_equivalence(tmp_path / "live.mp4", tmp_path / "broken.mp4").identical


@pytest.mark.acceptance(5, "CDX survey")
def test_cdx_survey():
    with Budget(1):
        summary = dedupe_by_media_id(parse_cdx_lines(CDX_TEXT.splitlines()).records, exclude=[STUDY_DM_ID])
    assert summary.line_count == 103
    assert len(summary.malformed) == 1
    assert summary.earliest.timestamp == "20160304122159"


def _plain(served: bool) -> PlainHttpResult:
    ok = ProbeOutcome(OutcomeKind.STATUS, status=200, body_length=5)
    http = ok if served else ProbeOutcome(OutcomeKind.STATUS, status=301, body_length=0)
    return PlainHttpResult(served, http, ok, served)


TRUTH_TABLE = {
    # (plain served, STS present, preloaded) -> verdict
    (False, False, False): Verdict.ENFORCED,
    (False, False, True): Verdict.ENFORCED,
    (False, True, False): Verdict.ENFORCED,
    (False, True, True): Verdict.ENFORCED,
    (True, False, False): Verdict.NOT_ENFORCED,
    (True, False, True): Verdict.ENFORCED,
    (True, True, False): Verdict.HEADER_ONLY,
    (True, True, True): Verdict.ENFORCED,
}


@pytest.mark.acceptance(6, "HTTPS enforcement")
def test_https_enforcement(study_mock, client_for):
    client = client_for(study_mock)
    with Budget(2):
        audit = audit_https(PLAYLIST_URL, client, EMPTY_SNAPSHOT)
        got = {
            (served, sts, pre): evaluate_https_enforcement(
                _plain(served), StsPolicy(631138519) if sts else None, PreloadStatus("video.twimg.com", pre)
            ).verdict
            for served in (False, True) for sts in (False, True) for pre in (False, True)
        }
    assert audit.sts.max_age == 631138519
    assert audit.plain.served
    assert audit.enforcement.verdict is Verdict.HEADER_ONLY
    assert got == TRUTH_TABLE


def _twimg_url(rng: random.Random) -> str:
    labels = ["".join(rng.choices(string.ascii_lowercase + string.digits, k=rng.randint(1, 10)))
              for _ in range(rng.randint(1, 3))]
    path = "/".join("".join(rng.choices(string.ascii_letters + string.digits, k=rng.randint(1, 12)))
                    for _ in range(rng.randint(0, 4)))
    return f"https://{'.'.join(labels)}.twimg.com/{path}"


@pytest.mark.acceptance(7, "CSP evaluation")
def test_csp_evaluation():
    segment = "https://video.twimg.com/dm_video/1600877027330064385/vid/0/3000/320x180/1lmZtezFzjRRYziE.m4s"
    rng = random.Random(7)
    urls = [_twimg_url(rng) for _ in range(100)]
    with Budget(1):
        csp = CspConnectSrc.parse("https://*.twimg.com")
        assert csp_connect_src_allows(csp, segment)
        assert not csp_connect_src_allows(csp, "http://" + segment[len("https://"):])
        for url in urls:
            assert csp_connect_src_allows(csp, url), url
            assert not csp_connect_src_allows(csp, "http://" + url[len("https://"):]), url


def _random_outcome(rng: random.Random) -> ProbeOutcome:
    kind = rng.choice(list(OutcomeKind))
    if kind is OutcomeKind.STATUS:
        return ProbeOutcome(kind, status=rng.choice([200, 204, 301, 401, 403, 404, 500]),
                            body_length=rng.choice([0, 1, 1177]))
    return ProbeOutcome(kind)


@pytest.mark.acceptance(8, "property suites")
def test_property_suites(tmp_path):
    rng = random.Random(8)
    with Budget(30):
        for reference, expected in RFC3986_NORMAL:
            assert resolve_uri("http://a/b/c/d;p?q", reference) == expected

        for i in range(1000):
            parts = [rng.randbytes(rng.randint(0, 400)) for _ in range(rng.randint(1, 12))]
            report = assemble(parts[0], parts[1:], tmp_path / "a")
            data = (tmp_path / "a").read_bytes()
            assert report.total_bytes == len(data) == sum(len(p) for p in parts)
            assert data == naive_concat(parts)
            # an independent second fixture, equal about half the time
            other = list(parts) if rng.random() < 0.5 else [rng.randbytes(len(p)) for p in parts]
            report_b = assemble(other[0], other[1:], tmp_path / "b")
            same = (tmp_path / "b").read_bytes() == data
            assert (report_b.digest == report.digest) == same
            assert verify_equivalence(tmp_path / "a", tmp_path / "b").identical == same

        names = [FULL_SESSION, NO_COOKIE, NO_REFERER, THIRD_PARTY, EXPIRED]
        for _ in range(500):
            chosen = [FULL_SESSION, NO_COOKIE] + [n for n in names[2:] if rng.random() < 0.7]
            matrix = {n: _random_outcome(rng) for n in chosen}
            shuffled = list(matrix.items())
            rng.shuffle(shuffled)
            assert classify(matrix).verdicts() == classify(dict(shuffled)).verdicts()

        records = parse_cdx_lines(CDX_TEXT.splitlines()).records
        baseline = dedupe_by_media_id(records, exclude=[STUDY_DM_ID])
        for _ in range(50):
            shuffled = list(records)
            rng.shuffle(shuffled)
            s = dedupe_by_media_id(shuffled, exclude=[STUDY_DM_ID])
            assert (s.line_count, set(s.unique_ids), s.earliest.timestamp) == (
                baseline.line_count, set(baseline.unique_ids), baseline.earliest.timestamp)
