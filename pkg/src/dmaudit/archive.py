"""Web-archive client: Save Page Now, CDX search, raw replay, round trips."""

from __future__ import annotations

import logging
import os
import re
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence
from urllib.parse import quote, urlencode, urlsplit

from .assembler import AssemblyReport, assemble
from .playlist import MediaPlaylist
from .transport import HttpClient, TransportFailure

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://web.archive.org"
CDX_FIELDS = ("urlkey", "timestamp", "original", "mimetype", "status", "digest", "length")
TIMESTAMP_RE = re.compile(r"^\d{14}$")
SPN_PACE_SECONDS = 5.0


class ArchiveError(Exception):
    pass


class RateLimited(ArchiveError):
    def __init__(self, url: str, retry_after: int | None):
        self.url = url
        self.retry_after = retry_after
        super().__init__(f"rate limited submitting {url} (retry after {retry_after}s)")


class SubmitFailed(ArchiveError):
    def __init__(self, url: str, status: int | None, detail: str = ""):
        self.url = url
        self.status = status
        super().__init__(f"save of {url} failed: {status if status is not None else detail}")


class QueryFailed(ArchiveError):
    def __init__(self, status: int | None, detail: str = ""):
        self.status = status
        super().__init__(f"CDX query failed: {status if status is not None else detail}")


def parse_timestamp(ts: str) -> datetime:
    if not TIMESTAMP_RE.match(ts):
        raise ValueError(f"timestamp must be 14 digits: {ts!r}")
    return datetime.strptime(ts, "%Y%m%d%H%M%S").replace(tzinfo=timezone.utc)


def is_valid_timestamp(ts: str) -> bool:
    try:
        parse_timestamp(ts)
    except ValueError:
        return False
    return True


def surt_key(url: str) -> str:
    """Sort-friendly URL key in the CDX style: ``com,twimg,video)/dm_video/...``.

    Scheme, ``www.`` and default ports are dropped, and everything is lowercased.
    """
    if "://" not in url:
        url = "http://" + url
    parts = urlsplit(url)
    host = (parts.hostname or "").lower()
    if host.startswith("www."):
        host = host[4:]
    labels = ",".join(reversed(host.split(".")))
    port = parts.port
    if port is not None and port not in (80, 443):
        labels += f":{port}"
    rest = parts.path or "/"
    if parts.query:
        rest += "?" + parts.query
    return f"{labels}){rest}".lower()


@dataclass(frozen=True)
class CdxRecord:
    urlkey: str
    timestamp: str
    original: str
    mimetype: str
    status: str
    digest: str
    length: str

    @classmethod
    def from_line(cls, line: str) -> "CdxRecord":
        fields = line.split()
        if len(fields) != len(CDX_FIELDS):
            raise ValueError(f"expected {len(CDX_FIELDS)} fields, found {len(fields)}")
        if not is_valid_timestamp(fields[1]):
            raise ValueError(f"bad timestamp {fields[1]!r}")
        return cls(*fields)

    def to_line(self) -> str:
        return " ".join(getattr(self, f) for f in CDX_FIELDS)

    def snapshot(self, raw: bool = True) -> "SnapshotRef":
        return SnapshotRef(self.timestamp, self.original, raw)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in CDX_FIELDS}


@dataclass(frozen=True)
class MalformedLine:
    line: str
    reason: str


@dataclass
class CdxResult:
    records: list[CdxRecord] = field(default_factory=list)
    malformed: list[MalformedLine] = field(default_factory=list)

    def extend(self, other: "CdxResult") -> None:
        self.records.extend(other.records)
        self.malformed.extend(other.malformed)


def parse_cdx_lines(lines: Iterable[str]) -> CdxResult:
    """Split CDX text lines into records and rejects; nothing is dropped."""
    result = CdxResult()
    for line in lines:
        try:
            result.records.append(CdxRecord.from_line(line))
        except ValueError as exc:
            result.malformed.append(MalformedLine(line, str(exc)))
    return result


def _cdx_page(body: str, paginated: bool) -> tuple[list[str], str | None]:
    lines = body.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    resume = None
    if paginated and len(lines) >= 2 and lines[-2] == "":
        # trailer: blank line, then the resume key
        resume = lines[-1].strip() or None
        lines = lines[:-2]
    return [ln for ln in lines if ln.strip()], resume


def cdx_search(
    url: str,
    endpoint: str = DEFAULT_ENDPOINT,
    client: HttpClient | None = None,
    match_type: str = "prefix",
    page_size: int | None = None,
) -> CdxResult:
    if not url:
        raise ValueError("CDX search needs a non-empty URL or prefix")
    client = client or HttpClient()
    params = {"url": url, "matchType": match_type}
    if page_size:
        params.update(limit=str(page_size), showResumeKey="true")
    result = CdxResult()
    while True:
        query = urlencode(params, safe="/:", quote_via=quote)
        target = f"{endpoint.rstrip('/')}/cdx/search/cdx?{query}"
        client.pace(target)
        try:
            resp = client.get(target, follow_redirects=True)
        except TransportFailure as exc:
            raise QueryFailed(None, str(exc)) from exc
        if resp.status != 200:
            raise QueryFailed(resp.status)
        lines, resume = _cdx_page((resp.body or b"").decode("utf-8", "replace"), bool(page_size))
        result.extend(parse_cdx_lines(lines))
        if not resume:
            return result
        params["resumeKey"] = resume


def cdx_prefix_search(prefix: str, endpoint: str = DEFAULT_ENDPOINT, client: HttpClient | None = None,
                      page_size: int | None = None) -> CdxResult:
    return cdx_search(prefix, endpoint, client, "prefix", page_size)


@dataclass(frozen=True)
class SnapshotRef:
    timestamp: str
    original: str
    raw: bool = False

    def __post_init__(self):
        if not is_valid_timestamp(self.timestamp):
            raise ValueError(f"invalid capture timestamp {self.timestamp!r}")

    def to_dict(self) -> dict:
        return {"timestamp": self.timestamp, "original": self.original, "raw": self.raw}


def to_replay_url(s: SnapshotRef, endpoint: str = DEFAULT_ENDPOINT) -> str:
    flag = "id_" if s.raw else ""
    return f"{endpoint.rstrip('/')}/web/{s.timestamp}{flag}/{s.original}"


_REPLAY_RE = re.compile(r"/web/(\d{14})(id_)?/(.+)$", re.S)


def parse_replay_url(url: str, endpoint: str | None = None) -> SnapshotRef:
    """Inverse of :func:`to_replay_url`."""
    rest = url
    if endpoint is not None:
        base = endpoint.rstrip("/")
        if not url.startswith(base + "/web/"):
            raise ValueError(f"{url!r} is not a replay URL under {endpoint!r}")
        rest = url[len(base):]
    else:
        rest = url[url.index("/web/"):] if "/web/" in url else url
    m = _REPLAY_RE.match(rest)
    if not m:
        raise ValueError(f"not a replay URL: {url!r}")
    return SnapshotRef(m.group(1), m.group(3), m.group(2) is not None)


@dataclass
class SubmissionResult:
    url: str
    accepted: bool
    snapshot: SnapshotRef | None = None
    detail: str = ""
    attempts: int = 1

    def to_dict(self) -> dict:
        return {
            "url": self.url,
            "accepted": self.accepted,
            "snapshot": self.snapshot.to_dict() if self.snapshot else None,
            "detail": self.detail,
            "attempts": self.attempts,
        }


_CAPTURE_RE = re.compile(r"/web/(\d{14})/")


def spn_submit(url: str, endpoint: str = DEFAULT_ENDPOINT, client: HttpClient | None = None) -> SubmissionResult:
    """Ask the archive to capture *url* now.

    The capture timestamp is read from Content-Location (or Location/Link)
    when the archive discloses it; otherwise ``snapshot`` is None and the
    caller can look the capture up through the CDX index.
    """
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.hostname:
        raise ValueError(f"can only submit absolute http(s) URLs, got {url!r}")
    client = client or HttpClient()
    target = f"{endpoint.rstrip('/')}/save/{url}"
    try:
        resp = client.get(target)
    except TransportFailure as exc:
        raise SubmitFailed(url, None, str(exc)) from exc
    if resp.status == 429:
        retry = resp.header("retry-after")
        raise RateLimited(url, int(retry) if retry and retry.strip().isdigit() else None)
    if not 200 <= resp.status < 300:
        raise SubmitFailed(url, resp.status)
    snapshot = None
    for name in ("content-location", "location", "link"):
        value = resp.header(name)
        m = _CAPTURE_RE.search(value or "")
        if m:
            snapshot = SnapshotRef(m.group(1), url, raw=False)
            break
    detail = f"HTTP {resp.status}" + ("" if snapshot else "; capture timestamp not disclosed")
    return SubmissionResult(url, True, snapshot, detail)


def push_all(
    urls: Sequence[str],
    endpoint: str = DEFAULT_ENDPOINT,
    client: HttpClient | None = None,
    pace: float = SPN_PACE_SECONDS,
    max_retries: int = 3,
    sleep: Callable[[float], None] = time.sleep,
) -> list[SubmissionResult]:
    """Submit URLs one at a time.

    Against a non-loopback archive consecutive submissions are spaced by
    *pace* seconds. A 429 is retried after its Retry-After (or *pace*) at
    most *max_retries* times; other failures are recorded and skipped.
    """
    client = client or HttpClient()
    local = client.is_loopback(endpoint)
    results = []
    for i, url in enumerate(urls):
        if i and not local and pace > 0:
            sleep(pace)
        attempts = 0
        while True:
            attempts += 1
            try:
                result = spn_submit(url, endpoint, client)
            except RateLimited as exc:
                if attempts > max_retries:
                    result = SubmissionResult(url, False, None, str(exc))
                else:
                    wait = exc.retry_after if exc.retry_after is not None else pace
                    log.warning("rate limited; backing off %ss", wait)
                    sleep(wait)
                    continue
            except (SubmitFailed, ValueError) as exc:
                result = SubmissionResult(url, False, None, str(exc))
            result.attempts = attempts
            results.append(result)
            break
    return results


@dataclass(frozen=True)
class IdExtractor:
    """Pull the media id out of an original URI.

    The id is the path segment right after ``marker``. It must be numeric
    and must be followed by more path (``/<id>/...``) or a file extension
    (``/<id>.mp4``); a bare trailing number is treated as truncated.
    """

    marker: str = "dm_video"

    def leading_digits(self, original: str) -> str | None:
        segs = urlsplit(original if "://" in original else "http://" + original).path.split("/")
        try:
            i = segs.index(self.marker)
        except ValueError:
            return None
        if i + 1 >= len(segs):
            return None
        m = re.match(r"\d+", segs[i + 1])
        return m.group(0) if m else None

    def extract(self, original: str) -> tuple[str | None, str | None]:
        """Return ``(id, None)`` or ``(None, reason)``."""
        segs = urlsplit(original if "://" in original else "http://" + original).path.split("/")
        try:
            i = segs.index(self.marker)
        except ValueError:
            return None, f"no '{self.marker}/' segment"
        if i + 1 >= len(segs) or not segs[i + 1]:
            return None, "id segment missing"
        candidate = segs[i + 1]
        m = re.fullmatch(r"(\d+)(\.[A-Za-z0-9]+)?", candidate)
        if not m:
            return None, f"id segment {candidate!r} is not numeric"
        followed = i + 2 < len(segs) and segs[i + 2] != ""
        if not followed and m.group(2) is None:
            return None, f"id {candidate!r} is truncated (nothing follows it)"
        return m.group(1), None


_SORT_N_RE = re.compile(r"[ \t]*(-?)(\d*)(?:\.(\d*))?")


def sort_n_key(key: str) -> Decimal:
    """Numeric value GNU ``sort -n`` assigns to a key (C locale)."""
    m = _SORT_N_RE.match(key)
    sign, whole, frac = m.group(1), m.group(2), m.group(3) or ""
    if not whole and not frac:
        return Decimal(0)
    value = Decimal(f"{whole or '0'}.{frac or '0'}")
    return -value if sign else value


def pipeline_key(record: CdxRecord) -> Decimal:
    """Dedup key of the shell survey: field 10 onward of the rendered replay URL, split on '/'."""
    rendered = f"https://web.archive.org/web/{record.timestamp}/{record.original}"
    fields = rendered.split("/")
    return sort_n_key("/".join(fields[9:])) if len(fields) > 9 else Decimal(0)


@dataclass
class SurveySummary:
    unique_ids: list[str]
    earliest: SnapshotRef | None
    excluded_count: int
    malformed: list[CdxRecord]
    line_count: int
    considered: int = 0

    def to_dict(self, redact: bool = True, extractor: IdExtractor | None = None) -> dict:
        extractor = extractor or IdExtractor()

        def describe(ts: str, original: str) -> dict:
            d = {"timestamp": ts, "media_id": extractor.leading_digits(original)}
            if not redact:
                d["original"] = original
            return d

        return {
            "unique_id_count": len(self.unique_ids),
            "unique_ids": list(self.unique_ids),
            "line_count": self.line_count,
            "excluded_count": self.excluded_count,
            "considered": self.considered,
            "earliest": describe(self.earliest.timestamp, self.earliest.original) if self.earliest else None,
            "malformed": [describe(r.timestamp, r.original) for r in self.malformed],
            "redacted": redact,
        }


def dedupe_by_media_id(
    records: Iterable[CdxRecord],
    id_extractor: IdExtractor | None = None,
    exclude: Iterable[str] = (),
) -> SurveySummary:
    """Collapse captures to distinct media ids.

    ``line_count`` reproduces ``sort -n -k 10 -t / -u | wc -l`` over the
    rendered replay URLs, so truncated ids still count once there while
    appearing in ``malformed`` rather than ``unique_ids``.
    """
    extractor = id_extractor or IdExtractor()
    excluded_ids = set(exclude)
    unique: set[str] = set()
    keys: set[Decimal] = set()
    malformed: list[CdxRecord] = []
    excluded = considered = 0
    earliest: CdxRecord | None = None
    for r in records:
        media_id, problem = extractor.extract(r.original)
        if (media_id or extractor.leading_digits(r.original)) in excluded_ids:
            excluded += 1
            continue
        considered += 1
        keys.add(pipeline_key(r))
        if problem:
            malformed.append(r)
            continue
        unique.add(media_id)
        if earliest is None or (r.timestamp, r.original) < (earliest.timestamp, earliest.original):
            earliest = r
    malformed.sort(key=lambda r: (r.timestamp, r.original))
    return SurveySummary(
        unique_ids=sorted(unique, key=int),
        earliest=earliest.snapshot(raw=False) if earliest else None,
        excluded_count=excluded,
        malformed=malformed,
        line_count=len(keys),
        considered=considered,
    )


@dataclass(frozen=True)
class CapturePolicy:
    """Choose the earliest capture at or after ``after``, else the latest one.

    With ``after`` unset the latest capture wins.
    """

    after: str | None = None

    def select(self, records: Sequence[CdxRecord]) -> CdxRecord | None:
        good = sorted((r for r in records if r.status.startswith("2")), key=lambda r: r.timestamp)
        if not good:
            return None
        if self.after:
            for r in good:
                if r.timestamp >= self.after:
                    return r
        return good[-1]


@dataclass
class PartComparison:
    uri: str
    live_length: int | None
    archived_length: int | None
    timestamp: str | None = None
    replay_url: str | None = None

    def to_dict(self) -> dict:
        return {
            "uri": self.uri,
            "live_length": self.live_length,
            "archived_length": self.archived_length,
            "timestamp": self.timestamp,
            "replay_url": self.replay_url,
        }


@dataclass
class RoundTripReport:
    live_digest: str
    archived_digest: str | None
    identical: bool
    missing_captures: list[str]
    per_part: list[PartComparison]
    archived_output: str | None = None
    archived_total_bytes: int | None = None

    def to_dict(self) -> dict:
        return {
            "live_digest": self.live_digest,
            "archived_digest": self.archived_digest,
            "identical": self.identical,
            "missing_captures": list(self.missing_captures),
            "per_part": [p.to_dict() for p in self.per_part],
            "archived_output": self.archived_output,
            "archived_total_bytes": self.archived_total_bytes,
        }


def roundtrip_verify(
    p: MediaPlaylist,
    live_report: AssemblyReport,
    endpoint: str = DEFAULT_ENDPOINT,
    client: HttpClient | None = None,
    policy: CapturePolicy | None = None,
    output: str | os.PathLike | None = None,
) -> RoundTripReport:
    """Rebuild the video from raw archived captures and compare with the live build.

    Missing captures are recorded, never raised. The archived file is
    written to *output* when given, else to a temporary file that is
    discarded.
    """
    client = client or HttpClient()
    policy = policy or CapturePolicy(after=live_report.fetched_at)
    uris = p.part_uris()
    if live_report.part_uris and list(live_report.part_uris) != uris:
        raise ValueError("live report was not produced from this playlist")
    live_lengths: list[int | None] = list(live_report.part_lengths) + [None] * (len(uris) - len(live_report.part_lengths))

    per_part: list[PartComparison] = []
    missing: list[str] = []
    with tempfile.TemporaryDirectory() as tmp:
        paths = []
        for i, uri in enumerate(uris):
            cmp = PartComparison(uri, live_lengths[i], None)
            per_part.append(cmp)
            try:
                capture = policy.select(cdx_search(uri, endpoint, client, match_type="exact").records)
            except QueryFailed as exc:
                log.warning("CDX lookup for %s failed: %s", uri, exc)
                capture = None
            if capture is None:
                missing.append(uri)
                continue
            cmp.timestamp = capture.timestamp
            cmp.replay_url = to_replay_url(SnapshotRef(capture.timestamp, capture.original, raw=True), endpoint)
            path = Path(tmp) / f"{i:02d}.part"
            try:
                with open(path, "wb") as fh:
                    resp = client.get(cmp.replay_url, sink=fh, follow_redirects=True)
            except TransportFailure as exc:
                log.warning("replay fetch %s failed: %s", cmp.replay_url, exc)
                missing.append(uri)
                continue
            if resp.status != 200:
                missing.append(uri)
                continue
            cmp.archived_length = resp.body_length
            paths.append(path)

        if missing:
            return RoundTripReport(live_report.digest, None, False, missing, per_part)
        target = Path(output) if output else Path(tmp) / "archived.mp4"
        archived = assemble(paths[0], paths[1:], target)

    lengths_equal = all(c.live_length == c.archived_length for c in per_part)
    identical = archived.digest == live_report.digest and lengths_equal
    return RoundTripReport(
        live_digest=live_report.digest,
        archived_digest=archived.digest,
        identical=identical,
        missing_captures=[],
        per_part=per_part,
        archived_output=str(output) if output else None,
        archived_total_bytes=archived.total_bytes,
    )


def summary_from_dict(d: Mapping) -> SurveySummary:
    return SurveySummary(
        unique_ids=list(d["unique_ids"]),
        earliest=None,
        excluded_count=d["excluded_count"],
        malformed=[],
        line_count=d["line_count"],
    )
