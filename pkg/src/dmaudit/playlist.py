"""HLS Media Playlist parsing for fragmented-MP4 renditions.

Covers the tag subset a single-rendition fMP4 VOD playlist uses
(EXT-X-VERSION, EXT-X-MEDIA-SEQUENCE, EXT-X-TARGETDURATION,
EXT-X-PLAYLIST-TYPE, EXT-X-MAP, EXTINF, EXT-X-ENDLIST). Other tags are
kept verbatim in ``MediaPlaylist.extra_tags``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from enum import Enum
from urllib.parse import urljoin, urlsplit

__all__ = [
    "PlaylistError",
    "MissingHeader",
    "MalformedTag",
    "DanglingExtinf",
    "InvalidUri",
    "PlaylistType",
    "Segment",
    "MediaPlaylist",
    "Finding",
    "parse_media_playlist",
    "serialize_media_playlist",
    "resolve_uri",
    "total_duration",
    "lint_dm_path_convention",
    "lint_target_duration",
    "is_complete",
]

MS_PER_SECOND = 1000


class PlaylistError(ValueError):
    """Base class for playlist parse failures."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class MissingHeader(PlaylistError):
    pass


class MalformedTag(PlaylistError):
    pass


class DanglingExtinf(PlaylistError):
    pass


class InvalidUri(ValueError):
    pass


class PlaylistType(str, Enum):
    VOD = "VOD"
    EVENT = "EVENT"
    UNSPECIFIED = "unspecified"


@dataclass(frozen=True)
class Segment:
    index: int
    duration_ms: int
    uri: str
    title: str = ""

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise ValueError(f"segment duration must be positive, got {self.duration_ms} ms")

    @property
    def duration(self) -> Decimal:
        return Decimal(self.duration_ms) / MS_PER_SECOND


@dataclass(frozen=True)
class MediaPlaylist:
    base_uri: str
    version: int | None = None
    media_sequence: int = 0
    target_duration: int | None = None
    playlist_type: PlaylistType = PlaylistType.UNSPECIFIED
    init_section_uri: str | None = None
    segments: tuple[Segment, ...] = ()
    has_endlist: bool = False
    extra_tags: tuple[str, ...] = field(default=())

    def part_uris(self) -> list[str]:
        """Init section (when present) followed by segment URIs, in order."""
        uris = [self.init_section_uri] if self.init_section_uri else []
        uris.extend(s.uri for s in self.segments)
        return uris

    def to_dict(self) -> dict:
        return {
            "base_uri": self.base_uri,
            "version": self.version,
            "media_sequence": self.media_sequence,
            "target_duration": self.target_duration,
            "playlist_type": self.playlist_type.value,
            "init_section_uri": self.init_section_uri,
            "segments": [
                {
                    "index": s.index,
                    "duration": format_duration(s.duration_ms),
                    "uri": s.uri,
                    "title": s.title,
                }
                for s in self.segments
            ],
            "has_endlist": self.has_endlist,
            "extra_tags": list(self.extra_tags),
            "total_duration": str(total_duration(self)),
        }


@dataclass(frozen=True)
class Finding:
    code: str
    message: str
    segment_index: int | None = None


def format_duration(duration_ms: int) -> str:
    return f"{duration_ms // MS_PER_SECOND}.{duration_ms % MS_PER_SECOND:03d}"


def serialize_media_playlist(p: MediaPlaylist) -> str:
    """Render *p* in a canonical form.

    Header tags come first in a fixed order, then preserved unknown tags,
    then the EXT-X-MAP, segments and EXT-X-ENDLIST. URIs are written in
    their resolved absolute form so the output reparses against any base.
    """
    lines = ["#EXTM3U"]
    if p.version is not None:
        lines.append(f"#EXT-X-VERSION:{p.version}")
    lines.append(f"#EXT-X-MEDIA-SEQUENCE:{p.media_sequence}")
    if p.target_duration is not None:
        lines.append(f"#EXT-X-TARGETDURATION:{p.target_duration}")
    if p.playlist_type is not PlaylistType.UNSPECIFIED:
        lines.append(f"#EXT-X-PLAYLIST-TYPE:{p.playlist_type.value}")
    lines.extend(p.extra_tags)
    if p.init_section_uri is not None:
        lines.append(f'#EXT-X-MAP:URI="{p.init_section_uri}"')
    for seg in p.segments:
        lines.append(f"#EXTINF:{format_duration(seg.duration_ms)},{seg.title}")
        lines.append(seg.uri)
    if p.has_endlist:
        lines.append("#EXT-X-ENDLIST")
    return "\n".join(lines) + "\n"


_URI_FORBIDDEN = re.compile(r"[\x00-\x20\x7f]")


def resolve_uri(base: str, reference: str) -> str:
    """Resolve *reference* against the absolute URI *base* (RFC 3986 section 5)."""
    try:
        parts = urlsplit(base)
        if not parts.scheme or _URI_FORBIDDEN.search(base):
            raise InvalidUri(f"base URI is not absolute: {base!r}")
        if _URI_FORBIDDEN.search(reference):
            raise InvalidUri(f"reference contains whitespace or control characters: {reference!r}")
        resolved = urljoin(base, reference)
        # urlsplit validates bracketed hosts and raises on e.g. "http://[::1"
        check = urlsplit(resolved)
        _ = check.port
    except ValueError as exc:
        if isinstance(exc, InvalidUri):
            raise
        raise InvalidUri(f"cannot resolve {reference!r} against {base!r}: {exc}") from exc
    if not check.scheme:
        raise InvalidUri(f"resolution of {reference!r} is not absolute")
    return resolved


def _parse_decimal_ms(value: str, line_number: int) -> int:
    try:
        seconds = Decimal(value)
    except InvalidOperation:
        raise MalformedTag(f"EXTINF duration is not a decimal: {value!r}", line_number) from None
    if not seconds.is_finite():
        raise MalformedTag(f"EXTINF duration is not finite: {value!r}", line_number)
    try:
        ms = int((seconds * MS_PER_SECOND).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    except InvalidOperation:
        raise MalformedTag(f"EXTINF duration out of range: {value!r}", line_number) from None
    if ms <= 0:
        raise MalformedTag(f"EXTINF duration must be positive: {value!r}", line_number)
    return ms


_ATTR_RE = re.compile(r'\s*([A-Z0-9-]+)=("[^"\r\n]*"|[^",]*)\s*(?:,|$)')


def parse_attribute_list(text: str, line_number: int = 0) -> dict[str, str]:
    """Parse an HLS attribute list (``NAME=value,NAME="quoted"``)."""
    attrs: dict[str, str] = {}
    pos = 0
    while pos < len(text):
        m = _ATTR_RE.match(text, pos)
        if not m or m.end() == pos:
            raise MalformedTag(f"bad attribute list syntax: {text!r}", line_number)
        name, value = m.group(1), m.group(2)
        if value.startswith('"'):
            value = value[1:-1]
        if name in attrs:
            raise MalformedTag(f"duplicate attribute {name}", line_number)
        attrs[name] = value
        pos = m.end()
    return attrs


def _parse_int(tag: str, value: str, line_number: int) -> int:
    if not (value.isascii() and value.isdigit()):
        raise MalformedTag(f"{tag} expects a decimal integer, got {value!r}", line_number)
    return int(value)


def parse_media_playlist(text: str, base: str) -> MediaPlaylist:
    if not text:
        raise MissingHeader("empty playlist body")
    try:
        base_parts = urlsplit(base)
    except ValueError as exc:
        raise InvalidUri(f"invalid base URI {base!r}") from exc
    if not base_parts.scheme:
        raise InvalidUri(f"base URI is not absolute: {base!r}")

    lines = [ln.rstrip() for ln in text.lstrip("\ufeff").splitlines()]
    if not lines or lines[0] != "#EXTM3U":
        raise MissingHeader("first line is not #EXTM3U", 1)

    version = None
    media_sequence = 0
    target_duration = None
    playlist_type = PlaylistType.UNSPECIFIED
    init_uri = None
    has_endlist = False
    segments: list[Segment] = []
    extra: list[str] = []
    pending: tuple[int, str, int] | None = None  # (duration_ms, title, line_number)

    for number, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if not line.startswith("#"):
            if pending is None:
                # a URI with no EXTINF: RFC 8216 requires EXTINF per segment
                raise MalformedTag(f"URI line without preceding EXTINF: {line!r}", number)
            duration_ms, title, _ = pending
            try:
                uri = resolve_uri(base, line)
            except InvalidUri as exc:
                raise MalformedTag(str(exc), number) from None
            segments.append(Segment(len(segments), duration_ms, uri, title))
            pending = None
            continue
        if not line.startswith("#EXT"):
            continue  # comment
        tag, _, value = line.partition(":")
        if tag == "#EXTINF":
            if pending is not None:
                raise DanglingExtinf("EXTINF followed by another EXTINF", pending[2])
            duration, sep, title = value.partition(",")
            if not duration:
                raise MalformedTag("EXTINF without duration", number)
            pending = (_parse_decimal_ms(duration.strip(), number), title, number)
        elif tag == "#EXT-X-VERSION":
            version = _parse_int(tag, value, number)
        elif tag == "#EXT-X-MEDIA-SEQUENCE":
            media_sequence = _parse_int(tag, value, number)
        elif tag == "#EXT-X-TARGETDURATION":
            target_duration = _parse_int(tag, value, number)
        elif tag == "#EXT-X-PLAYLIST-TYPE":
            if value not in ("VOD", "EVENT"):
                raise MalformedTag(f"unknown playlist type {value!r}", number)
            playlist_type = PlaylistType(value)
        elif tag == "#EXT-X-MAP":
            attrs = parse_attribute_list(value, number)
            if "URI" not in attrs:
                raise MalformedTag("EXT-X-MAP without URI attribute", number)
            if not re.search(r'(?:^|,)\s*URI="', value):
                raise MalformedTag("EXT-X-MAP URI must be a quoted string", number)
            try:
                init_uri = resolve_uri(base, attrs["URI"])
            except InvalidUri as exc:
                raise MalformedTag(str(exc), number) from None
        elif tag == "#EXT-X-ENDLIST":
            has_endlist = True
        elif tag in ("#EXT-X-STREAM-INF", "#EXT-X-I-FRAME-STREAM-INF"):
            raise MalformedTag(f"{tag[1:]}: master playlist not supported", number)
        else:
            extra.append(line)

    if pending is not None:
        raise DanglingExtinf("EXTINF has no following URI line", pending[2])

    return MediaPlaylist(
        base_uri=base,
        version=version,
        media_sequence=media_sequence,
        target_duration=target_duration,
        playlist_type=playlist_type,
        init_section_uri=init_uri,
        segments=tuple(segments),
        has_endlist=has_endlist,
        extra_tags=tuple(extra),
    )


def total_duration(p: MediaPlaylist) -> Decimal:
    return Decimal(sum(s.duration_ms for s in p.segments)) / MS_PER_SECOND


def is_complete(p: MediaPlaylist) -> bool:
    return p.has_endlist


def lint_target_duration(p: MediaPlaylist) -> list[Finding]:
    """Segments whose rounded duration exceeds EXT-X-TARGETDURATION."""
    if p.target_duration is None:
        return [Finding("no-target-duration", "EXT-X-TARGETDURATION missing")]
    findings = []
    for seg in p.segments:
        rounded = int(seg.duration.quantize(Decimal(1), rounding=ROUND_HALF_UP))
        if rounded > p.target_duration:
            findings.append(
                Finding(
                    "exceeds-target-duration",
                    f"segment {seg.index} lasts {seg.duration}s, target is {p.target_duration}s",
                    seg.index,
                )
            )
    return findings


_RANGE_RE = re.compile(r"/vid/(\d+)/(\d+)/")


def lint_dm_path_convention(p: MediaPlaylist) -> list[Finding]:
    """Check the ``/vid/<start_ms>/<end_ms>/`` naming against EXTINF durations.

    The init section conventionally sits at ``/vid/0/0/`` and is not checked.
    """
    ranges = []
    for seg in p.segments:
        m = _RANGE_RE.search(urlsplit(seg.uri).path)
        if m is None:
            return [Finding("convention-not-detected", "segment paths do not follow /vid/<start>/<end>/")]
        ranges.append((seg, int(m.group(1)), int(m.group(2))))
    if not ranges:
        return [Finding("convention-not-detected", "playlist has no segments")]

    findings = []
    previous_end = None
    for seg, start, end in ranges:
        if end - start != seg.duration_ms:
            findings.append(
                Finding(
                    "duration-mismatch",
                    f"segment {seg.index}: path spans {end - start} ms, EXTINF says {seg.duration_ms} ms",
                    seg.index,
                )
            )
        if previous_end is not None and start != previous_end:
            findings.append(
                Finding(
                    "range-gap",
                    f"segment {seg.index} starts at {start} ms, previous ended at {previous_end} ms",
                    seg.index,
                )
            )
        previous_end = end
    return findings
