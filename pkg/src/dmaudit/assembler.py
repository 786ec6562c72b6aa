"""Fetch the parts of a fragmented MP4 and concatenate them.

The output is the init section followed by every media segment in
playlist order, byte for byte. Nothing here parses MP4 boxes; byte
fidelity is the whole contract.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from io import BytesIO
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping, Sequence, Union
from urllib.parse import urlsplit

from .playlist import MediaPlaylist
from .transport import HttpClient, TransportFailure

DIGEST_ALGORITHM = "sha256"
CHUNK = 1 << 16
DEFAULT_CONCURRENCY = 4

Part = Union[bytes, bytearray, memoryview, str, os.PathLike, BinaryIO]


class FetchFailed(Exception):
    def __init__(self, uri: str, status: int | None, detail: str = ""):
        self.uri = uri
        self.status = status
        self.detail = detail
        what = f"HTTP {status}" if status is not None else detail
        super().__init__(f"fetch of {uri} failed: {what}")


class LengthMismatch(Exception):
    def __init__(self, uri: str, declared: int, received: int):
        self.uri, self.declared, self.received = uri, declared, received
        super().__init__(f"{uri}: Content-Length {declared} but received {received} bytes")


class AssemblyIOError(OSError):
    pass


def utc_timestamp(when: datetime | None = None) -> str:
    """14-digit ``YYYYMMDDhhmmss`` UTC timestamp."""
    when = when or datetime.now(timezone.utc)
    return when.astimezone(timezone.utc).strftime("%Y%m%d%H%M%S")


@dataclass
class FetchResult:
    uri: str
    length: int
    headers: list[tuple[str, str]]
    body: bytes | None = None


_KEPT = ("content-length", "content-type", "last-modified", "strict-transport-security")


def fetch_segment(uri: str, client: HttpClient | None = None, sink: BinaryIO | None = None) -> FetchResult:
    """GET one part with no request headers at all (no credentials).

    The body is returned, or streamed into *sink* when given.
    """
    if not urlsplit(uri).scheme:
        raise ValueError(f"part URI must be absolute: {uri!r}")
    client = client or HttpClient()
    try:
        resp = client.get(uri, (), sink=sink)
    except TransportFailure as exc:
        raise FetchFailed(uri, None, str(exc)) from exc
    if resp.status != 200:
        raise FetchFailed(uri, resp.status)
    declared = resp.header("content-length")
    if declared is not None and declared.strip().isdigit() and int(declared) != resp.body_length:
        raise LengthMismatch(uri, int(declared), resp.body_length)
    kept = [(k.lower(), v) for k, v in resp.headers if k.lower() in _KEPT]
    return FetchResult(uri, resp.body_length, kept, resp.body)


@dataclass
class AssemblyReport:
    part_count: int
    part_lengths: list[int]
    total_bytes: int
    digest: str
    output_path: str
    digest_algorithm: str = DIGEST_ALGORITHM
    part_uris: list[str] = field(default_factory=list)
    fetched_at: str | None = None

    def to_dict(self) -> dict:
        d = {
            "part_count": self.part_count,
            "part_lengths": list(self.part_lengths),
            "total_bytes": self.total_bytes,
            "digest": {"algorithm": self.digest_algorithm, "hex": self.digest},
            "output_path": self.output_path,
            "part_uris": list(self.part_uris),
        }
        if self.fetched_at:
            d["fetched_at"] = self.fetched_at
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AssemblyReport":
        if "assembly" in d:  # a whole audit report was passed
            d = d["assembly"]
        return cls(
            part_count=d["part_count"],
            part_lengths=list(d["part_lengths"]),
            total_bytes=d["total_bytes"],
            digest=d["digest"]["hex"],
            digest_algorithm=d["digest"]["algorithm"],
            output_path=d["output_path"],
            part_uris=list(d.get("part_uris", [])),
            fetched_at=d.get("fetched_at"),
        )


def _open_part(part: Part):
    if isinstance(part, (bytes, bytearray, memoryview)):
        return BytesIO(part), True
    if isinstance(part, (str, os.PathLike)):
        return open(part, "rb"), True
    return part, False


def assemble(init: Part, segments: Sequence[Part], output: str | os.PathLike) -> AssemblyReport:
    """Write *init* then each segment to *output*, streaming.

    Parts may be bytes, file paths or readable binary files. The file is
    written next to its destination and moved into place at the end, so a
    failed run never leaves a truncated *output* behind.
    """
    output = Path(output)
    lengths: list[int] = []
    hasher = hashlib.new(DIGEST_ALGORITHM)
    try:
        fd, tmp_name = tempfile.mkstemp(prefix=output.name + ".", suffix=".tmp", dir=output.parent)
    except OSError as exc:
        raise AssemblyIOError(exc.errno, f"cannot write to {output.parent}: {exc.strerror}") from exc
    try:
        with os.fdopen(fd, "wb") as out:
            for part in [init, *segments]:
                src, owned = _open_part(part)
                try:
                    n = 0
                    while chunk := src.read(CHUNK):
                        out.write(chunk)
                        hasher.update(chunk)
                        n += len(chunk)
                finally:
                    if owned:
                        src.close()
                lengths.append(n)
        os.replace(tmp_name, output)
    except OSError as exc:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise AssemblyIOError(exc.errno, f"writing {output} failed: {exc.strerror or exc}") from exc
    return AssemblyReport(
        part_count=len(lengths),
        part_lengths=lengths,
        total_bytes=sum(lengths),
        digest=hasher.hexdigest(),
        output_path=str(output),
    )


def file_digest(path: str | os.PathLike) -> str:
    hasher = hashlib.new(DIGEST_ALGORITHM)
    with open(path, "rb") as fh:
        while chunk := fh.read(CHUNK):
            hasher.update(chunk)
    return hasher.hexdigest()


@dataclass(frozen=True)
class Equivalence:
    identical: bool
    first_diff_offset: int | None
    length_a: int
    length_b: int

    def to_dict(self) -> dict:
        return {
            "identical": self.identical,
            "first_diff_offset": self.first_diff_offset,
            "length_a": self.length_a,
            "length_b": self.length_b,
        }


def verify_equivalence(a: str | os.PathLike, b: str | os.PathLike) -> Equivalence:
    """Byte comparison in the spirit of ``cmp``/``diff -s``.

    When one file is a strict prefix of the other, the first difference
    is at the shorter length.
    """
    try:
        len_a, len_b = os.path.getsize(a), os.path.getsize(b)
        offset = 0
        with open(a, "rb") as fa, open(b, "rb") as fb:
            while True:
                ca, cb = fa.read(CHUNK), fb.read(CHUNK)
                if ca != cb:
                    limit = min(len(ca), len(cb))
                    k = next((i for i in range(limit) if ca[i] != cb[i]), limit)
                    return Equivalence(False, offset + k, len_a, len_b)
                if not ca:
                    return Equivalence(True, None, len_a, len_b)
                offset += len(ca)
    except OSError as exc:
        raise AssemblyIOError(exc.errno, f"cannot compare {a} and {b}: {exc.strerror or exc}") from exc


@dataclass(frozen=True)
class ManifestEntry:
    local_name: str
    uri: str


def part_filenames(uris: Sequence[str], has_init: bool = True) -> list[str]:
    """Zero-padded local names: ``00.mp4``, ``01.m4s``, ...

    The extension comes from the URI path, falling back to ``.mp4`` for
    the init section and ``.m4s`` for segments.
    """
    width = max(2, len(str(len(uris) - 1)))
    names = []
    for i, uri in enumerate(uris):
        fallback = ".mp4" if (i == 0 and has_init) else ".m4s"
        suffix = Path(urlsplit(uri).path).suffix or fallback
        names.append(f"{i:0{width}d}{suffix}")
    return names


def manifest_entries(p: MediaPlaylist) -> list[ManifestEntry]:
    uris = p.part_uris()
    names = part_filenames(uris, has_init=p.init_section_uri is not None)
    return [ManifestEntry(n, u) for n, u in zip(names, uris)]


def export_manifest(p: MediaPlaylist) -> str:
    lines = [
        f"# parts of {p.base_uri}",
        "# <local-name> <uri>",
    ]
    lines.extend(f"{e.local_name} {e.uri}" for e in manifest_entries(p))
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> list[ManifestEntry]:
    entries = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        name, _, uri = line.partition(" ")
        uri = uri.strip()
        if not uri or " " in uri:
            raise ValueError(f"manifest line {number}: expected '<local-name> <uri>', got {raw!r}")
        entries.append(ManifestEntry(name, uri))
    return entries


@dataclass
class PartFetch:
    entry: ManifestEntry
    path: Path
    length: int | None = None
    error: str | None = None
    status: int | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def fetch_parts(
    entries: Sequence[ManifestEntry],
    dest: str | os.PathLike,
    client: HttpClient | None = None,
    concurrency: int = DEFAULT_CONCURRENCY,
) -> list[PartFetch]:
    """Download every entry into *dest*, at most *concurrency* at a time.

    Results come back in manifest order whatever the completion order.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    client = client or HttpClient()
    parallel = max(1, concurrency) if all(client.is_loopback(e.uri) for e in entries) else 1

    def one(entry: ManifestEntry) -> PartFetch:
        target = dest / entry.local_name
        result = PartFetch(entry, target)
        if parallel == 1:
            client.pace(entry.uri)
        try:
            with open(target, "wb") as fh:
                result.length = fetch_segment(entry.uri, client, sink=fh).length
        except FetchFailed as exc:
            result.error, result.status = str(exc), exc.status
        except LengthMismatch as exc:
            result.error = str(exc)
        if result.error is not None and target.exists():
            target.unlink()
        return result

    if parallel == 1:
        return [one(e) for e in entries]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(one, entries))


def assemble_parts(fetched: Sequence[PartFetch], output: str | os.PathLike) -> AssemblyReport:
    if not fetched:
        raise ValueError("nothing to assemble")
    report = assemble(fetched[0].path, [f.path for f in fetched[1:]], output)
    report.part_uris = [f.entry.uri for f in fetched]
    return report


def mark_partial(fetched: Iterable[PartFetch]) -> list[Path]:
    """Rename successfully fetched part files to ``<name>.partial``."""
    kept = []
    for f in fetched:
        if f.ok and f.path.exists():
            target = f.path.with_name(f.path.name + ".partial")
            f.path.rename(target)
            kept.append(target)
    return kept


def download_and_assemble(
    p: MediaPlaylist,
    output: str | os.PathLike,
    client: HttpClient | None = None,
    work_dir: str | os.PathLike | None = None,
    concurrency: int = DEFAULT_CONCURRENCY,
) -> AssemblyReport:
    """Playlist to file in one call. Raises :class:`FetchFailed` on the first failed part."""
    fetched_at = utc_timestamp()
    with tempfile.TemporaryDirectory(dir=work_dir) as tmp:
        fetched = fetch_parts(manifest_entries(p), tmp, client, concurrency)
        for f in fetched:
            if not f.ok:
                raise FetchFailed(f.entry.uri, f.status, f.error or "")
        report = assemble_parts(fetched, output)
    report.fetched_at = fetched_at
    return report
