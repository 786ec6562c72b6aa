"""``dmaudit`` command line.

Every command prints one JSON report on stdout and a short human summary
on stderr. Exit codes: 0 completed, 1 failed stage (fetch failure, archive
copy not identical), 2 insufficient probe evidence, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence
from urllib.parse import urlsplit

from . import __version__
from .archive import (
    DEFAULT_ENDPOINT,
    SPN_PACE_SECONDS,
    CapturePolicy,
    IdExtractor,
    QueryFailed,
    cdx_prefix_search,
    dedupe_by_media_id,
    is_valid_timestamp,
    push_all,
    roundtrip_verify,
)
from .assembler import (
    AssemblyIOError,
    AssemblyReport,
    ManifestEntry,
    assemble_parts,
    fetch_parts,
    manifest_entries,
    mark_partial,
    parse_manifest,
    utc_timestamp,
    verify_equivalence,
)
from .playlist import MediaPlaylist, PlaylistError, lint_dm_path_convention, lint_target_duration, parse_media_playlist
from .probe import CookieSet, InsufficientEvidence, build_default_matrix, classify, format_matrix, load_profiles, run_matrix, summarize
from .tlsaudit import EMPTY_SNAPSHOT, load_preload_snapshot, parse_csp, audit_https
from .transport import EndpointMap, ExternalHostRefused, HttpClient, Limits, TransportFailure

log = logging.getLogger("dmaudit")

SCHEMA_VERSION = "1"
EXIT_OK, EXIT_FAILED, EXIT_INSUFFICIENT, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")


class Run:
    """Per-invocation context: resolved config, HTTP client and the report."""

    def __init__(self, args):
        self.args = args
        config = {}
        if args.config:
            try:
                config = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        self.config = config
        try:
            endpoints = EndpointMap(config.get("endpoints", {})).merged(EndpointMap.parse(args.endpoint or []))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        timeout_ms = args.timeout if args.timeout is not None else config.get("timeout_ms", 10000)
        pacing = config.get("pacing", {})
        self.spn_pace = float(pacing.get("spn_seconds", SPN_PACE_SECONDS))
        limits = Limits(timeout=timeout_ms / 1000, external_delay=float(pacing.get("request_seconds", 0.25)))
        self.client = HttpClient(endpoints, limits)
        self.archive_endpoint = args.archive_endpoint or config.get("archive_endpoint", DEFAULT_ENDPOINT)
        self.report = {
            "schema_version": SCHEMA_VERSION,
            "tool_version": __version__,
            "command": args.command_name,
            "started_at": _now(),
        }

    def guard(self, *urls: str) -> None:
        """Refuse non-loopback destinations unless ``--yes-external`` was given."""
        if not self.args.yes_external:
            self.client.require_local(urls)

    def emit(self, code: int) -> int:
        self.report["finished_at"] = _now()
        self.report["exit_code"] = code
        json.dump(self.report, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return code


def say(msg: str) -> None:
    print(msg, file=sys.stderr)


# input loading


def _absolute(url: str) -> bool:
    parts = urlsplit(url)
    return parts.scheme in ("http", "https") and bool(parts.hostname)


def load_playlist(run: Run, source: str, base: str | None) -> MediaPlaylist:
    if _absolute(source):
        run.guard(source)
        resp = run.client.get(source, follow_redirects=True)
        if resp.status != 200:
            raise TransportFailure(f"playlist fetch returned HTTP {resp.status}")
        return parse_media_playlist((resp.body or b"").decode("utf-8"), base or source)
    text = _read_text(source)
    if base is None:
        raise UsageError("a local playlist needs --base to resolve its part URIs")
    return parse_media_playlist(text, base)


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc


def load_parts(run: Run, source: str, base: str | None) -> tuple[list[ManifestEntry], MediaPlaylist | None]:
    """Playlist URL, playlist file or manifest file, to manifest entries."""
    if not _absolute(source):
        text = _read_text(source)
        if not text.lstrip("\ufeff").startswith("#EXTM3U"):
            entries = parse_manifest(text)
            for e in entries:
                if not _absolute(e.uri):
                    raise UsageError(f"manifest URI is not absolute: {e.uri}")
            return entries, None
    p = load_playlist(run, source, base)
    return manifest_entries(p), p


# commands


def cmd_probe(run: Run) -> int:
    a = run.args
    run.report["target"] = a.url
    run.guard(a.url)
    if a.profiles:
        profiles = load_profiles(a.profiles)
    else:
        defaults = CookieSet()
        cookies = CookieSet(
            a.session_cookie or defaults.session,
            a.third_party_cookie or defaults.third_party,
            a.expired_cookie or defaults.expired,
        )
        profiles = build_default_matrix(cookies, a.referer)
    matrix = run_matrix(a.url, profiles, run.client)
    run.report["matrix"] = matrix.to_dict()
    try:
        protection = classify(matrix)
    except InsufficientEvidence as exc:
        run.report["error"] = str(exc)
        say(f"insufficient evidence: {exc}")
        return run.emit(EXIT_INSUFFICIENT)
    run.report["protection"] = protection.to_dict()
    say(format_matrix(matrix))
    say(summarize(protection))
    return run.emit(EXIT_OK)


def cmd_playlist(run: Run) -> int:
    a = run.args
    p = load_playlist(run, a.source, a.base)
    run.report["target"] = p.base_uri
    findings = lint_target_duration(p) + lint_dm_path_convention(p)
    run.report["playlist"] = p.to_dict()
    run.report["findings"] = [{"code": f.code, "message": f.message, "segment_index": f.segment_index} for f in findings]
    say(f"{len(p.segments)} segments, init={'yes' if p.init_section_uri else 'no'}, {len(findings)} findings")
    return run.emit(EXIT_OK)


def cmd_assemble(run: Run) -> int:
    a = run.args
    entries, p = load_parts(run, a.source, a.base)
    run.report["target"] = p.base_uri if p else a.source
    if not entries:
        raise UsageError("nothing to assemble: no init section and no segments")
    run.guard(*(e.uri for e in entries))
    out = Path(a.out)
    parts_dir = out.with_name(out.name + ".parts")
    fetched_at = utc_timestamp()
    fetched = fetch_parts(entries, parts_dir, run.client, a.concurrency)
    failed = [f for f in fetched if not f.ok]
    run.report["fetch"] = {
        "parts": len(fetched),
        "fetched_at": fetched_at,
        "failed": [{"uri": f.entry.uri, "status": f.status, "error": f.error} for f in failed],
    }
    if failed:
        kept = mark_partial(fetched)
        run.report["fetch"]["partial_dir"] = str(parts_dir)
        run.report["fetch"]["partial_files"] = [str(k) for k in kept]
        say(f"{len(failed)} of {len(fetched)} parts failed; kept {len(kept)} as .partial in {parts_dir}")
        return run.emit(EXIT_FAILED)
    report = assemble_parts(fetched, out)
    report.fetched_at = fetched_at
    if not a.keep_parts:
        for f in fetched:
            f.path.unlink()
        parts_dir.rmdir()
    run.report["assembly"] = report.to_dict()
    say(f"{report.part_count} parts, {report.total_bytes} bytes -> {out} ({report.digest_algorithm} {report.digest})")
    return run.emit(EXIT_OK)


def cmd_archive_push(run: Run) -> int:
    a = run.args
    entries, _ = load_parts(run, a.source, a.base)
    run.report["target"] = run.archive_endpoint
    if entries:
        run.guard(run.archive_endpoint)
    pace = a.pace if a.pace is not None else run.spn_pace
    results = push_all([e.uri for e in entries], run.archive_endpoint, run.client, pace=pace)
    run.report["submissions"] = [r.to_dict() for r in results]
    rejected = [r for r in results if not r.accepted]
    run.report["warnings"] = [f"not captured: {r.url} ({r.detail})" for r in rejected]
    say(f"{len(results) - len(rejected)} of {len(results)} submissions accepted")
    return run.emit(EXIT_OK)


def cmd_archive_survey(run: Run) -> int:
    a = run.args
    run.report["target"] = a.prefix
    run.guard(run.archive_endpoint)
    result = cdx_prefix_search(a.prefix, run.archive_endpoint, run.client, a.page_size)
    extractor = IdExtractor(a.marker)
    summary = dedupe_by_media_id(result.records, extractor, a.exclude or ())
    run.report["survey"] = summary.to_dict(redact=not a.show_urls, extractor=extractor)
    run.report["cdx"] = {
        "records": len(result.records),
        "malformed_lines": len(result.malformed),
    }
    if a.show_urls:
        run.report["cdx"]["malformed"] = [{"line": m.line, "reason": m.reason} for m in result.malformed]
    earliest = summary.earliest.timestamp if summary.earliest else "none"
    say(
        f"{summary.line_count} pipeline lines, {len(summary.unique_ids)} distinct ids, "
        f"{len(summary.malformed)} malformed, {summary.excluded_count} excluded, earliest {earliest}"
    )
    return run.emit(EXIT_OK)


def cmd_archive_verify(run: Run) -> int:
    a = run.args
    if a.after and not is_valid_timestamp(a.after):
        raise UsageError(f"--after must be a 14-digit timestamp, got {a.after!r}")
    p = load_playlist(run, a.playlist, a.base)
    try:
        live = AssemblyReport.from_dict(json.loads(_read_text(a.live_report)))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{a.live_report} is not an assembly report: {exc}") from exc
    run.report["target"] = p.base_uri
    run.guard(run.archive_endpoint)
    policy = CapturePolicy(after=a.after or live.fetched_at)
    rt = roundtrip_verify(p, live, run.archive_endpoint, run.client, policy, a.out)
    run.report["roundtrip"] = rt.to_dict()
    identical = rt.identical
    if a.out and rt.archived_output and Path(live.output_path).exists():
        eq = verify_equivalence(live.output_path, a.out)
        run.report["roundtrip"]["byte_comparison"] = eq.to_dict()
        identical = identical and eq.identical
    if identical:
        say("archived copy is identical to the live assembly")
    elif rt.missing_captures:
        say(f"{len(rt.missing_captures)} parts have no usable capture")
    else:
        say("archived copy differs from the live assembly")
    return run.emit(EXIT_OK if identical else EXIT_FAILED)


def cmd_tls_audit(run: Run) -> int:
    a = run.args
    if urlsplit(a.url).scheme != "https" or not urlsplit(a.url).hostname:
        raise UsageError(f"tls-audit needs an https URL, got {a.url!r}")
    run.report["target"] = a.url
    plain_twin = "http" + a.url[len("https"):]
    run.guard(a.url, plain_twin)
    snapshot = load_preload_snapshot(a.preload_snapshot) if a.preload_snapshot else EMPTY_SNAPSHOT
    csp = None
    if a.csp:
        csp = parse_csp(a.csp)
        if csp is None:
            raise UsageError("--csp has neither connect-src nor default-src")
    audit = audit_https(a.url, run.client, snapshot, csp, a.csp_origin)
    run.report["https"] = audit.to_dict()
    say(f"{audit.enforcement.verdict.value}: " + "; ".join(f.message for f in audit.enforcement.findings))
    if audit.csp:
        say(f"connect-src allows https={audit.csp.https_allowed} http={audit.csp.http_allowed}")
    return run.emit(EXIT_OK)


def cmd_mock_serve(run: Run) -> int:
    from .mockserver import MockServer, load_scenario, study_scenario

    a = run.args
    config = load_scenario(a.scenario) if a.scenario else study_scenario()
    server = MockServer(config, a.host, a.port, a.http_port).start()
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    info = {
        "https_role": server.https_base,
        "http_role": server.http_base,
        "endpoint_args": server.endpoint_args(),
    }
    print(json.dumps(info), flush=True)
    say(f"mock serving https-role on {server.https_base}, http-role on {server.http_base}; Ctrl-C to stop")
    try:
        stop.wait()
    finally:
        server.stop()
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("network")
    g.add_argument("--endpoint", action="append", metavar="ORIGIN=BASE",
                   help="send requests for ORIGIN to BASE instead (repeatable), e.g. https://video.twimg.com=http://127.0.0.1:8080")
    g.add_argument("--archive-endpoint", metavar="URL", help=f"web archive base URL (default {DEFAULT_ENDPOINT})")
    g.add_argument("--timeout", type=int, metavar="MS", help="per-request timeout in milliseconds (default 10000)")
    g.add_argument("--config", metavar="FILE", help="JSON config with endpoints, timeout_ms, pacing")
    g.add_argument("--yes-external", action="store_true",
                   help="allow contacting hosts that are not loopback (off by default)")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")

    parser = _Parser(prog="dmaudit", description="Probe, reassemble and archive-check hash-named media URLs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("probe", parents=[common], help="differential access-control probe of one URL")
    p.add_argument("url")
    p.add_argument("--profiles", metavar="FILE", help="JSON header profiles replacing the default five")
    p.add_argument("--session-cookie", metavar="COOKIE", help="Cookie header of a party to the live session")
    p.add_argument("--third-party-cookie", metavar="COOKIE", help="Cookie header of a valid non-party account")
    p.add_argument("--expired-cookie", metavar="COOKIE", help="Cookie header of an ended session")
    p.add_argument("--referer", default="https://twitter.com/", help="Referer for profiles that send one")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("playlist", parents=[common], help="parse and lint a media playlist")
    p.add_argument("source", help="playlist URL or file")
    p.add_argument("--base", metavar="URL", help="base URL for relative URIs in a local file")
    p.set_defaults(func=cmd_playlist)

    p = sub.add_parser("assemble", parents=[common], help="fetch every part of a playlist and concatenate")
    p.add_argument("source", help="playlist URL, playlist file or manifest file")
    p.add_argument("--out", required=True, metavar="FILE", help="output file")
    p.add_argument("--base", metavar="URL", help="base URL for relative URIs in a local playlist")
    p.add_argument("--concurrency", type=int, default=4, metavar="N", help="parallel fetches against loopback hosts")
    p.add_argument("--keep-parts", action="store_true", help="keep downloaded parts in <out>.parts/")
    p.set_defaults(func=cmd_assemble)

    arch = sub.add_parser("archive", help="web archive operations")
    asub = arch.add_subparsers(dest="archive_command", metavar="ACTION", required=True)

    p = asub.add_parser("push", parents=[common], help="submit every part URI to Save Page Now")
    p.add_argument("source", help="manifest file, playlist file or playlist URL")
    p.add_argument("--base", metavar="URL", help="base URL for relative URIs in a local playlist")
    p.add_argument("--pace", type=float, metavar="SECONDS",
                   help=f"delay between submissions to a non-loopback archive (default {SPN_PACE_SECONDS:g})")
    p.set_defaults(func=cmd_archive_push)

    p = asub.add_parser("survey", parents=[common], help="count distinct media ids under a URL prefix")
    p.add_argument("prefix", help="CDX prefix, e.g. video.twimg.com/dm_video/")
    p.add_argument("--exclude", action="append", metavar="ID", help="media id to leave out (repeatable)")
    p.add_argument("--marker", default="dm_video", help="path segment that precedes the media id")
    p.add_argument("--show-urls", action="store_true", help="include full captured URLs (redacted by default)")
    p.add_argument("--page-size", type=int, metavar="N", help="paginate CDX results N lines at a time")
    p.set_defaults(func=cmd_archive_survey)

    p = asub.add_parser("verify", parents=[common], help="rebuild from raw captures and compare with a live build")
    p.add_argument("playlist", help="playlist URL or file")
    p.add_argument("live_report", help="JSON report from `assemble` (or its assembly section)")
    p.add_argument("--base", metavar="URL", help="base URL for relative URIs in a local playlist")
    p.add_argument("--after", metavar="TIMESTAMP", help="prefer the first capture at or after this 14-digit time")
    p.add_argument("--out", metavar="FILE", help="keep the archived rebuild here and byte-compare it")
    p.set_defaults(func=cmd_archive_verify)

    p = sub.add_parser("tls-audit", parents=[common], help="plain-http, HSTS, preload and CSP posture of a URL")
    p.add_argument("url", help="https URL to audit")
    p.add_argument("--preload-snapshot", metavar="FILE", help="local preload list: domain [include_subdomains]")
    p.add_argument("--csp", metavar="POLICY", help='policy to evaluate, e.g. "connect-src https://*.twimg.com"')
    p.add_argument("--csp-origin", metavar="ORIGIN", help="origin of the page the policy protects")
    p.set_defaults(func=cmd_tls_audit)

    mock = sub.add_parser("mock", help="offline mock of the audited services")
    msub = mock.add_subparsers(dest="mock_command", metavar="ACTION", required=True)
    p = msub.add_parser("serve", parents=[common], help="run the mock server until interrupted")
    p.add_argument("--scenario", metavar="FILE", help="scenario JSON (default: built-in study scenario)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0, help="https-role listener port (0 picks a free one)")
    p.add_argument("--http-port", type=int, default=0, help="http-role listener port (0 picks a free one)")
    p.set_defaults(func=cmd_mock_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.command_name = " ".join(
        x for x in (args.command, getattr(args, "archive_command", None), getattr(args, "mock_command", None)) if x
    )
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        return args.func(run)
    except UsageError as exc:
        say(f"dmaudit: error: {exc}")
        return EXIT_USAGE
    except ExternalHostRefused as exc:
        say(f"dmaudit: refused: {exc}")
        return EXIT_USAGE
    except (PlaylistError, ValueError) as exc:
        say(f"dmaudit: invalid input: {exc}")
        return EXIT_USAGE
    except (TransportFailure, QueryFailed, AssemblyIOError) as exc:
        say(f"dmaudit: failed: {exc}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
