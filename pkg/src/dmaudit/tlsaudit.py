"""Transport-security posture: plain-http serving, HSTS, preload, CSP connect-src."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable
from urllib.parse import urlsplit

from .probe import PlainHttpResult, check_plain_http
from .transport import HttpClient

DEFAULT_PORTS = {"http": 80, "https": 443, "ws": 80, "wss": 443}
# an http-ish source also admits the secure twin of its scheme
_UPGRADES = {"http": {"http", "https"}, "ws": {"ws", "wss"}, "https": {"https"}, "wss": {"wss"}}


class MalformedSts(ValueError):
    pass


@dataclass(frozen=True)
class StsPolicy:
    max_age: int
    include_subdomains: bool = False
    preload_token: bool = False
    raw: str = ""

    @property
    def removes_policy(self) -> bool:
        return self.max_age == 0

    def to_dict(self) -> dict:
        return {
            "max_age": self.max_age,
            "include_subdomains": self.include_subdomains,
            "preload_token": self.preload_token,
            "raw": self.raw,
        }


def parse_sts(header_value: str) -> StsPolicy:
    """Parse a Strict-Transport-Security value. Unknown directives are ignored."""
    max_age = None
    include = preload = False
    for directive in header_value.split(";"):
        name, sep, value = directive.strip().partition("=")
        name = name.strip().lower()
        if not name:
            continue
        if name == "max-age":
            if max_age is not None:
                raise MalformedSts("max-age given more than once")
            value = value.strip().strip('"')
            if not sep or not (value.isascii() and value.isdigit()):
                raise MalformedSts(f"max-age must be a non-negative integer, got {value!r}")
            max_age = int(value)
        elif name == "includesubdomains":
            include = True
        elif name == "preload":
            preload = True
    if max_age is None:
        raise MalformedSts(f"no max-age in {header_value!r}")
    return StsPolicy(max_age, include, preload, header_value)


@dataclass(frozen=True)
class PreloadSnapshot:
    entries: dict  # domain -> include_subdomains

    def __contains__(self, domain: str) -> bool:
        return domain.lower().rstrip(".") in self.entries


_TRUTHY = {"include_subdomains", "includesubdomains", "true", "yes", "1"}
_FALSY = {"false", "no", "0"}


def parse_preload_snapshot(lines: Iterable[str]) -> PreloadSnapshot:
    """One domain per line, optionally followed by ``include_subdomains``; ``#`` starts a comment."""
    entries = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        flag = False
        if len(fields) == 2 and fields[1].lower() in _TRUTHY | _FALSY:
            flag = fields[1].lower() in _TRUTHY
        elif len(fields) != 1:
            raise ValueError(f"preload snapshot line {number}: cannot parse {raw.rstrip()!r}")
        entries[fields[0].lower().rstrip(".")] = flag
    return PreloadSnapshot(entries)


def load_preload_snapshot(path: str | os.PathLike) -> PreloadSnapshot:
    with open(path, encoding="utf-8") as fh:
        return parse_preload_snapshot(fh)


EMPTY_SNAPSHOT = PreloadSnapshot({})


@dataclass(frozen=True)
class PreloadStatus:
    host: str
    host_listed: bool
    matched_parent: str | None = None

    def to_dict(self) -> dict:
        return {"host": self.host, "host_listed": self.host_listed, "matched_parent": self.matched_parent}


def preload_status(host: str, preload_snapshot: PreloadSnapshot) -> PreloadStatus:
    host = host.lower().rstrip(".")
    if host in preload_snapshot.entries:
        return PreloadStatus(host, True)
    labels = host.split(".")
    for i in range(1, len(labels)):
        parent = ".".join(labels[i:])
        if preload_snapshot.entries.get(parent):
            return PreloadStatus(host, True, parent)
    return PreloadStatus(host, False)


# CSP source expressions


@dataclass(frozen=True)
class SourceExpression:
    raw: str
    kind: str  # "any", "scheme", "host", "keyword"
    scheme: str | None = None
    host: str | None = None
    port: str | None = None  # digits, "*" or None
    path: str | None = None

    @classmethod
    def parse(cls, token: str) -> "SourceExpression":
        t = token.strip()
        low = t.lower()
        if t == "*":
            return cls(t, "any")
        if low.startswith("'") and low.endswith("'") and len(low) >= 2:
            return cls(t, "keyword", host=low)
        m = re.fullmatch(r"([a-z][a-z0-9+.-]*):", low)
        if m:
            return cls(t, "scheme", scheme=m.group(1))
        m = re.fullmatch(
            r"(?:([a-z][a-z0-9+.-]*)://)?(\*|(?:\*\.)?[a-z0-9-]+(?:\.[a-z0-9-]+)*)(?::(\d+|\*))?(/[^?#]*)?",
            t,
            re.I,
        )
        if not m:
            return cls(t, "keyword", host="invalid")
        scheme, host, port, path = m.groups()
        return cls(t, "host", scheme and scheme.lower(), host.lower(), port, path)


@dataclass(frozen=True)
class CspConnectSrc:
    sources: tuple[SourceExpression, ...]
    directive: str = "connect-src"

    @classmethod
    def parse(cls, value: str, directive: str = "connect-src") -> "CspConnectSrc":
        return cls(tuple(SourceExpression.parse(tok) for tok in value.split()), directive)

    def to_dict(self) -> dict:
        return {"directive": self.directive, "sources": [s.raw for s in self.sources]}


def parse_csp(header_value: str) -> CspConnectSrc | None:
    """Pull connect-src (falling back to default-src) out of a policy.

    A bare source list with no directive name is read as connect-src.
    """
    directives = {}
    for part in header_value.split(";"):
        tokens = part.split()
        if tokens:
            directives.setdefault(tokens[0].lower(), " ".join(tokens[1:]))
    for name in ("connect-src", "default-src"):
        if name in directives:
            return CspConnectSrc.parse(directives[name], name)
    if header_value.strip() and not any(k.endswith("-src") or k.startswith("upgrade") for k in directives):
        return CspConnectSrc.parse(header_value)
    return None


def _effective_port(scheme: str, port: int | None) -> int | None:
    return port if port is not None else DEFAULT_PORTS.get(scheme)


def _host_matches(pattern: str, host: str) -> bool:
    if pattern == "*":
        return True
    if pattern.startswith("*."):
        # one or more leading labels, never the bare domain
        return host.endswith(pattern[1:]) and len(host) > len(pattern) - 1
    return host == pattern


def _path_matches(pattern: str | None, path: str) -> bool:
    if not pattern or pattern == "/":
        return True
    path = path or "/"
    if pattern.endswith("/"):
        return path.startswith(pattern)
    return path == pattern


def _source_matches(src: SourceExpression, url, self_scheme: str, self_origin) -> bool:
    scheme = url.scheme.lower()
    host = (url.hostname or "").lower()
    if src.kind == "any":
        return scheme in ("http", "https", "ws", "wss") or scheme == self_scheme
    if src.kind == "scheme":
        return scheme in _UPGRADES.get(src.scheme, {src.scheme})
    if src.kind == "keyword":
        if src.host == "'self'" and self_origin is not None:
            return (
                scheme in _UPGRADES.get(self_origin.scheme, {self_origin.scheme})
                and host == (self_origin.hostname or "").lower()
                and _effective_port(scheme, url.port) == _effective_port(self_origin.scheme, self_origin.port)
            )
        return False
    allowed = _UPGRADES.get(src.scheme or self_scheme, {src.scheme or self_scheme})
    if scheme not in allowed:
        return False
    if not _host_matches(src.host, host):
        return False
    if src.port != "*":
        want = int(src.port) if src.port else DEFAULT_PORTS.get(scheme)
        if _effective_port(scheme, url.port) != want:
            return False
    return _path_matches(src.path, url.path)


def csp_connect_src_allows(directive: CspConnectSrc, url: str, self_origin: str | None = None) -> bool:
    """Would a page under *directive* be allowed to fetch *url*?

    Scheme-less sources take the scheme of the protected page
    (*self_origin*, https when unknown).
    """
    parts = urlsplit(url)
    if not parts.scheme or not parts.hostname:
        raise ValueError(f"CSP evaluation needs an absolute URL, got {url!r}")
    origin = urlsplit(self_origin) if self_origin else None
    self_scheme = origin.scheme.lower() if origin else "https"
    return any(_source_matches(s, parts, self_scheme, origin) for s in directive.sources)


# HTTPS enforcement


class Verdict(str, Enum):
    ENFORCED = "ENFORCED"
    HEADER_ONLY = "HEADER_ONLY"
    NOT_ENFORCED = "NOT_ENFORCED"


@dataclass(frozen=True)
class Finding:
    code: str
    message: str

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message}


@dataclass
class HttpsEnforcementReport:
    verdict: Verdict
    findings: list[Finding] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"verdict": self.verdict.value, "findings": [f.to_dict() for f in self.findings]}


def evaluate_https_enforcement(
    plain: PlainHttpResult, sts: StsPolicy | None, preload: PreloadStatus
) -> HttpsEnforcementReport:
    """Combine the three facts into a verdict.

    ENFORCED when plain http is refused or the host is preloaded.
    Otherwise HEADER_ONLY if an STS policy exists (the first visit is still
    exposed), else NOT_ENFORCED. A ``max-age=0`` header removes the policy
    and counts as no policy.
    """
    findings = []
    has_sts = sts is not None and not sts.removes_policy
    if plain.served:
        if has_sts:
            findings.append(Finding("plain-http-despite-sts", "content served over plain http despite STS"))
        else:
            findings.append(Finding("plain-http-served", "content served over plain http"))
        if plain.lengths_match:
            findings.append(Finding("plain-http-same-length", "plain http body length equals the https one"))
    else:
        findings.append(Finding("plain-http-refused", "plain http request did not return 2xx content"))
    if sts is None:
        findings.append(Finding("no-sts", "no STS header"))
    elif sts.removes_policy:
        findings.append(Finding("sts-removal", "STS max-age=0 removes any stored policy"))
    else:
        findings.append(Finding("sts-present", f"STS max-age={sts.max_age}"))
    if preload.host_listed:
        via = f" via {preload.matched_parent}" if preload.matched_parent else ""
        findings.append(Finding("preloaded", f"{preload.host} is on the preload snapshot{via}"))
    else:
        findings.append(Finding("not-preloaded", f"{preload.host} is not on the preload snapshot"))

    if not plain.served or preload.host_listed:
        verdict = Verdict.ENFORCED
    elif has_sts:
        verdict = Verdict.HEADER_ONLY
    else:
        verdict = Verdict.NOT_ENFORCED
    return HttpsEnforcementReport(verdict, findings)


@dataclass
class CspCheck:
    directive: CspConnectSrc
    https_url: str
    https_allowed: bool
    http_allowed: bool

    def to_dict(self) -> dict:
        return {
            **self.directive.to_dict(),
            "https_url": self.https_url,
            "https_allowed": self.https_allowed,
            "http_allowed": self.http_allowed,
        }


def check_csp(directive: CspConnectSrc, url: str, self_origin: str | None = None) -> CspCheck:
    parts = urlsplit(url)
    https_url = parts._replace(scheme="https").geturl()
    http_url = parts._replace(scheme="http").geturl()
    return CspCheck(
        directive,
        https_url,
        csp_connect_src_allows(directive, https_url, self_origin),
        csp_connect_src_allows(directive, http_url, self_origin),
    )


@dataclass
class TlsAudit:
    target: str
    plain: PlainHttpResult
    sts: StsPolicy | None
    sts_error: str | None
    preload: PreloadStatus
    enforcement: HttpsEnforcementReport
    csp: CspCheck | None = None

    def to_dict(self) -> dict:
        d = {
            "target": self.target,
            "verdict": self.enforcement.verdict.value,
            "findings": [f.to_dict() for f in self.enforcement.findings],
            "plain_http": self.plain.to_dict(),
            "sts": self.sts.to_dict() if self.sts else None,
            "preload": self.preload.to_dict(),
        }
        if self.sts_error:
            d["sts_error"] = self.sts_error
        if self.csp is not None:
            d["csp"] = self.csp.to_dict()
        return d


def audit_https(
    url: str,
    client: HttpClient | None = None,
    snapshot: PreloadSnapshot = EMPTY_SNAPSHOT,
    csp: CspConnectSrc | None = None,
    self_origin: str | None = None,
) -> TlsAudit:
    """Network half (plain-http check) followed by the pure evaluation."""
    plain = check_plain_http(url, client)
    sts = None
    sts_error = None
    raw = plain.https_outcome.header("strict-transport-security")
    if raw is not None:
        try:
            sts = parse_sts(raw)
        except MalformedSts as exc:
            sts_error = str(exc)
    status = preload_status(urlsplit(url).hostname or "", snapshot)
    report = evaluate_https_enforcement(plain, sts, status)
    if sts_error:
        report.findings.append(Finding("sts-malformed", sts_error))
    check = check_csp(csp, url, self_origin) if csp else None
    return TlsAudit(url, plain, sts, sts_error, status, report, check)
