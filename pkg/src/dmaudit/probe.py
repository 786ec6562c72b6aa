"""Differential access-control probing.

A target URL is fetched once per :class:`HeaderProfile`. The profiles
differ only in authentication-relevant headers (Cookie, Referer), and
the pattern of outcomes tells which factors gate access.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence
from urllib.parse import urlsplit, urlunsplit

from .transport import EmptyReply, HttpClient, RequestTimeout, TransportFailure

FULL_SESSION = "FULL_SESSION"
NO_COOKIE = "NO_COOKIE"
NO_REFERER = "NO_REFERER"
THIRD_PARTY = "THIRD_PARTY"
EXPIRED = "EXPIRED"

BROWSER_HEADERS = (
    ("Accept", "image/webp,image/png,image/svg+xml,image/*;q=0.8,video/*;q=0.8,*/*;q=0.5"),
    (
        "User-Agent",
        "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7) AppleWebKit/605.1.15 "
        "(KHTML, like Gecko) Version/15.3 Safari/605.1.15",
    ),
    ("Accept-Language", "en-us"),
)
DEFAULT_REFERER = "https://twitter.com/"

# Response headers kept on outcomes; everything else is filler for this purpose.
SELECTED_HEADERS = frozenset(
    {
        "content-length",
        "content-type",
        "location",
        "set-cookie",
        "strict-transport-security",
        "content-security-policy",
        "www-authenticate",
        "cache-control",
    }
)


class CookieRole(str, Enum):
    NONE = "NONE"
    SESSION_PARTY = "SESSION_PARTY"
    THIRD_PARTY = "THIRD_PARTY"
    EXPIRED = "EXPIRED"


class InsufficientEvidence(ValueError):
    pass


@dataclass(frozen=True)
class HeaderProfile:
    name: str
    headers: tuple[tuple[str, str], ...]
    cookie_role: CookieRole
    has_referer: bool

    def __post_init__(self):
        names = {k.lower() for k, _ in self.headers}
        if ("cookie" in names) == (self.cookie_role is CookieRole.NONE):
            raise ValueError(f"profile {self.name}: cookie_role {self.cookie_role.value} disagrees with headers")
        if ("referer" in names) != self.has_referer:
            raise ValueError(f"profile {self.name}: has_referer={self.has_referer} disagrees with headers")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "headers": [list(h) for h in self.headers],
            "cookie_role": self.cookie_role.value,
            "has_referer": self.has_referer,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "HeaderProfile":
        headers = d["headers"]
        if isinstance(headers, Mapping):
            headers = list(headers.items())
        return cls(
            name=d["name"],
            headers=tuple((str(k), str(v)) for k, v in headers),
            cookie_role=CookieRole(d.get("cookie_role", "NONE")),
            has_referer=bool(d.get("has_referer", False)),
        )


@dataclass(frozen=True)
class CookieSet:
    """Cookie header values for the default matrix.

    These must be supplied by the operator for a real audit; credential
    acquisition is deliberately outside this tool.
    """

    session: str = "auth_token=SESSION-PARTY-TOKEN"
    third_party: str = "auth_token=THIRD-PARTY-TOKEN"
    expired: str = "auth_token=EXPIRED-SESSION-TOKEN"


def build_default_matrix(cookies: CookieSet | None = None, referer: str = DEFAULT_REFERER) -> list[HeaderProfile]:
    """The five browser-like probes: full session, and one factor removed or swapped each."""
    cookies = cookies or CookieSet()

    def make(name, cookie, role, with_referer):
        headers = []
        if cookie is not None:
            headers.append(("Cookie", cookie))
        headers.extend(BROWSER_HEADERS)
        if with_referer:
            headers.append(("Referer", referer))
        return HeaderProfile(name, tuple(headers), role, with_referer)

    return [
        make(FULL_SESSION, cookies.session, CookieRole.SESSION_PARTY, True),
        make(NO_COOKIE, None, CookieRole.NONE, True),
        make(NO_REFERER, cookies.session, CookieRole.SESSION_PARTY, False),
        make(THIRD_PARTY, cookies.third_party, CookieRole.THIRD_PARTY, True),
        make(EXPIRED, cookies.expired, CookieRole.EXPIRED, True),
    ]


def load_profiles(source: str | Path | Sequence[Mapping]) -> list[HeaderProfile]:
    """Load profiles from a JSON file path or an already-decoded list.

    Accepts either a bare list or ``{"profiles": [...]}``.
    """
    if isinstance(source, (str, Path)):
        doc = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        doc = source
    if isinstance(doc, Mapping):
        doc = doc["profiles"]
    profiles = [HeaderProfile.from_dict(d) for d in doc]
    _check_names(profiles)
    return profiles


def _check_names(profiles: Sequence[HeaderProfile]) -> None:
    if not profiles:
        raise ValueError("at least one header profile is required")
    names = [p.name for p in profiles]
    if len(set(names)) != len(names):
        raise ValueError(f"profile names must be unique: {names}")


class OutcomeKind(str, Enum):
    STATUS = "STATUS"
    EMPTY_REPLY = "EMPTY_REPLY"
    TIMEOUT = "TIMEOUT"
    TRANSPORT_ERROR = "TRANSPORT_ERROR"


@dataclass(frozen=True)
class ProbeOutcome:
    kind: OutcomeKind
    status: int | None = None
    body_length: int | None = None
    error: str | None = None
    response_headers: tuple[tuple[str, str], ...] = ()
    elapsed_ms: float = field(default=0.0, compare=False)

    @property
    def label(self) -> str:
        return str(self.status) if self.kind is OutcomeKind.STATUS else self.kind.value

    @property
    def status_class(self) -> int | None:
        return self.status // 100 if self.status is not None else None

    def header(self, name: str) -> str | None:
        name = name.lower()
        return next((v for k, v in self.response_headers if k.lower() == name), None)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "elapsed_ms": round(self.elapsed_ms, 3)}
        if self.kind is OutcomeKind.STATUS:
            d["status"] = self.status
            d["body_length"] = self.body_length
        if self.error:
            d["error"] = self.error
        d["response_headers"] = [list(h) for h in self.response_headers]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProbeOutcome":
        return cls(
            kind=OutcomeKind(d["kind"]),
            status=d.get("status"),
            body_length=d.get("body_length"),
            error=d.get("error"),
            response_headers=tuple(tuple(h) for h in d.get("response_headers", ())),
            elapsed_ms=d.get("elapsed_ms", 0.0),
        )


def _check_url(url: str) -> None:
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.hostname:
        raise ValueError(f"probe target must be an absolute http(s) URL: {url!r}")


def probe_once(url: str, profile: HeaderProfile, client: HttpClient | None = None) -> ProbeOutcome:
    """One GET with exactly the profile's headers. Never retries."""
    _check_url(url)
    client = client or HttpClient()
    started = time.perf_counter()

    def elapsed():
        return (time.perf_counter() - started) * 1000

    try:
        resp = client.get(url, profile.headers)
    except EmptyReply as exc:
        return ProbeOutcome(OutcomeKind.EMPTY_REPLY, error=str(exc), elapsed_ms=elapsed())
    except RequestTimeout as exc:
        return ProbeOutcome(OutcomeKind.TIMEOUT, error=str(exc), elapsed_ms=elapsed())
    except TransportFailure as exc:
        return ProbeOutcome(OutcomeKind.TRANSPORT_ERROR, error=str(exc), elapsed_ms=elapsed())
    kept = tuple((k.lower(), v) for k, v in resp.headers if k.lower() in SELECTED_HEADERS)
    return ProbeOutcome(
        OutcomeKind.STATUS,
        status=resp.status,
        body_length=resp.body_length,
        response_headers=kept,
        elapsed_ms=elapsed(),
    )


class OutcomeMatrix(Mapping[str, ProbeOutcome]):
    """Immutable mapping profile name -> outcome, plus execution order."""

    def __init__(self, url: str, outcomes: Mapping[str, ProbeOutcome], order: Sequence[str] | None = None):
        self.url = url
        self._outcomes = MappingProxyType(dict(outcomes))
        self.order = tuple(order if order is not None else self._outcomes)

    def __getitem__(self, name: str) -> ProbeOutcome:
        return self._outcomes[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._outcomes)

    def __len__(self) -> int:
        return len(self._outcomes)

    def __eq__(self, other):
        if not isinstance(other, OutcomeMatrix):
            return NotImplemented
        return self.url == other.url and dict(self._outcomes) == dict(other._outcomes)

    def __hash__(self):
        return hash((self.url, tuple(sorted(self._outcomes.items(), key=lambda kv: kv[0]))))

    def with_outcome(self, name: str, outcome: ProbeOutcome) -> "OutcomeMatrix":
        return OutcomeMatrix(self.url, {**self._outcomes, name: outcome}, self.order + (name,))

    def labels(self) -> dict[str, str]:
        return {name: o.label for name, o in self._outcomes.items()}

    def to_dict(self) -> dict:
        return {
            "url": self.url,
            "order": list(self.order),
            "outcomes": {name: o.to_dict() for name, o in self._outcomes.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OutcomeMatrix":
        return cls(d["url"], {k: ProbeOutcome.from_dict(v) for k, v in d["outcomes"].items()}, d.get("order"))


def run_matrix(url: str, profiles: Sequence[HeaderProfile], client: HttpClient | None = None) -> OutcomeMatrix:
    """Probe *url* once per profile.

    Probes run concurrently only when the target resolves to loopback (the
    mock server); otherwise they run one after another with the client's
    inter-request delay. No state is carried between probes.
    """
    _check_url(url)
    _check_names(profiles)
    client = client or HttpClient()

    if client.is_loopback(url):
        lock = threading.Lock()
        started: list[str] = []

        def run(profile: HeaderProfile) -> ProbeOutcome:
            with lock:
                started.append(profile.name)
            return probe_once(url, profile, client)

        with ThreadPoolExecutor(max_workers=min(8, len(profiles))) as pool:
            results = list(pool.map(run, profiles))
        outcomes = {p.name: r for p, r in zip(profiles, results)}
        return OutcomeMatrix(url, outcomes, started)

    outcomes = {}
    for profile in profiles:
        client.pace(url)
        outcomes[profile.name] = probe_once(url, profile, client)
    return OutcomeMatrix(url, outcomes, [p.name for p in profiles])


VERDICT_FIELDS = (
    "unauthenticated_access",
    "cookie_required",
    "referer_required",
    "party_bound",
    "session_liveness_bound",
)
INDETERMINATE = "INDETERMINATE"


@dataclass(frozen=True)
class Evidence:
    profile: str
    outcome: str

    def to_dict(self) -> dict:
        return {"profile": self.profile, "outcome": self.outcome}


@dataclass(frozen=True)
class ProtectionProfile:
    """Classifier verdicts. ``None`` means indeterminate (witness missing or inconclusive)."""

    unauthenticated_access: bool
    cookie_required: bool | None
    referer_required: bool | None
    party_bound: bool | None
    session_liveness_bound: bool | None
    evidence: Mapping[str, tuple[Evidence, ...]] = field(default_factory=dict)

    def verdicts(self) -> dict[str, bool | None]:
        return {f: getattr(self, f) for f in VERDICT_FIELDS}

    def to_dict(self) -> dict:
        out: dict = {f: (INDETERMINATE if v is None else v) for f, v in self.verdicts().items()}
        out["evidence"] = {f: [e.to_dict() for e in ev] for f, ev in self.evidence.items()}
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProtectionProfile":
        vals = {f: (None if d[f] == INDETERMINATE else d[f]) for f in VERDICT_FIELDS}
        ev = {f: tuple(Evidence(**e) for e in items) for f, items in d.get("evidence", {}).items()}
        return cls(**vals, evidence=ev)


def _is_2xx(o: ProbeOutcome | None) -> bool:
    return o is not None and o.kind is OutcomeKind.STATUS and o.status_class == 2


def _is_status(o: ProbeOutcome | None) -> bool:
    return o is not None and o.kind is OutcomeKind.STATUS


def classify(matrix: Mapping[str, ProbeOutcome]) -> ProtectionProfile:
    """Derive the protection regime from a probe matrix.

    Status comparisons use the hundreds digit only. A verdict whose
    witness profiles are absent, or produced no HTTP status where one is
    needed, stays indeterminate.
    """
    no_cookie = matrix.get(NO_COOKIE)
    if no_cookie is None:
        raise InsufficientEvidence(f"matrix has no {NO_COOKIE} outcome")
    full = matrix.get(FULL_SESSION)
    no_referer = matrix.get(NO_REFERER)
    third = matrix.get(THIRD_PARTY)
    expired = matrix.get(EXPIRED)
    evidence: dict[str, tuple[Evidence, ...]] = {}

    def cite(fieldname: str, *names: str) -> None:
        evidence[fieldname] = tuple(Evidence(n, matrix[n].label) for n in names)

    unauthenticated = _is_2xx(no_cookie) and (no_cookie.body_length or 0) > 0
    cite("unauthenticated_access", NO_COOKIE)

    cookie_required: bool | None = None
    if unauthenticated:
        cookie_required = False
        cite("cookie_required", NO_COOKIE)
    elif _is_status(no_cookie) and _is_status(full):
        cookie_required = no_cookie.status in (401, 403) and _is_2xx(full)
        cite("cookie_required", NO_COOKIE, FULL_SESSION)

    referer_required: bool | None = None
    if _is_status(no_referer) and _is_status(full):
        referer_required = no_referer.status_class != full.status_class
        cite("referer_required", NO_REFERER, FULL_SESSION)

    party_bound: bool | None = None
    if _is_status(third) and _is_status(full):
        party_bound = third.status_class == 4 and _is_2xx(full)
        cite("party_bound", THIRD_PARTY, FULL_SESSION)

    liveness: bool | None = None
    if expired is not None and expired.kind is not OutcomeKind.TIMEOUT:
        liveness = expired.kind in (OutcomeKind.EMPTY_REPLY, OutcomeKind.TRANSPORT_ERROR)
        cite("session_liveness_bound", EXPIRED)

    return ProtectionProfile(
        unauthenticated_access=unauthenticated,
        cookie_required=cookie_required,
        referer_required=referer_required,
        party_bound=party_bound,
        session_liveness_bound=liveness,
        evidence=MappingProxyType(evidence),
    )


@dataclass(frozen=True)
class PlainHttpResult:
    served: bool
    http_outcome: ProbeOutcome
    https_outcome: ProbeOutcome
    lengths_match: bool

    def to_dict(self) -> dict:
        return {
            "served": self.served,
            "lengths_match": self.lengths_match,
            "http_outcome": self.http_outcome.to_dict(),
            "https_outcome": self.https_outcome.to_dict(),
        }


def _declared_or_measured(o: ProbeOutcome) -> int | None:
    if o.kind is not OutcomeKind.STATUS:
        return None
    declared = o.header("content-length")
    if declared is not None and declared.isdigit():
        if int(declared) != o.body_length:
            return None
        return int(declared)
    return o.body_length


def check_plain_http(url: str, client: HttpClient | None = None) -> PlainHttpResult:
    """Fetch *url* and its ``http:`` twin with no extra headers and compare."""
    parts = urlsplit(url)
    if parts.scheme != "https":
        raise ValueError(f"check_plain_http expects an https URL, got {url!r}")
    client = client or HttpClient()
    bare = HeaderProfile("BARE", (), CookieRole.NONE, False)
    https_outcome = probe_once(url, bare, client)
    client.pace(url)
    http_url = urlunsplit(("http",) + tuple(parts)[1:])
    http_outcome = probe_once(http_url, bare, client)
    served = _is_2xx(http_outcome)
    a, b = _declared_or_measured(http_outcome), _declared_or_measured(https_outcome)
    return PlainHttpResult(
        served=served,
        http_outcome=http_outcome,
        https_outcome=https_outcome,
        lengths_match=a is not None and a == b,
    )


def summarize(profile: ProtectionProfile) -> str:
    """One-line human summary for stderr."""
    parts = []
    for name, value in profile.verdicts().items():
        parts.append(f"{name}={'?' if value is None else str(value).lower()}")
    return " ".join(parts)


def format_matrix(matrix: OutcomeMatrix, names: Iterable[str] | None = None) -> str:
    names = list(names or matrix.order)
    return ", ".join(f"{n}:{matrix[n].label}" for n in names if n in matrix)
