"""Threaded HTTP twin of the services the audit talks to.

Two plain-HTTP listeners stand in for the two schemes: the "https-role"
listener answers for ``https://`` origins and the "http-role" listener for
``http://`` ones. No TLS is involved anywhere. Clients reach the logical
hosts through an :class:`~dmaudit.transport.EndpointMap`, which the server
hands out ready-made. Routing is by path only, so one listener pair serves
every logical host.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import re
import socket
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from email.utils import format_datetime
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from ..archive import surt_key
from ..transport import EndpointMap
from .scenario import (
    COOKIE_NAME,
    LOGICAL_HOSTS,
    Capture,
    ImageRoute,
    Phase,
    ScenarioConfig,
    VideoRoute,
    study_scenario,
)

log = logging.getLogger(__name__)

HTTPS_ROLE = "https-role"
HTTP_ROLE = "http-role"
_REPLAY_RE = re.compile(r"^/web/(\d{14})(id_)?/(.+)$", re.S)
_PHASE_RE = re.compile(r"^/admin/session/([^/]+)/phase$")

# static filler for headers nothing downstream reads
_FILLER = [
    ("perf", "7626143928"),
    ("x-connection-hash", "0" * 64),
]


class BindFailed(OSError):
    pass


class MockClock:
    """Injectable, monotonic clock producing 14-digit capture timestamps."""

    FORMAT = "%Y%m%d%H%M%S"

    def __init__(self, start: str):
        self._now = datetime.strptime(start, self.FORMAT).replace(tzinfo=timezone.utc)
        self._lock = threading.Lock()

    def now(self) -> str:
        with self._lock:
            return self._now.strftime(self.FORMAT)

    def datetime(self) -> datetime:
        with self._lock:
            return self._now

    def set(self, ts: str) -> None:
        when = datetime.strptime(ts, self.FORMAT).replace(tzinfo=timezone.utc)
        with self._lock:
            if when < self._now:
                raise ValueError(f"clock is monotonic; {ts} is before {self._now.strftime(self.FORMAT)}")
            self._now = when

    def advance(self, seconds: float) -> str:
        if seconds < 0:
            raise ValueError("clock is monotonic; cannot advance by a negative amount")
        with self._lock:
            self._now += timedelta(seconds=seconds)
            return self._now.strftime(self.FORMAT)


@dataclass
class Reply:
    status: int
    headers: list = field(default_factory=list)
    body: bytes = b""
    empty: bool = False  # close without writing a single byte


EMPTY_REPLY = Reply(0, empty=True)


def _cdx_digest(body: bytes) -> str:
    return base64.b32encode(hashlib.sha1(body).digest()).decode("ascii")


class MockState:
    """All mutable scenario state, guarded by one lock."""

    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.config = config
        self.lock = threading.RLock()
        self.clock = MockClock(config.clock_start)
        self.sessions = {s.session_id: s for s in config.sessions}
        self.images: dict[str, ImageRoute] = {r.path: r for r in config.image_routes}
        self.videos: dict[str, VideoRoute] = {r.path: r for r in config.video_routes + config.playlist_routes}
        self.captures: dict[tuple[str, str], Capture] = {}
        self.index: list[str] = list(config.cdx_lines)
        self.trace_entries: list[dict] = []
        self.spn_429 = 0
        self.retry_after = 1
        for c in config.archive_store:
            self._store(c)

    # sessions and cookies

    def token_owner(self, token: str):
        for s in self.sessions.values():
            for account, t in s.cookie_tokens.items():
                if t == token:
                    return s, account
        return None, None

    def set_phase(self, session_id: str, phase: Phase | str) -> None:
        with self.lock:
            if session_id not in self.sessions:
                raise KeyError(session_id)
            self.sessions[session_id].transition(Phase(phase))

    # routes

    def set_route_body(self, path: str, body: bytes) -> None:
        with self.lock:
            if path in self.videos:
                self.videos[path].body = body
            elif path in self.images:
                self.images[path].body = body
            else:
                raise KeyError(path)

    def remove_route(self, path: str) -> None:
        with self.lock:
            if self.videos.pop(path, None) is None and self.images.pop(path, None) is None:
                raise KeyError(path)

    # archive

    def _store(self, c: Capture) -> None:
        key = surt_key(c.original)
        self.captures[(c.timestamp, key)] = c
        # a fresh capture supersedes any index line for the same (urlkey, timestamp)
        self.index = [ln for ln in self.index if ln.split()[:2] != [key, c.timestamp]]
        self.index.append(
            " ".join(
                [surt_key(c.original), c.timestamp, c.original, c.mimetype, str(c.status),
                 _cdx_digest(c.body), str(len(c.body))]
            )
        )

    def capture(self, original: str) -> Capture:
        path = urlsplit(original).path
        reply = self.bare_reply(path)
        mimetype = next((v for k, v in reply.headers if k == "content-type"), "unk")
        c = Capture(self.clock.now(), original, reply.body, reply.status, mimetype)
        with self.lock:
            self._store(c)
        return c

    def set_capture_body(self, timestamp: str, original: str, body: bytes) -> None:
        with self.lock:
            key = (timestamp, surt_key(original))
            if key not in self.captures:
                raise KeyError(key)
            self.captures[key].body = body

    def corrupt_capture(self, timestamp: str, original: str, offset: int = 0) -> None:
        """Flip every bit of one stored byte; the length is unchanged."""
        with self.lock:
            c = self.captures[(timestamp, surt_key(original))]
            data = bytearray(c.body)
            data[offset] ^= 0xFF
            c.body = bytes(data)

    def remove_capture(self, timestamp: str, original: str) -> None:
        with self.lock:
            key = (timestamp, surt_key(original))
            del self.captures[key]
            self.index = [ln for ln in self.index if ln.split()[:2] != [key[1], timestamp]]

    def list_captures(self) -> list[dict]:
        with self.lock:
            return [
                {"timestamp": c.timestamp, "original": c.original, "status": c.status, "length": len(c.body)}
                for c in sorted(self.captures.values(), key=lambda c: (c.timestamp, c.original))
            ]

    # trace

    def record(self, entry: dict) -> dict:
        with self.lock:
            entry["seq"] = len(self.trace_entries)
            self.trace_entries.append(entry)
        return entry

    def trace(self) -> list[dict]:
        with self.lock:
            return [dict(e) for e in self.trace_entries]

    def clear_trace(self) -> None:
        with self.lock:
            self.trace_entries.clear()

    # response semantics

    def base_headers(self) -> list:
        return [("date", format_datetime(self.clock.datetime(), usegmt=True)), ("server", "tsa_b"), *_FILLER]

    def sts(self) -> list:
        v = self.config.sts_header_value
        return [("strict-transport-security", v)] if v else []

    def image_reply(self, route: ImageRoute, headers: dict) -> Reply:
        cookie = headers.get("cookie")
        token = _cookie_value(cookie, COOKIE_NAME) if cookie else None
        session, account = self.token_owner(token) if token else (None, None)
        if session is None:
            # no (usable) credentials: 401 plus the guest-cookie preamble
            guest = "v1%3A167051518741457080"
            preamble = [
                ("set-cookie", f"guest_id_marketing={guest}; Max-Age=63072000; Domain=.twitter.com; Path=/; Secure; SameSite=None"),
                ("set-cookie", f"guest_id_ads={guest}; Max-Age=63072000; Domain=.twitter.com; Path=/; Secure; SameSite=None"),
                ("set-cookie", 'personalization_id="v1_hwtvdvArizEra8KCDu8hSrg="; Max-Age=63072000; Domain=.twitter.com; Path=/; Secure; SameSite=None'),
                ("set-cookie", f"guest_id={guest}; Max-Age=63072000; Domain=.twitter.com; Path=/; Secure; SameSite=None"),
            ]
            return Reply(401, [*self.base_headers(), *preamble, ("content-length", "0"), *self.sts()])
        owner = self.sessions[route.session_id]
        if account not in owner.parties:
            return Reply(404, [*self.base_headers(), ("content-length", "0"), *self.sts()])
        if session.phase is Phase.EXPIRED:
            return EMPTY_REPLY
        if session.phase is Phase.CLOSED or "referer" not in headers:
            return Reply(404, [*self.base_headers(), ("content-length", "0"), *self.sts()])
        return Reply(
            200,
            [*self.base_headers(), ("content-type", "image/jpeg"), ("content-length", str(len(route.body))), *self.sts()],
            route.body,
        )

    def video_reply(self, route: VideoRoute) -> Reply:
        return Reply(
            200,
            [
                *self.base_headers(),
                ("content-type", route.content_type),
                ("cache-control", "max-age=604800, must-revalidate"),
                ("last-modified", "Thu, 08 Dec 2022 15:34:40 GMT"),
                ("access-control-allow-origin", "*"),
                ("accept-ranges", "bytes"),
                *self.sts(),
                ("content-length", str(len(route.body))),
            ],
            route.body,
        )

    def not_found(self) -> Reply:
        return Reply(404, [*self.base_headers(), ("content-length", "0")])

    def bare_reply(self, path: str) -> Reply:
        """What the https-role would answer to a GET with no headers."""
        with self.lock:
            if path in self.videos:
                return self.video_reply(self.videos[path])
            if path in self.images:
                return self.image_reply(self.images[path], {})
        return self.not_found()


def _cookie_value(header: str, name: str) -> str | None:
    for part in header.split(";"):
        key, sep, value = part.strip().partition("=")
        if sep and key == name:
            return value.strip().strip('"')
    return None


def _json_reply(status: int, doc) -> Reply:
    body = (json.dumps(doc, indent=1) + "\n").encode("utf-8")
    return Reply(status, [("content-type", "application/json"), ("content-length", str(len(body)))], body)


def _text_reply(status: int, text: str, headers=()) -> Reply:
    body = text.encode("utf-8")
    return Reply(status, [*headers, ("content-type", "text/plain"), ("content-length", str(len(body)))], body)


class _Handler(BaseHTTPRequestHandler):
    server_version = "tsa_b"
    sys_version = ""

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.server.role, fmt % args)

    @property
    def state(self) -> MockState:
        return self.server.state

    def _headers(self) -> dict:
        # later duplicates lose, as with most servers' single-value view
        out = {}
        for k, v in self.headers.items():
            out.setdefault(k.lower(), v)
        return out

    def _body(self) -> bytes:
        n = int(self.headers.get("content-length") or 0)
        return self.rfile.read(n) if n else b""

    def _send(self, reply: Reply) -> None:
        if reply.empty:
            self.close_connection = True
            return
        self.send_response_only(reply.status)
        for k, v in reply.headers:
            self.send_header(k, v)
        self.send_header("connection", "close")
        self.end_headers()
        if self.command != "HEAD" and reply.body:
            self.wfile.write(reply.body)

    def _handle(self) -> None:
        path = self.path.split("?", 1)[0]
        if path.startswith("/admin/") or path == "/health":
            self._send(self._admin(path))
            return
        entry = self.state.record(
            {
                "role": self.server.role,
                "method": self.command,
                "target": self.path,
                "headers": [[k, v] for k, v in self.headers.items()],
            }
        )
        try:
            reply = self._route(path) if self.command in ("GET", "HEAD") else _text_reply(405, "method not allowed\n")
        except Exception as exc:  # keep the listener alive; surface the bug as a 500
            log.exception("mock handler failed")
            reply = _text_reply(500, f"{type(exc).__name__}: {exc}\n")
        entry["outcome"] = "EMPTY_REPLY" if reply.empty else reply.status
        self._send(reply)

    do_GET = do_HEAD = do_POST = do_PUT = do_DELETE = _handle

    def _redirect_to_https(self) -> Reply:
        host = self.headers.get("host", "localhost")
        return Reply(301, [*self.state.base_headers(), ("location", f"https://{host}{self.path}"), ("content-length", "0")])

    def _route(self, path: str) -> Reply:
        st = self.state
        plain = self.server.role == HTTP_ROLE
        if path.startswith("/save/"):
            return self._save()
        if path.startswith("/web/"):
            return self._replay()
        if path == "/cdx/search/cdx":
            return self._cdx()
        with st.lock:
            video = st.videos.get(path)
            image = st.images.get(path)
            if video is not None:
                if plain and not video.plain_http_allowed:
                    return self._redirect_to_https()
                return st.video_reply(video)
            if image is not None:
                if plain:
                    return self._redirect_to_https()
                return st.image_reply(image, self._headers())
        if path == "/":
            if plain:
                return self._redirect_to_https()
            extra = [("content-security-policy", st.config.csp_header_value)] if st.config.csp_header_value else []
            return _text_reply(200, "mock site\n", [*st.base_headers(), *extra, *st.sts()])
        return st.not_found()

    # archive

    def _save(self) -> Reply:
        st = self.state
        original = self.path[len("/save/"):]
        if not re.match(r"^https?://[^/]+", original):
            return _text_reply(400, f"cannot save {original!r}\n")
        with st.lock:
            if st.spn_429 > 0:
                st.spn_429 -= 1
                return _text_reply(429, "too many captures\n", [("retry-after", str(st.retry_after))])
        c = st.capture(original)
        return _text_reply(
            200,
            f"captured {original} at {c.timestamp}\n",
            [*st.base_headers(), ("content-location", f"/web/{c.timestamp}/{original}")],
        )

    def _replay(self) -> Reply:
        st = self.state
        m = _REPLAY_RE.match(self.path)
        if not m:
            return st.not_found()
        ts, raw, original = m.group(1), m.group(2) or "", m.group(3)
        key = surt_key(original)
        with st.lock:
            c = st.captures.get((ts, key))
            if c is None:
                stamps = sorted(t for (t, k) in st.captures if k == key)
                if not stamps:
                    return st.not_found()
                target = int(ts)
                nearest = min(stamps, key=lambda t: (abs(int(t) - target), t))
                return Reply(302, [*st.base_headers(), ("location", f"/web/{nearest}{raw}/{original}"),
                                   ("content-length", "0")])
            headers = [
                *st.base_headers(),
                ("content-type", c.mimetype),
                ("memento-datetime", format_datetime(datetime.strptime(c.timestamp, MockClock.FORMAT)
                                                     .replace(tzinfo=timezone.utc), usegmt=True)),
                ("content-length", str(len(c.body))),
            ]
            return Reply(c.status, headers, c.body)

    def _cdx(self) -> Reply:
        st = self.state
        query = parse_qs(urlsplit(self.path).query)
        url = query.get("url", [""])[0]
        if not url:
            return _text_reply(400, "url parameter required\n")
        match_type = query.get("matchType", ["exact"])[0]
        key = surt_key(url)
        with st.lock:
            lines = list(st.index)

        def keep(line: str) -> bool:
            first = line.split(" ", 1)[0]
            return first.startswith(key) if match_type == "prefix" else first == key

        selected = sorted((ln for ln in lines if keep(ln)), key=lambda ln: ln.split()[:2])
        offset = 0
        if "resumeKey" in query:
            offset = int(base64.urlsafe_b64decode(query["resumeKey"][0].encode()).decode())
        limit = int(query["limit"][0]) if "limit" in query else None
        page = selected[offset:offset + limit] if limit else selected[offset:]
        text = "".join(ln + "\n" for ln in page)
        more = limit is not None and offset + limit < len(selected)
        if more and query.get("showResumeKey", ["false"])[0] == "true":
            resume = base64.urlsafe_b64encode(str(offset + limit).encode()).decode()
            text += "\n" + resume + "\n"
        return _text_reply(200, text, st.base_headers())

    # admin

    def _admin(self, path: str) -> Reply:
        st = self.state
        query = parse_qs(urlsplit(self.path).query)
        try:
            if path == "/health":
                return _json_reply(200, {"status": "ok", "role": self.server.role})
            m = _PHASE_RE.match(path)
            if m and self.command in ("POST", "PUT"):
                raw = self._body().decode("utf-8").strip()
                phase = json.loads(raw)["phase"] if raw.startswith("{") else raw
                st.set_phase(m.group(1), phase)
                return _json_reply(200, st.sessions[m.group(1)].to_dict())
            if m:
                return _json_reply(200, st.sessions[m.group(1)].to_dict())
            if path == "/admin/trace":
                if self.command == "DELETE":
                    st.clear_trace()
                    return _json_reply(200, [])
                return _json_reply(200, st.trace())
            if path == "/admin/clock":
                if self.command in ("POST", "PUT"):
                    doc = json.loads(self._body() or b"{}")
                    if "set" in doc:
                        st.clock.set(doc["set"])
                    if "advance" in doc:
                        st.clock.advance(float(doc["advance"]))
                return _json_reply(200, {"now": st.clock.now()})
            if path == "/admin/route":
                target = query["path"][0]
                if self.command == "DELETE":
                    st.remove_route(target)
                elif self.command == "PUT":
                    st.set_route_body(target, self._body())
                return _json_reply(200, {"path": target})
            if path == "/admin/faults" and self.command in ("POST", "PUT"):
                doc = json.loads(self._body() or b"{}")
                with st.lock:
                    st.spn_429 = int(doc.get("spn_429", st.spn_429))
                    st.retry_after = int(doc.get("retry_after", st.retry_after))
                return _json_reply(200, {"spn_429": st.spn_429, "retry_after": st.retry_after})
            if path == "/admin/captures":
                return _json_reply(200, st.list_captures())
            if path == "/admin/capture" and self.command == "PUT":
                st.set_capture_body(query["timestamp"][0], query["url"][0], self._body())
                return _json_reply(200, {"ok": True})
        except KeyError as exc:
            return _json_reply(404, {"error": f"unknown {exc}"})
        except ValueError as exc:
            return _json_reply(409, {"error": str(exc)})
        return _json_reply(404, {"error": f"no admin route {self.command} {path}"})


class _Listener(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128

    def __init__(self, address, state: MockState, role: str):
        self.state = state
        self.role = role
        super().__init__(address, _Handler)


def _refused_port(host: str) -> int:
    """A port nothing listens on (bound briefly, then released)."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


class MockServer:
    """Running pair of role listeners over one shared :class:`MockState`.

    >>> with MockServer() as srv:                       # doctest: +SKIP
    ...     client = HttpClient(srv.endpoint_map())
    """

    def __init__(self, config: ScenarioConfig | None = None, host: str = "127.0.0.1",
                 https_port: int = 0, http_port: int = 0):
        self.config = config or study_scenario()
        self.state = MockState(self.config)
        self.host = host
        self._ports = (https_port, http_port)
        self._listeners: list[_Listener] = []
        self._threads: list[threading.Thread] = []
        self.https_port: int | None = None
        self.http_port: int | None = None

    def start(self) -> "MockServer":
        try:
            https = _Listener((self.host, self._ports[0]), self.state, HTTPS_ROLE)
            self._listeners.append(https)
            self.https_port = https.server_address[1]
            if self.config.plain_listener:
                http = _Listener((self.host, self._ports[1]), self.state, HTTP_ROLE)
                self._listeners.append(http)
                self.http_port = http.server_address[1]
            else:
                self.http_port = self._ports[1] or _refused_port(self.host)
        except OSError as exc:
            self.stop()
            raise BindFailed(exc.errno, f"cannot bind mock listener on {self.host}: {exc.strerror}") from exc
        for listener in self._listeners:
            t = threading.Thread(target=listener.serve_forever, name=f"mock-{listener.role}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        for listener in self._listeners:
            listener.shutdown()
            listener.server_close()
        for t in self._threads:
            t.join(timeout=5)
        self._listeners.clear()
        self._threads.clear()

    def __enter__(self) -> "MockServer":
        return self.start() if not self._listeners else self

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def https_base(self) -> str:
        return f"http://{self.host}:{self.https_port}"

    @property
    def http_base(self) -> str:
        return f"http://{self.host}:{self.http_port}"

    def endpoint_routes(self) -> dict[str, str]:
        routes = {}
        for host in LOGICAL_HOSTS:
            routes[f"https://{host}"] = self.https_base
            routes[f"http://{host}"] = self.http_base
        return routes

    def endpoint_map(self) -> EndpointMap:
        return EndpointMap(self.endpoint_routes())

    def endpoint_args(self) -> list[str]:
        """``--endpoint`` values routing every logical host to this server."""
        args = []
        for origin, base in self.endpoint_routes().items():
            args += ["--endpoint", f"{origin}={base}"]
        return args

    # conveniences over the shared state

    @property
    def clock(self) -> MockClock:
        return self.state.clock

    def trace(self) -> list[dict]:
        return self.state.trace()


def serve(config: ScenarioConfig | None = None, bind: tuple[str, int] = ("127.0.0.1", 0),
          http_port: int = 0) -> MockServer:
    """Start a mock server in background threads and return its handle."""
    return MockServer(config, bind[0], bind[1], http_port).start()
