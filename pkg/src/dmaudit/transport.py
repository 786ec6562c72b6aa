"""Minimal HTTP/1.1 GET client with exact header control.

Requests carry exactly the caller's headers plus ``Host``. No
Accept-Encoding, User-Agent or Connection header is added implicitly,
which keeps differential probes honest: two requests that differ in one
header differ on the wire in that header only.

An :class:`EndpointMap` reroutes logical origins (``https://video.twimg.com``)
to the listeners that actually serve them, the way ``curl --connect-to``
does. The Host header and all URL-level logic keep the logical origin.
"""

from __future__ import annotations

import http.client
import ipaddress
import logging
import socket
import ssl
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Mapping
from urllib.parse import urljoin, urlsplit

log = logging.getLogger(__name__)

DEFAULT_PORTS = {"http": 80, "https": 443}


class TransportFailure(Exception):
    """No HTTP response was obtained."""


class EmptyReply(TransportFailure):
    """Connection accepted, then closed before a single response byte."""


class RequestTimeout(TransportFailure):
    pass


class TransportError(TransportFailure):
    """DNS, TLS, refused or reset connections and protocol violations."""


class ExternalHostRefused(Exception):
    """A non-loopback host was targeted without explicit opt-in."""


@dataclass(frozen=True)
class Limits:
    timeout: float = 10.0
    follow_redirects: bool = False
    max_redirects: int = 5
    # polite spacing between requests to non-loopback hosts
    external_delay: float = 0.25


def origin_of(url: str) -> str:
    parts = urlsplit(url)
    scheme = parts.scheme.lower()
    host = (parts.hostname or "").lower()
    if ":" in host:
        host = f"[{host}]"
    port = parts.port
    if port is None or port == DEFAULT_PORTS.get(scheme):
        return f"{scheme}://{host}"
    return f"{scheme}://{host}:{port}"


def is_loopback_host(host: str | None) -> bool:
    if not host:
        return False
    host = host.strip("[]").lower()
    if host == "localhost" or host.endswith(".localhost"):
        return True
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return False


@dataclass(frozen=True)
class Route:
    scheme: str
    host: str
    port: int
    host_header: str
    target: str


class EndpointMap:
    """Map logical origins to actual base URLs.

    >>> m = EndpointMap({"https://video.twimg.com": "http://127.0.0.1:8443"})
    >>> m.route("https://video.twimg.com/a.m4s?x=1").port
    8443
    """

    def __init__(self, routes: Mapping[str, str] | None = None):
        self._routes = {origin_of(k): v.rstrip("/") for k, v in (routes or {}).items()}

    @classmethod
    def parse(cls, items: Iterable[str]) -> "EndpointMap":
        routes = {}
        for item in items:
            origin, sep, base = item.partition("=")
            if not sep or not origin or not base:
                raise ValueError(f"endpoint override must look like ORIGIN=BASE, got {item!r}")
            routes[origin] = base
        return cls(routes)

    def merged(self, other: "EndpointMap") -> "EndpointMap":
        out = EndpointMap()
        out._routes = {**self._routes, **other._routes}
        return out

    def as_dict(self) -> dict[str, str]:
        return dict(self._routes)

    def actual_base(self, url: str) -> str:
        origin = origin_of(url)
        return self._routes.get(origin, origin)

    def route(self, url: str) -> Route:
        parts = urlsplit(url)
        if parts.scheme not in DEFAULT_PORTS:
            raise TransportError(f"unsupported scheme in {url!r}")
        if not parts.hostname:
            raise TransportError(f"no host in {url!r}")
        actual = urlsplit(self.actual_base(url))
        scheme = actual.scheme
        port = actual.port or DEFAULT_PORTS[scheme]
        host_header = parts.netloc.rpartition("@")[2]
        if parts.port == DEFAULT_PORTS[parts.scheme]:
            host_header = host_header.rsplit(":", 1)[0]
        target = parts.path or "/"
        if parts.query:
            target += "?" + parts.query
        return Route(scheme, actual.hostname or "", port, host_header, target)

    def is_loopback(self, url: str) -> bool:
        return is_loopback_host(urlsplit(self.actual_base(url)).hostname)


@dataclass
class Response:
    url: str
    status: int
    reason: str
    headers: list[tuple[str, str]]
    body: bytes | None
    body_length: int
    elapsed_ms: float
    redirects: list[str] = field(default_factory=list)

    def header(self, name: str) -> str | None:
        name = name.lower()
        for key, value in self.headers:
            if key.lower() == name:
                return value
        return None

    def header_all(self, name: str) -> list[str]:
        name = name.lower()
        return [v for k, v in self.headers if k.lower() == name]


class HttpClient:
    def __init__(self, endpoints: EndpointMap | None = None, limits: Limits | None = None):
        self.endpoints = endpoints or EndpointMap()
        self.limits = limits or Limits()
        self._last_external: float | None = None

    def is_loopback(self, url: str) -> bool:
        return self.endpoints.is_loopback(url)

    def require_local(self, urls: Iterable[str]) -> None:
        for url in urls:
            if not self.is_loopback(url):
                raise ExternalHostRefused(
                    f"{url} resolves to a non-loopback host; pass --yes-external to allow"
                )

    def pace(self, url: str) -> None:
        """Sleep so consecutive external requests are spaced by the delay."""
        if self.is_loopback(url) or self.limits.external_delay <= 0:
            return
        now = time.monotonic()
        if self._last_external is not None:
            wait = self._last_external + self.limits.external_delay - now
            if wait > 0:
                time.sleep(wait)
        self._last_external = time.monotonic()

    def get(
        self,
        url: str,
        headers: Iterable[tuple[str, str]] = (),
        *,
        sink: BinaryIO | None = None,
        follow_redirects: bool | None = None,
        timeout: float | None = None,
    ) -> Response:
        """Issue a single GET (plus same-origin redirect hops if enabled).

        With *sink* the body is streamed into it and ``Response.body`` is None.
        """
        follow = self.limits.follow_redirects if follow_redirects is None else follow_redirects
        headers = list(headers)
        hops: list[str] = []
        current = url
        while True:
            resp = self._get_once(current, headers, sink, timeout)
            resp.redirects = hops
            location = resp.header("location")
            if not (follow and 300 <= resp.status < 400 and location):
                return resp
            nxt = urljoin(current, location)
            if origin_of(nxt) != origin_of(current):
                log.info("not following cross-origin redirect %s -> %s", current, nxt)
                return resp
            if len(hops) >= self.limits.max_redirects:
                raise TransportError(f"too many redirects from {url}")
            hops.append(nxt)
            current = nxt

    def _get_once(self, url, headers, sink, timeout) -> Response:
        route = self.endpoints.route(url)
        timeout = self.limits.timeout if timeout is None else timeout
        if route.scheme == "https":
            conn: http.client.HTTPConnection = http.client.HTTPSConnection(
                route.host, route.port, timeout=timeout, context=ssl.create_default_context()
            )
        else:
            conn = http.client.HTTPConnection(route.host, route.port, timeout=timeout)
        started = time.perf_counter()
        try:
            conn.putrequest("GET", route.target, skip_host=True, skip_accept_encoding=True)
            if not any(k.lower() == "host" for k, _ in headers):
                conn.putheader("Host", route.host_header)
            for key, value in headers:
                conn.putheader(key, value)
            conn.endheaders()
            resp = conn.getresponse()
            # only successful bodies are streamed; error and redirect bodies stay in memory
            if sink is None or not 200 <= resp.status < 300:
                body: bytes | None = resp.read()
                length = len(body)
            else:
                body = None
                length = 0
                while chunk := resp.read(65536):
                    sink.write(chunk)
                    length += len(chunk)
            return Response(
                url=url,
                status=resp.status,
                reason=resp.reason,
                headers=list(resp.getheaders()),
                body=body,
                body_length=length,
                elapsed_ms=(time.perf_counter() - started) * 1000,
            )
        except http.client.RemoteDisconnected as exc:
            raise EmptyReply(f"empty reply from {url}") from exc
        except (socket.timeout, TimeoutError) as exc:
            raise RequestTimeout(f"timed out after {timeout}s: {url}") from exc
        except (OSError, http.client.HTTPException, ValueError) as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        finally:
            conn.close()
