"""Scenario description for the mock server, and the built-in study scenario."""

from __future__ import annotations

import base64
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from ..playlist import parse_media_playlist

VIDEO_ORIGIN = "https://video.twimg.com"
IMAGE_ORIGIN = "https://ton.twitter.com"
SITE_ORIGIN = "https://twitter.com"
ARCHIVE_ORIGIN = "https://web.archive.org"
LOGICAL_HOSTS = ("video.twimg.com", "ton.twitter.com", "twitter.com", "web.archive.org")

COOKIE_NAME = "auth_token"
STUDY_STS = "max-age=631138519"
STUDY_CSP = "connect-src 'self' https://*.twimg.com/"
STUDY_CLOCK = "20221208194342"

PLAYLIST_PATH = "/dm_video/1600877027330064385/pl/320x180/Vn4h391lbQ0jfr1D.m3u8"
PLAYLIST_QUERY = "container=fmp4"
IMAGE_PATH = "/i/ton/data/dm/1600870219324465156/1600870190459256832/KM0EBzij.jpg:small"
IMAGE_LENGTH = 22425
STUDY_DM_ID = "1600877027330064385"
# init section first, then the eleven segments, in playlist order
PART_LENGTHS = (1130, 37919, 35423, 36960, 43395, 47333, 41711, 38884, 36449, 32279, 32413, 22617)


class Phase(str, Enum):
    ACTIVE = "ACTIVE"
    CLOSED = "CLOSED"
    EXPIRED = "EXPIRED"


ALLOWED_TRANSITIONS = {
    (Phase.ACTIVE, Phase.CLOSED),
    (Phase.CLOSED, Phase.ACTIVE),
    (Phase.CLOSED, Phase.EXPIRED),
}


class ScenarioError(ValueError):
    pass


class InvalidTransition(ScenarioError):
    pass


@dataclass
class SessionState:
    session_id: str
    parties: frozenset
    phase: Phase = Phase.ACTIVE
    cookie_tokens: dict = field(default_factory=dict)  # account -> opaque token

    def transition(self, new: Phase) -> None:
        new = Phase(new)
        if new == self.phase:
            return
        if (self.phase, new) not in ALLOWED_TRANSITIONS:
            raise InvalidTransition(f"session {self.session_id}: {self.phase.value} -> {new.value} is not allowed")
        self.phase = new

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "parties": sorted(self.parties),
            "phase": self.phase.value,
            "cookie_tokens": dict(self.cookie_tokens),
        }


@dataclass
class ImageRoute:
    path: str
    body: bytes
    session_id: str


@dataclass
class VideoRoute:
    path: str
    body: bytes
    plain_http_allowed: bool = True
    content_type: str = "video/mp4"


@dataclass
class Capture:
    timestamp: str
    original: str
    body: bytes
    status: int = 200
    mimetype: str = "application/octet-stream"


@dataclass
class ScenarioConfig:
    sessions: list[SessionState] = field(default_factory=list)
    image_routes: list[ImageRoute] = field(default_factory=list)
    video_routes: list[VideoRoute] = field(default_factory=list)
    playlist_routes: list[VideoRoute] = field(default_factory=list)
    archive_store: list[Capture] = field(default_factory=list)
    cdx_lines: list[str] = field(default_factory=list)
    sts_header_value: str | None = STUDY_STS
    csp_header_value: str | None = STUDY_CSP
    clock_start: str = STUDY_CLOCK
    plain_listener: bool = True

    def validate(self) -> None:
        ids = [s.session_id for s in self.sessions]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate session ids: {ids}")
        tokens = [t for s in self.sessions for t in s.cookie_tokens.values()]
        if len(set(tokens)) != len(tokens):
            raise ScenarioError("cookie tokens must be unique across sessions")
        for s in self.sessions:
            stray = set(s.cookie_tokens) - set(s.parties)
            if stray:
                raise ScenarioError(f"session {s.session_id} has tokens for non-parties {sorted(stray)}")
        for r in self.image_routes:
            if r.session_id not in ids:
                raise ScenarioError(f"image route {r.path} references unknown session {r.session_id!r}")
        paths = [r.path for r in self.image_routes + self.video_routes + self.playlist_routes]
        if len(set(paths)) != len(paths):
            raise ScenarioError("route paths must be unique")
        for p in paths:
            if not p.startswith("/") or p.startswith(("/admin/", "/save/", "/web/", "/cdx/")) or p == "/health":
                raise ScenarioError(f"route path {p!r} is reserved or not absolute")
        if not (len(self.clock_start) == 14 and self.clock_start.isdigit()):
            raise ScenarioError(f"clock_start must be 14 digits, got {self.clock_start!r}")


def fixture_bytes(length: int, seed: str | int) -> bytes:
    """Deterministic stand-in content of an exact length."""
    return random.Random(seed).randbytes(length)


def study_playlist_text() -> str:
    return resources.files("dmaudit.data").joinpath("study_playlist.m3u8").read_text(encoding="utf-8")


def study_cdx_lines() -> list[str]:
    text = resources.files("dmaudit.data").joinpath("dm_video_cdx.txt").read_text(encoding="utf-8")
    return [ln for ln in text.splitlines() if ln.strip()]


def study_part_paths() -> list[str]:
    p = parse_media_playlist(study_playlist_text(), f"{VIDEO_ORIGIN}{PLAYLIST_PATH}?{PLAYLIST_QUERY}")
    return [u[len(VIDEO_ORIGIN):] for u in p.part_uris()]


def study_scenario(with_cdx: bool = True) -> ScenarioConfig:
    """Two parties sharing an image and a video, an older expired session
    of the same pair, and a third account in an unrelated session."""
    sessions = [
        SessionState(
            "wk-bk",
            frozenset({"WhiteKitty2012", "BKitty2020"}),
            Phase.ACTIVE,
            {"WhiteKitty2012": "SESSION-PARTY-TOKEN", "BKitty2020": "BKITTY-PARTY-TOKEN"},
        ),
        SessionState(
            "wk-bk-old",
            frozenset({"WhiteKitty2012", "BKitty2020"}),
            Phase.EXPIRED,
            {"WhiteKitty2012": "EXPIRED-SESSION-TOKEN", "BKitty2020": "BKITTY-EXPIRED-TOKEN"},
        ),
        SessionState("kitten", frozenset({"kitten2017_"}), Phase.ACTIVE, {"kitten2017_": "THIRD-PARTY-TOKEN"}),
    ]
    parts = study_part_paths()
    video = [
        VideoRoute(path, fixture_bytes(n, f"part-{i:02d}"), True, "video/mp4")
        for i, (path, n) in enumerate(zip(parts, PART_LENGTHS))
    ]
    playlist = VideoRoute(PLAYLIST_PATH, study_playlist_text().encode("utf-8"), True, "application/x-mpegURL")
    return ScenarioConfig(
        sessions=sessions,
        image_routes=[ImageRoute(IMAGE_PATH, fixture_bytes(IMAGE_LENGTH, "image"), "wk-bk")],
        video_routes=video,
        playlist_routes=[playlist],
        cdx_lines=study_cdx_lines() if with_cdx else [],
    )


# JSON loading


def _body(spec: Any, base_dir: Path) -> bytes:
    if isinstance(spec, str):
        return spec.encode("utf-8")
    if not isinstance(spec, Mapping) or len(spec) == 0:
        raise ScenarioError(f"cannot interpret body spec {spec!r}")
    if "text" in spec:
        return spec["text"].encode("utf-8")
    if "base64" in spec:
        return base64.b64decode(spec["base64"], validate=True)
    if "random" in spec:
        return fixture_bytes(int(spec["random"]), spec.get("seed", 0))
    if "file" in spec:
        return (base_dir / spec["file"]).read_bytes()
    if "package" in spec:
        return resources.files("dmaudit.data").joinpath(spec["package"]).read_bytes()
    raise ScenarioError(f"unknown body spec keys {sorted(spec)}")


def scenario_from_dict(doc: Mapping, base_dir: str | Path = ".") -> ScenarioConfig:
    """Build a scenario from its JSON form.

    ``{"preset": "study"}`` starts from the built-in scenario; any other
    keys given alongside replace the corresponding preset fields.
    """
    base_dir = Path(base_dir)
    cfg = study_scenario() if doc.get("preset") == "study" else ScenarioConfig()
    if "sessions" in doc:
        cfg.sessions = [
            SessionState(s["session_id"], frozenset(s["parties"]), Phase(s.get("phase", "ACTIVE")),
                         dict(s.get("cookie_tokens", {})))
            for s in doc["sessions"]
        ]
    if "image_routes" in doc:
        cfg.image_routes = [ImageRoute(r["path"], _body(r["body"], base_dir), r["session"]) for r in doc["image_routes"]]
    if "video_routes" in doc:
        cfg.video_routes = [
            VideoRoute(r["path"], _body(r["body"], base_dir), r.get("plain_http_allowed", True),
                       r.get("content_type", "video/mp4"))
            for r in doc["video_routes"]
        ]
    if "playlist_routes" in doc:
        cfg.playlist_routes = [
            VideoRoute(r["path"], _body(r["body"], base_dir), r.get("plain_http_allowed", True),
                       r.get("content_type", "application/x-mpegURL"))
            for r in doc["playlist_routes"]
        ]
    if "archive_store" in doc:
        cfg.archive_store = [
            Capture(c["timestamp"], c["original"], _body(c["body"], base_dir), c.get("status", 200),
                    c.get("mimetype", "application/octet-stream"))
            for c in doc["archive_store"]
        ]
    if "cdx_lines" in doc:
        src = doc["cdx_lines"]
        text = src if isinstance(src, str) else _body(src, base_dir).decode("utf-8")
        cfg.cdx_lines = [ln for ln in text.splitlines() if ln.strip()]
    for key in ("sts_header_value", "csp_header_value", "clock_start", "plain_listener"):
        if key in doc:
            setattr(cfg, key, doc[key])
    cfg.validate()
    return cfg


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    return scenario_from_dict(json.loads(path.read_text(encoding="utf-8")), path.parent)
