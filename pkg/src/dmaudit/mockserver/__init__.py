"""Offline behaviour twin of the image, video and archive services."""

from .scenario import (
    IMAGE_ORIGIN,
    IMAGE_PATH,
    PART_LENGTHS,
    PLAYLIST_PATH,
    PLAYLIST_QUERY,
    STUDY_DM_ID,
    VIDEO_ORIGIN,
    Capture,
    ImageRoute,
    InvalidTransition,
    Phase,
    ScenarioConfig,
    ScenarioError,
    SessionState,
    VideoRoute,
    load_scenario,
    study_scenario,
    scenario_from_dict,
)
from .server import HTTP_ROLE, HTTPS_ROLE, BindFailed, MockClock, MockServer, MockState, serve

IMAGE_URL = IMAGE_ORIGIN + IMAGE_PATH
PLAYLIST_URL = f"{VIDEO_ORIGIN}{PLAYLIST_PATH}?{PLAYLIST_QUERY}"
