"""Rebuild the DM video from its playlist.

The init section and eleven segments are fetched with no cookies at all,
then concatenated in playlist order.
"""
import sys
import tempfile
from pathlib import Path

from dmaudit.assembler import download_and_assemble
from dmaudit.mockserver import PLAYLIST_URL, MockServer, study_scenario
from dmaudit.playlist import parse_media_playlist, total_duration
from dmaudit.transport import HttpClient


def main(out_dir=None):
    out_dir = Path(out_dir or tempfile.mkdtemp(prefix="dmaudit-demo-"))
    with MockServer(study_scenario(with_cdx=False)) as srv:
        client = HttpClient(srv.endpoint_map())
        text = client.get(PLAYLIST_URL).body.decode()
        playlist = parse_media_playlist(text, PLAYLIST_URL)
        print(f"{len(playlist.segments)} segments, {total_duration(playlist)} s, init {playlist.init_section_uri}")
        report = download_and_assemble(playlist, out_dir / "video.mp4", client)
    print(f"wrote {report.total_bytes} bytes from {report.part_count} parts")
    print("sha256", report.digest)
    return report


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
