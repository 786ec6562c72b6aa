"""Push every part to the (mock) archive, then rebuild the video from raw replays.

The round trip holds as long as the archive returns the bytes it was given.
Flipping one archived byte is enough to break it.
"""
import tempfile
from pathlib import Path

from dmaudit.archive import push_all, roundtrip_verify
from dmaudit.assembler import download_and_assemble
from dmaudit.mockserver import PLAYLIST_URL, MockServer, study_scenario
from dmaudit.playlist import parse_media_playlist
from dmaudit.transport import HttpClient

ARCHIVE = "https://web.archive.org"


def main():
    work = Path(tempfile.mkdtemp(prefix="dmaudit-demo-"))
    with MockServer(study_scenario(with_cdx=False)) as srv:
        client = HttpClient(srv.endpoint_map())
        playlist = parse_media_playlist(client.get(PLAYLIST_URL).body.decode(), PLAYLIST_URL)
        live = download_and_assemble(playlist, work / "live.mp4", client)

        # the mock is loopback, so no pacing is applied
        for r in push_all(playlist.part_uris(), ARCHIVE, client):
            print(r.snapshot.timestamp, r.url.rsplit("/", 1)[-1])

        report = roundtrip_verify(playlist, live, ARCHIVE, client, output=work / "archived.mp4")
        print("identical:", report.identical)

        victim = report.per_part[5]
        srv.state.corrupt_capture(victim.timestamp, victim.uri, 42)
        report = roundtrip_verify(playlist, live, ARCHIVE, client)
        print("after flipping one archived byte, identical:", report.identical)
    return report


if __name__ == "__main__":
    main()
