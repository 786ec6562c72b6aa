"""Regenerate src/dmaudit/data/dm_video_cdx.txt.

The index is synthetic. It is pinned to three observable facts about the
real dm_video/ prefix survey: the shell pipeline reports 103 lines once the
study id is filtered out, exactly one of those lines is a truncated URL
captured as a 404 on 2020-12-31, and the earliest well-formed capture is
from 2016-03-04 12:21:59. Everything else (ids, hashes, capture counts)
comes from a seeded RNG.

    python tools/make_cdx_fixture.py > src/dmaudit/data/dm_video_cdx.txt
"""

import random
import string
import sys
from datetime import datetime, timedelta, timezone

sys.path.insert(0, "src")
from dmaudit.archive import surt_key  # noqa: E402
from dmaudit.mockserver.scenario import PART_LENGTHS, STUDY_DM_ID, study_part_paths  # noqa: E402

TWITTER_EPOCH_MS = 1288834974657
UNIQUE_WELL_FORMED = 102
EARLIEST_TS = "20160304122159"
TRUNCATED = ("20201231013750", "http://video.twimg.com/dm_video/13443")
STUDY_TS = "20221208194342"
LATEST = datetime(2022, 12, 1, tzinfo=timezone.utc)

rng = random.Random(20221210)


def digest() -> str:
    return "".join(rng.choice(string.ascii_uppercase + "234567") for _ in range(32))


def token(n: int) -> str:
    return "".join(rng.choice(string.ascii_letters + string.digits + "-_") for _ in range(n))


def snowflake_time(media_id: int) -> datetime:
    return datetime.fromtimestamp(((media_id >> 22) + TWITTER_EPOCH_MS) / 1000, tz=timezone.utc)


def line(ts: str, original: str, mime: str, status: int, length: int) -> str:
    return f"{surt_key(original)} {ts} {original} {mime} {status} {digest()} {length}"


def variants(media_id: int) -> list[tuple[str, str]]:
    res = rng.choice(["320x180", "480x270", "640x360", "1280x720", "720x720", "480x480"])
    host = rng.choice(["https://video.twimg.com", "https://video.twimg.com", "http://video.twimg.com"])
    return [
        (f"{host}/dm_video/{media_id}/vid/{res}/{token(16)}.mp4?tag=1", "video/mp4"),
        (f"{host}/dm_video/{media_id}/pl/{token(16)}.m3u8?tag=1", "application/x-mpegURL"),
        (f"{host}/dm_video/{media_id}/vid/0/3000/{res}/{token(16)}.m4s", "video/mp4"),
    ]


def main() -> None:
    lines = []
    earliest_id = int("70284737" + "".join(rng.choice(string.digits) for _ in range(10)))
    lines.append(line(EARLIEST_TS, f"https://video.twimg.com/dm_video/{earliest_id}.mp4?_=1", "video/mp4", 200,
                      rng.randint(200_000, 3_000_000)))

    low, high = 710_000_000_000_000_000, 1_598_000_000_000_000_000
    ids = sorted(rng.sample(range(low, high), UNIQUE_WELL_FORMED - 1))
    for i, media_id in enumerate(ids):
        created = snowflake_time(media_id)
        for _ in range(rng.choice([1, 1, 1, 2, 2, 3, 4])):
            when = created + timedelta(days=rng.uniform(0, 400), seconds=rng.randint(0, 86399))
            when = min(when, LATEST - timedelta(seconds=rng.randint(0, 86400 * 30)))
            original, mime = rng.choice(variants(media_id))
            if i == 17:
                original = original.replace("https://video.twimg.com/", "http://video.twimg.com:80/", 1)
            lines.append(line(when.strftime("%Y%m%d%H%M%S"), original, mime, rng.choice([200, 200, 200, 302]),
                              rng.randint(300, 3_000_000)))

    lines.append(line(*TRUNCATED, "text/html", 404, 1734))
    for path, length in zip(study_part_paths(), PART_LENGTHS):
        assert STUDY_DM_ID in path
        lines.append(line(STUDY_TS, "https://video.twimg.com" + path, "video/mp4", 200, length))

    lines.sort(key=lambda ln: ln.split()[:2])
    sys.stdout.write("".join(ln + "\n" for ln in lines))


if __name__ == "__main__":
    main()
