"""Count other DM videos the archive already holds.

A prefix query over dm_video/ is deduplicated the same way the shell
pipeline does it (numeric sort on the id field, unique keys), with the
study's own id left out. URLs stay redacted.
"""
from dmaudit.archive import cdx_prefix_search, dedupe_by_media_id
from dmaudit.mockserver import STUDY_DM_ID, MockServer, study_scenario
from dmaudit.transport import HttpClient


def main():
    with MockServer(study_scenario()) as srv:
        client = HttpClient(srv.endpoint_map())
        result = cdx_prefix_search("video.twimg.com/dm_video/", "https://web.archive.org", client, page_size=50)
    summary = dedupe_by_media_id(result.records, exclude=[STUDY_DM_ID])
    d = summary.to_dict(redact=True)
    print("records:", len(result.records), "malformed lines:", len(result.malformed))
    print("pipeline line count:", d["line_count"])
    print("distinct ids:", d["unique_id_count"])
    print("earliest capture:", d["earliest"]["timestamp"])
    print("malformed records:", [m["timestamp"] for m in d["malformed"]])
    return summary


if __name__ == "__main__":
    main()
