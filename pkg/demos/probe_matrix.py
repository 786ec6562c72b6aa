"""Differential probing of the DM image route.

Five header profiles hit the same URL. The image answers differently to
each, and the classifier turns those answers into protection verdicts.
The playlist on the video host answers 200 to all of them.
"""
from dmaudit.mockserver import IMAGE_URL, PLAYLIST_URL, MockServer, study_scenario
from dmaudit.probe import build_default_matrix, classify, format_matrix, run_matrix, summarize
from dmaudit.transport import HttpClient


def main():
    with MockServer(study_scenario(with_cdx=False)) as srv:
        client = HttpClient(srv.endpoint_map())
        for url in (IMAGE_URL, PLAYLIST_URL):
            matrix = run_matrix(url, build_default_matrix(), client)
            print(url)
            print(format_matrix(matrix))
            print("  ->", summarize(classify(matrix)))
            print()


if __name__ == "__main__":
    main()
