"""Is HTTPS actually enforced on the video host?

The host sends a long-lived STS header but also serves the same bytes over
plain http, and it is not on the preload list. A browser page with
connect-src https://*.twimg.com still refuses the http variant.
"""
from dmaudit.mockserver import PLAYLIST_URL, MockServer, study_scenario
from dmaudit.tlsaudit import EMPTY_SNAPSHOT, audit_https, parse_csp
from dmaudit.transport import HttpClient


def main():
    csp = parse_csp("connect-src 'self' https://*.twimg.com")
    with MockServer(study_scenario(with_cdx=False)) as srv:
        audit = audit_https(PLAYLIST_URL, HttpClient(srv.endpoint_map()), EMPTY_SNAPSHOT, csp, "https://twitter.com")
    print("STS:", audit.sts.raw if audit.sts else None)
    print("plain http served:", audit.plain.served)
    print("verdict:", audit.enforcement.verdict.value)
    for f in audit.enforcement.findings:
        print(" -", f.message)
    print("CSP https allowed:", audit.csp.https_allowed, "http allowed:", audit.csp.http_allowed)
    return audit


if __name__ == "__main__":
    main()
