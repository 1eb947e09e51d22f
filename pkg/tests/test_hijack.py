import json
import urllib.error

import pytest
from hypothesis import given
from hypothesis import strategies as st

from skillguard.hijack import (
    ForgeUnavailable,
    LiveForge,
    ReferenceStatus,
    ReplayForge,
    audit_index,
    classify_hijackability,
    probe_reference,
)
from skillguard.ingest import IndexEntry


def entry(owner, repo, installs=None, platform="git-root", subpath=""):
    meta = {} if installs is None else {"installs": str(installs)}
    return IndexEntry(platform, owner, repo, subpath, meta)


def test_probe_ok():
    forge = ReplayForge([{"owner": "o", "repo": "r", "repo_lookup": "ok"}])
    assert probe_reference(entry("o", "r"), forge).state == "ok"


def test_probe_redirect_owner_free():
    forge = ReplayForge([{"owner": "old", "repo": "tool", "repo_lookup": {"redirect": {"owner": "neo", "repo": "tool"}},
                          "account_lookup": "not_found"}])
    s = probe_reference(entry("old", "tool"), forge)
    assert (s.state, s.owner_name_free, s.new_owner, s.new_repo) == ("redirected", True, "neo", "tool")


def test_probe_missing_owner():
    forge = ReplayForge([{"owner": "o", "repo": "r", "repo_lookup": "not_found", "account_lookup": "not_found"}])
    s = probe_reference(entry("o", "r"), forge)
    assert (s.state, s.owner_name_free) == ("missing_owner", True)


def test_transport_error_is_not_not_found():
    forge = ReplayForge([{"owner": "o", "repo": "r", "repo_lookup": "error"}])
    with pytest.raises(ForgeUnavailable):
        probe_reference(entry("o", "r"), forge)


@pytest.mark.parametrize("status, threshold, verdict, impact", [
    (ReferenceStatus("redirected", True, 159), None, "vulnerable", "elevated"),
    (ReferenceStatus("missing_owner", True, 2), None, "vulnerable", "low"),
    (ReferenceStatus("missing_owner", True, 2, 50_000), 10_000, "possibly_protected", "low"),
    (ReferenceStatus("missing_owner", True, 2, 50_000), None, "vulnerable", "low"),
    (ReferenceStatus("missing_owner", True, 2, None), 10_000, "vulnerable", "low"),
    (ReferenceStatus("redirected", False, 500), None, "safe", "low"),
    (ReferenceStatus("missing_repo_owner_exists", False, 3), None, "safe", "low"),
    (ReferenceStatus("ok", None, 900), None, "safe", "low"),
    (ReferenceStatus("missing_owner", True, 5), None, "vulnerable", "elevated"),
    (ReferenceStatus("missing_owner", True, 4), None, "vulnerable", "low"),
])
def test_classification_table(status, threshold, verdict, impact):
    v = classify_hijackability(status, threshold)
    assert (v.verdict, v.impact) == (verdict, impact)


_status = st.builds(ReferenceStatus, st.sampled_from(["ok", "redirected", "missing_repo_owner_exists", "missing_owner"]),
                    st.sampled_from([True, False, None]), st.integers(0, 500),
                    st.one_of(st.none(), st.integers(0, 10 ** 5)))


@given(_status, st.one_of(st.none(), st.integers(0, 10 ** 5)))
def test_classification_invariants(status, threshold):
    v = classify_hijackability(status, threshold)
    assert v == classify_hijackability(status, threshold)
    if status.state == "ok":
        assert v.verdict == "safe"
    if v.verdict == "vulnerable":
        assert status.owner_name_free is True


def _audit_fixture():
    """10 entries: 7 reference two vulnerable repositories."""
    scenarios = [
        {"owner": "gone", "repo": "a", "repo_lookup": "not_found", "account_lookup": "not_found"},
        {"owner": "old", "repo": "b", "repo_lookup": {"redirect": {"owner": "new", "repo": "b"}},
         "account_lookup": "not_found", "stars": 159},
        {"owner": "live", "repo": "c", "repo_lookup": "ok"},
        {"owner": "kept", "repo": "d", "repo_lookup": {"redirect": {"owner": "x", "repo": "d"}},
         "account_lookup": "exists"},
    ]
    entries = [entry("gone", "a", 25, "git-folder", f"s{i}") for i in range(3)]
    entries += [entry("old", "b", 2032, "git-folder", f"s{i}") for i in range(4)]
    entries += [entry("live", "c", 7), entry("kept", "d", 9), entry("market", "hosted-one", 3, "hosted")]
    return entries, ReplayForge(scenarios)


def test_audit_fixture_index():
    entries, forge = _audit_fixture()
    result = audit_index(entries, forge)
    s = result["summary"]
    assert s["vulnerable_repos"] == 2 and s["vulnerable_repo_ids"] == ["gone/a", "old/b"]
    assert s["affected_skills"] == 7 and s["entries_probed"] == 9
    assert s["elevated_repos"] == ["old/b"]
    assert s["downloads"] == {"median": 2032, "max": 2032}
    # affected skills recount: entries over vulnerable repos
    assert s["affected_skills"] == sum(1 for e in entries if e.repo_id in s["vulnerable_repo_ids"])


def test_audit_download_stats():
    forge = ReplayForge([{"owner": "g", "repo": "r", "repo_lookup": "not_found", "account_lookup": "not_found"}])
    result = audit_index([entry("g", "r", 25, "git-folder", "a"), entry("g", "r", 2032, "git-folder", "b"),
                          entry("g", "r", 25, "git-folder", "c")], forge)
    assert result["summary"]["downloads"] == {"median": 25, "max": 2032}


def test_audit_all_ok():
    forge = ReplayForge([{"owner": "o", "repo": f"r{i}", "repo_lookup": "ok"} for i in range(3)])
    result = audit_index([entry("o", f"r{i}") for i in range(3)], forge)
    assert result["summary"]["vulnerable_repos"] == 0 and result["summary"]["verdicts"]["safe"] == 3


def test_replay_from_file(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps({"owner": "o", "repo": "r", "repo_lookup": "ok"}) + "\n")
    assert ReplayForge.from_file(path).lookup_repo("o", "r").kind == "ok"


# -- live client against a stub transport ------------------------------------------------------

class _Resp:
    def __init__(self, status, body=b"{}", headers=None):
        self.status, self._body, self.headers = status, body, headers or {}

    def read(self):
        return self._body

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def stub_opener(routes):
    calls = []

    def opener(req, timeout=None):
        calls.append(req.full_url)
        status, body, headers = routes[req.full_url]
        if status >= 300:
            raise urllib.error.HTTPError(req.full_url, status, "x", headers, None)
        return _Resp(status, json.dumps(body).encode(), headers)

    return opener, calls


API = "https://forge.invalid"


def test_live_forge_redirect_and_accounts():
    opener, calls = stub_opener({
        f"{API}/repos/old/tool": (301, {}, {"Location": f"{API}/repositories/42"}),
        f"{API}/repositories/42": (200, {"full_name": "neo/tool", "stargazers_count": 159}, {}),
        f"{API}/users/old": (404, {}, {}),
        f"{API}/repos/o/r": (200, {"full_name": "o/r", "stargazers_count": 3}, {}),
        f"{API}/repos/o/gone": (404, {}, {}),
        f"{API}/users/o": (200, {}, {}),
        f"{API}/repos/o/broken": (502, {}, {}),
    })
    forge = LiveForge(API, opener=opener)
    s = probe_reference(entry("old", "tool"), forge)
    assert (s.state, s.owner_name_free, s.stars, s.new_owner) == ("redirected", True, 159, "neo")
    assert forge.lookup_repo("o", "r").kind == "ok"
    assert probe_reference(entry("o", "gone"), forge).state == "missing_repo_owner_exists"
    with pytest.raises(ForgeUnavailable):
        forge.lookup_repo("o", "broken")
    assert all(c.startswith(API) for c in calls)


def test_live_forge_transport_failure():
    def opener(req, timeout=None):
        raise urllib.error.URLError("no route")

    with pytest.raises(ForgeUnavailable):
        LiveForge(API, opener=opener).lookup_repo("o", "r")
