"""Audit of index references that could be taken over by recreating a forge namespace."""

from __future__ import annotations

import concurrent.futures
import json
import statistics
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

from .ingest import IndexEntry

STATES = ("ok", "redirected", "missing_repo_owner_exists", "missing_owner")
ELEVATED_STARS = 5


class ForgeUnavailable(RuntimeError):
    """Transport failure; distinct from a definite not-found answer."""


@dataclass(frozen=True)
class RepoLookup:
    kind: str  # ok | redirect | not_found
    owner: str = ""
    repo: str = ""
    stars: Optional[int] = None


class ForgeClient(Protocol):
    def lookup_repo(self, owner: str, repo: str) -> RepoLookup: ...

    def account_exists(self, owner: str) -> bool: ...


@dataclass(frozen=True)
class ReferenceStatus:
    state: str
    owner_name_free: Optional[bool] = None
    stars: int = 0
    installs: Optional[int] = None
    new_owner: str = ""
    new_repo: str = ""

    def to_dict(self) -> dict:
        d = {"state": self.state, "owner_name_free": self.owner_name_free,
             "popularity": {"stars": self.stars, "installs": self.installs}}
        if self.state == "redirected":
            d["redirect"] = {"owner": self.new_owner, "repo": self.new_repo}
        return d


@dataclass(frozen=True)
class HijackVerdict:
    verdict: str
    impact: str
    rationale: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class ReplayForge:
    """Answers lookups from scenario records (JSONL rows).

    ``repo_lookup`` is ``"ok"``, ``"not_found"``, ``{"redirect": {...}}`` or
    ``"error"`` (transport failure); ``account_lookup`` is ``exists`` or
    ``not_found``. Unknown references raise ForgeUnavailable.
    """

    def __init__(self, scenarios: list):
        self.repos = {}
        self.accounts = {}
        for row in scenarios:
            self.repos[(row["owner"], row["repo"])] = row
            if "account_lookup" in row:
                self.accounts[row["owner"]] = row["account_lookup"]

    @classmethod
    def from_file(cls, path) -> "ReplayForge":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def lookup_repo(self, owner: str, repo: str) -> RepoLookup:
        row = self.repos.get((owner, repo))
        if row is None:
            raise ForgeUnavailable(f"no scenario for {owner}/{repo}")
        answer = row["repo_lookup"]
        stars = row.get("stars")
        if answer == "error":
            raise ForgeUnavailable(f"transport error for {owner}/{repo}")
        if answer == "ok":
            return RepoLookup("ok", owner, repo, stars)
        if answer == "not_found":
            return RepoLookup("not_found", stars=stars)
        if isinstance(answer, dict) and "redirect" in answer:
            target = answer["redirect"]
            return RepoLookup("redirect", target["owner"], target["repo"], stars)
        raise ValueError(f"bad repo_lookup in scenario: {answer!r}")

    def account_exists(self, owner: str) -> bool:
        answer = self.accounts.get(owner)
        if answer is None:
            raise ForgeUnavailable(f"no account scenario for {owner}")
        if answer == "error":
            raise ForgeUnavailable(f"transport error for account {owner}")
        return answer == "exists"


class _NoRedirect(urllib.request.HTTPRedirectHandler):
    def redirect_request(self, *args, **kwargs):
        return None


class LiveForge:
    """GitHub-style REST client: repository lookups answer 200, 301 or 404."""

    def __init__(self, base_url: str = "https://api.github.com", token: Optional[str] = None,
                 opener: Optional[Callable] = None, timeout: float = 20.0):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout
        self._opener = opener or urllib.request.build_opener(_NoRedirect).open

    def _get(self, path_or_url: str):
        url = path_or_url if path_or_url.startswith("http") else self.base_url + path_or_url
        headers = {"Accept": "application/vnd.github+json", "User-Agent": "skillguard"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(url, headers=headers)
        try:
            with self._opener(req, timeout=self.timeout) as resp:
                return resp.status, dict(resp.headers), json.loads(resp.read() or b"{}")
        except urllib.error.HTTPError as exc:
            return exc.code, dict(exc.headers or {}), {}
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ForgeUnavailable(str(exc)) from exc

    def lookup_repo(self, owner: str, repo: str) -> RepoLookup:
        status, headers, body = self._get(f"/repos/{owner}/{repo}")
        if status in (301, 302, 307, 308):
            location = headers.get("Location") or headers.get("location") or body.get("url", "")
            if not location:
                raise ForgeUnavailable("redirect without location")
            status, headers, body = self._get(location)
            if status != 200:
                raise ForgeUnavailable(f"redirect target answered {status}")
        if status == 404:
            return RepoLookup("not_found")
        if status != 200:
            raise ForgeUnavailable(f"repository lookup answered {status}")
        new_owner, _, new_repo = body.get("full_name", f"{owner}/{repo}").partition("/")
        stars = body.get("stargazers_count")
        if (new_owner.lower(), new_repo.lower()) != (owner.lower(), repo.lower()):
            return RepoLookup("redirect", new_owner, new_repo, stars)
        return RepoLookup("ok", owner, repo, stars)

    def account_exists(self, owner: str) -> bool:
        status, _, _ = self._get(f"/users/{owner}")
        if status == 200:
            return True
        if status == 404:
            return False
        raise ForgeUnavailable(f"account lookup answered {status}")


def _int_or_none(value) -> Optional[int]:
    try:
        return int(str(value).replace(",", ""))
    except (TypeError, ValueError):
        return None


def probe_reference(entry: IndexEntry, forge: ForgeClient) -> ReferenceStatus:
    lookup = forge.lookup_repo(entry.owner, entry.repository)
    listed_stars = _int_or_none(entry.listing_metadata.get("stars"))
    stars = lookup.stars if lookup.stars is not None else (listed_stars or 0)
    installs = _int_or_none(entry.listing_metadata.get("installs"))
    if lookup.kind == "ok":
        return ReferenceStatus("ok", None, stars, installs)
    owner_free = not forge.account_exists(entry.owner)
    if lookup.kind == "redirect":
        return ReferenceStatus("redirected", owner_free, stars, installs, lookup.owner, lookup.repo)
    state = "missing_owner" if owner_free else "missing_repo_owner_exists"
    return ReferenceStatus(state, owner_free, stars, installs)


def classify_hijackability(status: ReferenceStatus, retirement_threshold: Optional[int] = None) -> HijackVerdict:
    impact = "elevated" if status.stars >= ELEVATED_STARS else "low"
    if status.state == "ok":
        return HijackVerdict("safe", "low", "reference resolves to the listed repository")
    if status.owner_name_free is False:
        return HijackVerdict("safe", "low", "original owner name is still registered")
    if status.owner_name_free is None:
        return HijackVerdict("possibly_protected", impact, "owner name availability unknown")
    if (retirement_threshold is not None and status.installs is not None
            and status.installs >= retirement_threshold):
        return HijackVerdict("possibly_protected", impact,
                             f"{status.installs} installs >= retirement threshold {retirement_threshold}")
    return HijackVerdict("vulnerable", impact,
                         f"{status.state}: owner name is free and can be re-registered")


@dataclass
class AuditRow:
    entry: IndexEntry
    status: ReferenceStatus
    verdict: HijackVerdict

    def to_dict(self) -> dict:
        return {"entry": self.entry.to_dict(), "status": self.status.to_dict(),
                "verdict": self.verdict.to_dict()}


def audit_index(entries: list, forge: ForgeClient, retirement_threshold: Optional[int] = None,
                workers: int = 4) -> dict:
    """Probe every forge-backed entry once per repository and summarize exposure.

    Hosted entries are skipped since the marketplace serves their files itself.
    Transport errors propagate.
    """
    forge_entries = [e for e in entries if e.platform != "hosted"]
    repos = list(dict.fromkeys((e.owner, e.repository) for e in forge_entries))
    representative = {}
    for e in forge_entries:
        representative.setdefault((e.owner, e.repository), e)

    def probe(key):
        return key, probe_reference(representative[key], forge)

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        base = dict(pool.map(probe, repos))

    rows = []
    for e in forge_entries:
        b = base[(e.owner, e.repository)]
        installs = _int_or_none(e.listing_metadata.get("installs"))
        status = ReferenceStatus(b.state, b.owner_name_free, b.stars, installs, b.new_owner, b.new_repo)
        rows.append(AuditRow(e, status, classify_hijackability(status, retirement_threshold)))

    vulnerable_rows = [r for r in rows if r.verdict.verdict == "vulnerable"]
    vulnerable_repos = sorted({r.entry.repo_id for r in vulnerable_rows})
    installs = [r.status.installs for r in vulnerable_rows if r.status.installs is not None]
    counts = {v: 0 for v in ("safe", "possibly_protected", "vulnerable")}
    for r in rows:
        counts[r.verdict.verdict] += 1
    summary = {
        "entries_probed": len(rows),
        "verdicts": counts,
        "vulnerable_repos": len(vulnerable_repos),
        "vulnerable_repo_ids": vulnerable_repos,
        "elevated_repos": sorted({r.entry.repo_id for r in vulnerable_rows if r.verdict.impact == "elevated"}),
        "affected_skills": len(vulnerable_rows),
        "downloads": {
            "median": statistics.median(installs) if installs else None,
            "max": max(installs) if installs else None,
        },
    }
    return {"rows": rows, "summary": summary}
