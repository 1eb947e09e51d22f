"""Corpus ingestion: index parsing, budgeted fetching, content-addressed storage."""

from __future__ import annotations

import concurrent.futures
import json
import logging
import os
import re
import shutil
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

from .core import (
    SKILL_MANIFEST,
    Origin,
    SkillArtifact,
    SkillFile,
    canonical_encoding,
    decode_canonical,
)

log = logging.getLogger(__name__)

PLATFORMS = ("hosted", "git-folder", "git-root")
FETCH_STATUSES = ("ok", "missing-path", "missing-repo", "auth-required", "timeout", "size-exceeded")

DEFAULT_TIMEOUT = 120.0
DEFAULT_MAX_BYTES = 200 * 1024 * 1024


class UnreadableSource(OSError):
    pass


class FetchFailure(Exception):
    def __init__(self, status: str, detail: str = ""):
        assert status in FETCH_STATUSES and status != "ok"
        super().__init__(f"{status}: {detail}" if detail else status)
        self.status = status


class NotFound(KeyError):
    pass


class CorruptEntry(ValueError):
    pass


def utcnow() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class IndexEntry:
    platform: str
    owner: str
    repository: str
    subpath: str = ""
    listing_metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.platform not in PLATFORMS:
            raise ValueError(f"unknown platform {self.platform!r}")
        if not self.owner or not self.repository:
            raise ValueError("owner and repository are required")
        sub = self.subpath.strip("/")
        object.__setattr__(self, "subpath", "" if sub == "." else sub)
        if self.platform == "git-folder" and not self.subpath:
            raise ValueError("git-folder entries need a subpath")
        if self.platform == "git-root" and self.subpath:
            raise ValueError("git-root entries must not carry a subpath")

    @property
    def repo_id(self) -> str:
        return f"{self.owner}/{self.repository}"

    @classmethod
    def from_dict(cls, d: dict) -> "IndexEntry":
        meta = d.get("listing_metadata") or {}
        if not isinstance(meta, dict):
            raise ValueError("listing_metadata must be an object")
        return cls(
            platform=d["platform"],
            owner=d["owner"],
            repository=d["repository"],
            subpath=d.get("subpath") or "",
            listing_metadata={str(k): str(v) for k, v in meta.items()},
        )

    def to_dict(self) -> dict:
        return {
            "platform": self.platform,
            "owner": self.owner,
            "repository": self.repository,
            "subpath": self.subpath,
            "listing_metadata": dict(self.listing_metadata),
        }


@dataclass
class IndexLoad:
    entries: list
    skipped: int = 0


def ingest_index(source) -> IndexLoad:
    """Read an index JSONL document (path or text stream); malformed lines are skipped."""
    try:
        if hasattr(source, "read"):
            text = source.read()
        else:
            text = Path(source).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableSource(str(exc)) from exc
    load = IndexLoad([])
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("not an object")
            load.entries.append(IndexEntry.from_dict(obj))
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("index line %d skipped: %s", lineno, exc)
            load.skipped += 1
    return load


@dataclass(frozen=True)
class FetchBudget:
    clone_timeout: float = DEFAULT_TIMEOUT
    max_skill_dir_bytes: int = DEFAULT_MAX_BYTES

    def __post_init__(self):
        if self.clone_timeout <= 0 or self.max_skill_dir_bytes <= 0:
            raise ValueError("fetch budget values must be positive")


class RepositoryFetcher(Protocol):
    def fetch(self, owner: str, repository: str) -> dict:
        """Return {relative path: bytes} for the repository or raise FetchFailure."""


def _read_tree(root: Path) -> dict:
    tree = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d != ".git")
        for name in sorted(filenames):
            full = Path(dirpath) / name
            if full.is_symlink():
                continue
            rel = full.relative_to(root).as_posix()
            tree[rel] = full.read_bytes()
    return tree


class LocalFixtureFetcher:
    """Serves repositories from ``<root>/<owner>/<repository>`` directories.

    ``<root>/_unavailable.json`` may map ``owner/repository`` to a failure
    status to emulate auth walls and similar forge answers.
    """

    def __init__(self, root):
        self.root = Path(root)
        status_file = self.root / "_unavailable.json"
        self.overrides = json.loads(status_file.read_text()) if status_file.exists() else {}

    def fetch(self, owner: str, repository: str) -> dict:
        key = f"{owner}/{repository}"
        if key in self.overrides:
            raise FetchFailure(self.overrides[key])
        repo = self.root / owner / repository
        if not repo.is_dir():
            raise FetchFailure("missing-repo", key)
        return _read_tree(repo)


class ShallowGitFetcher:
    """Depth-1 ``git clone`` of ``<base_url>/<owner>/<repository>``."""

    def __init__(self, base_url: str = "https://github.com", timeout: float = DEFAULT_TIMEOUT):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def fetch(self, owner: str, repository: str) -> dict:
        url = f"{self.base_url}/{owner}/{repository}"
        tmp = tempfile.mkdtemp(prefix="skillguard-clone-")
        env = dict(os.environ, GIT_TERMINAL_PROMPT="0", GIT_ASKPASS="true")
        try:
            proc = subprocess.run(
                ["git", "clone", "--depth", "1", "--quiet", url, tmp + "/repo"],
                capture_output=True, text=True, timeout=self.timeout, env=env,
            )
            if proc.returncode != 0:
                err = proc.stderr.lower()
                if "could not read username" in err or "authentication failed" in err:
                    raise FetchFailure("auth-required", url)
                raise FetchFailure("missing-repo", url)
            return _read_tree(Path(tmp) / "repo")
        except subprocess.TimeoutExpired:
            raise FetchFailure("timeout", url)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)


def discover_skills(tree: Iterable[str]) -> list:
    """Directories holding a file named exactly SKILL.md; root is reported as '.'."""
    dirs = set()
    for path in tree:
        head, _, name = path.rpartition("/")
        if name == SKILL_MANIFEST:
            dirs.add(head or ".")
    return sorted(dirs, key=lambda d: "" if d == "." else d)


def _subtree(tree: dict, subdir: str) -> dict:
    if subdir in ("", "."):
        return dict(tree)
    prefix = subdir.rstrip("/") + "/"
    return {p[len(prefix):]: c for p, c in tree.items() if p.startswith(prefix)}


def _call_with_timeout(fn: Callable, timeout: float):
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
    future = pool.submit(fn)
    try:
        return future.result(timeout=timeout)
    except concurrent.futures.TimeoutError:
        raise FetchFailure("timeout", f"exceeded {timeout}s")
    finally:
        pool.shutdown(wait=False)


def fetch_skill(entry: IndexEntry, budget: FetchBudget, fetcher: RepositoryFetcher,
                retrieved_at: Optional[str] = None) -> list:
    """Fetch the skill(s) an index entry points at.

    Returns one artifact for hosted and git-folder entries and one per
    discovered SKILL.md directory for git-root entries. Budget violations
    raise FetchFailure; no partial artifact is ever returned.
    """
    tree = _call_with_timeout(lambda: fetcher.fetch(entry.owner, entry.repository),
                              budget.clone_timeout)
    retrieved_at = retrieved_at or utcnow()
    if entry.platform == "git-root":
        skill_dirs = discover_skills(tree)
        if not skill_dirs:
            raise FetchFailure("missing-path", "no SKILL.md in repository")
    else:
        skill_dirs = [entry.subpath or "."]

    artifacts = []
    for skill_dir in skill_dirs:
        files = _subtree(tree, skill_dir)
        if SKILL_MANIFEST not in files:
            raise FetchFailure("missing-path", f"{entry.repo_id}:{skill_dir}")
        size = sum(len(c) for c in files.values())
        if size > budget.max_skill_dir_bytes:
            raise FetchFailure("size-exceeded", f"{size} bytes under {skill_dir}")
        origin = Origin(entry.platform, entry.owner, entry.repository,
                        "" if skill_dir == "." else skill_dir, retrieved_at)
        artifacts.append(SkillArtifact(tuple(SkillFile(p, c) for p, c in files.items()), origin))
    return artifacts


def filter_candidates(repo_events: Iterable[dict], keywords: list) -> list:
    """Repository ids whose lowercase title or activity text contains a keyword."""
    keys = [k.lower() for k in keywords if k]
    if not keys:
        return []
    seen, out = set(), []
    for event in repo_events:
        repo_id = event.get("repo") or event.get("title")
        activity = event.get("activity") or ""
        if isinstance(activity, dict):
            activity = " ".join(str(v) for v in activity.values())
        haystack = f"{event.get('title') or repo_id} {activity}".lower()
        if repo_id not in seen and any(k in haystack for k in keys):
            seen.add(repo_id)
            out.append(repo_id)
    return out


@dataclass
class CatalogRecord:
    digest: str
    platform: str
    owner: str
    repository: str
    subpath: str
    retrieved_at: str
    fetch_status: str
    stored_at: str

    def __post_init__(self):
        if (self.fetch_status == "ok") != bool(self.digest):
            raise ValueError("digest must be set exactly when fetch_status is ok")

    @property
    def origin(self) -> Origin:
        return Origin(self.platform, self.owner, self.repository, self.subpath, self.retrieved_at)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class ContentStore:
    """objects/<first2hex>/<fullhex> blobs plus an append-only catalog.jsonl."""

    def __init__(self, root, clock: Callable[[], str] = utcnow):
        self.root = Path(root)
        self.objects = self.root / "objects"
        self.catalog_path = self.root / "catalog.jsonl"
        self.objects.mkdir(parents=True, exist_ok=True)
        self.catalog_path.touch(exist_ok=True)
        self.clock = clock
        self._lock = threading.Lock()

    def _object_path(self, hexdigest: str) -> Path:
        return self.objects / hexdigest[:2] / hexdigest

    def _append(self, record: CatalogRecord) -> None:
        with self._lock, open(self.catalog_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    def put(self, artifact: SkillArtifact) -> CatalogRecord:
        hexdigest = artifact.hexdigest
        target = self._object_path(hexdigest)
        if not target.exists():
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(canonical_encoding(artifact.files))
            os.replace(tmp, target)
        o = artifact.origin or Origin("hosted", "unknown", "unknown")
        record = CatalogRecord(hexdigest, o.platform, o.owner, o.repository, o.subpath,
                               o.retrieved_at, "ok", self.clock())
        self._append(record)
        return record

    def record_failure(self, entry: IndexEntry, status: str, retrieved_at: str = "") -> CatalogRecord:
        record = CatalogRecord("", entry.platform, entry.owner, entry.repository, entry.subpath,
                               retrieved_at, status, self.clock())
        self._append(record)
        return record

    def catalog(self) -> list:
        records = []
        with open(self.catalog_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(CatalogRecord(**json.loads(line)))
        return records

    def digests(self) -> list:
        """Stored digests in first-catalogued order."""
        seen, out = set(), []
        for rec in self.catalog():
            if rec.fetch_status == "ok" and rec.digest not in seen:
                seen.add(rec.digest)
                out.append(rec.digest)
        return out

    def origins(self) -> dict:
        out: dict = {}
        for rec in self.catalog():
            if rec.fetch_status == "ok":
                out.setdefault(rec.digest, []).append(rec.origin)
        return out

    def get(self, hexdigest: str, origin: Optional[Origin] = None) -> SkillArtifact:
        if not re.fullmatch(r"[0-9a-f]{64}", hexdigest):
            raise NotFound(hexdigest)
        path = self._object_path(hexdigest)
        if not path.exists():
            raise NotFound(hexdigest)
        try:
            artifact = SkillArtifact(tuple(decode_canonical(path.read_bytes())), origin)
        except ValueError as exc:
            raise CorruptEntry(f"{hexdigest}: {exc}") from exc
        if artifact.hexdigest != hexdigest:
            raise CorruptEntry(f"{hexdigest}: content digest is {artifact.hexdigest}")
        return artifact


def ingest_entries(entries: list, store: ContentStore, fetcher: RepositoryFetcher,
                   budget: FetchBudget = FetchBudget(), workers: int = 4) -> list:
    """Fetch every entry and record its outcome; results follow input order.

    Returns (entry, status, [digests]) triples. Store writes happen on the
    calling thread after each fetch resolves, so a timed-out fetch never
    leaves anything behind.
    """
    def job(entry):
        retrieved_at = utcnow()
        try:
            return entry, retrieved_at, fetch_skill(entry, budget, fetcher, retrieved_at)
        except FetchFailure as exc:
            return entry, retrieved_at, exc

    results = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for entry, retrieved_at, outcome in pool.map(job, entries):
            if isinstance(outcome, FetchFailure):
                store.record_failure(entry, outcome.status, retrieved_at)
                results.append((entry, outcome.status, []))
            else:
                digests = [store.put(a).digest for a in outcome]
                results.append((entry, "ok", digests))
    return results
