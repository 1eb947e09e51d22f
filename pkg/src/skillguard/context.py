"""Repository-aware rescoring of flagged skills.

Scores are carried as exact fractions; round only when displaying.

Metadata buckets (points per signal, score = mean of the six):

=========  ==============================================================
size       < 2 MB: 20 | 2-50 MB: 60 | > 50 MB: 100
age        < 2 weeks: 10 | < 4 months: 40 | < 1 year: 70 | older: 100
recency    < 1 week: 100 | < 1 month: 70 | < 6 months: 40 | older: 10
stars      0: 0 | 1-99: 40 | 100-999: 80 | >= 1000: 100
forks      0: 0 | 1-99: 50 | >= 100: 100
issues     0: 20 | 1-20: 70 | > 20: 100
=========  ==============================================================

Codebase points: baseline by repository maliciousness (low 40, medium 20,
high 0) plus domain match (0/10/20), code similarity (0/10/20), README
consistency (0/5/10) and support signals (0/7); maximum 97.
"""

from __future__ import annotations

import json
import math
import posixpath
import re
import statistics
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from fractions import Fraction
from typing import Callable, Optional, Protocol

from .core import SKILL_MANIFEST, ParseError, SkillArtifact, parse_manifest
from .features import BackendUnavailable, MalformedBackendAnswer, estimate_tokens
from .scanner import ScanReport, Severity, load_rules, scan

MB = 1024 * 1024
LEVELS = ("low", "medium", "high")
SHARED_DOC_LINES = 200
MAX_CODE_FILES = 3
CODE_FILE_LINES = 100
CODE_SUFFIXES = frozenset({
    "py", "js", "ts", "tsx", "jsx", "mjs", "sh", "bash", "zsh", "ps1", "rb", "go", "rs",
    "java", "kt", "c", "h", "cc", "cpp", "hpp", "cs", "php", "swift", "scala", "lua",
})

AGE_BUCKETS = ((timedelta(weeks=2), 10), (timedelta(days=120), 40), (timedelta(days=365), 70), (None, 100))
RECENCY_BUCKETS = ((timedelta(days=7), 100), (timedelta(days=30), 70), (timedelta(days=182), 40), (None, 10))

MALICIOUSNESS_BASELINE = {"low": 40, "medium": 20, "high": 0}
DOMAIN_POINTS = {"low": 0, "medium": 10, "high": 20}
SIMILARITY_POINTS = {"low": 0, "medium": 10, "high": 20}
README_POINTS = {"low": 0, "medium": 5, "high": 10}
SUPPORT_POINTS = 7


class ClockSkew(ValueError):
    pass


class OutOfRange(ValueError):
    pass


class MissingSkillFile(FileNotFoundError):
    pass


class EmptyInput(ValueError):
    pass


class InsufficientRepos(ValueError):
    pass


def parse_time(value) -> datetime:
    if isinstance(value, datetime):
        return value if value.tzinfo else value.replace(tzinfo=timezone.utc)
    dt = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    return dt if dt.tzinfo else dt.replace(tzinfo=timezone.utc)


@dataclass(frozen=True)
class RepoMetadata:
    size_bytes: int
    created_at: datetime
    last_update: datetime
    stars: int = 0
    forks: int = 0
    open_issues: int = 0

    def __post_init__(self):
        object.__setattr__(self, "created_at", parse_time(self.created_at))
        object.__setattr__(self, "last_update", parse_time(self.last_update))
        if self.created_at > self.last_update:
            raise ValueError("created_at is after last_update")
        if min(self.size_bytes, self.stars, self.forks, self.open_issues) < 0:
            raise ValueError("metadata counts must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "RepoMetadata":
        return cls(int(d["size_bytes"]), d["created_at"], d["last_update"],
                   int(d.get("stars", 0)), int(d.get("forks", 0)), int(d.get("open_issues", 0)))


def _bucket(value, buckets) -> int:
    for bound, points in buckets:
        if bound is None or value < bound:
            return points
    raise AssertionError("unreachable")


def metadata_points(meta: RepoMetadata, now) -> dict:
    now = parse_time(now)
    if meta.created_at > now:
        raise ClockSkew(f"repository created in the future ({meta.created_at} > {now})")
    size = 20 if meta.size_bytes < 2 * MB else (60 if meta.size_bytes <= 50 * MB else 100)
    stars = 0 if meta.stars == 0 else 40 if meta.stars < 100 else 80 if meta.stars < 1000 else 100
    forks = 0 if meta.forks == 0 else 50 if meta.forks < 100 else 100
    issues = 20 if meta.open_issues == 0 else 70 if meta.open_issues <= 20 else 100
    return {
        "size": size,
        "age": _bucket(now - meta.created_at, AGE_BUCKETS),
        "recency": _bucket(max(now - meta.last_update, timedelta(0)), RECENCY_BUCKETS),
        "stars": stars,
        "forks": forks,
        "issues": issues,
    }


def metadata_score(meta: RepoMetadata, now) -> Fraction:
    points = metadata_points(meta, now)
    return Fraction(sum(points.values()), len(points))


@dataclass(frozen=True)
class AlignmentAssessment:
    domain_match: str
    code_similarity: str
    readme_consistency: str
    support_signals: bool
    maliciousness: str
    is_security_tool: bool

    def __post_init__(self):
        for name in ("domain_match", "code_similarity", "readme_consistency", "maliciousness"):
            if getattr(self, name) not in LEVELS:
                raise ValueError(f"{name} must be one of {LEVELS}")
        if not isinstance(self.support_signals, bool) or not isinstance(self.is_security_tool, bool):
            raise ValueError("support_signals and is_security_tool must be booleans")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "AlignmentAssessment":
        keys = ("domain_match", "code_similarity", "readme_consistency", "support_signals",
                "maliciousness", "is_security_tool")
        if not isinstance(d, dict) or set(d) != set(keys):
            raise ValueError(f"assessment must have exactly {keys}")
        return cls(**d)


def codebase_score(a: AlignmentAssessment) -> int:
    return (MALICIOUSNESS_BASELINE[a.maliciousness] + DOMAIN_POINTS[a.domain_match]
            + SIMILARITY_POINTS[a.code_similarity] + README_POINTS[a.readme_consistency]
            + (SUPPORT_POINTS if a.support_signals else 0))


def _exact(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


def combine(codebase, metadata) -> Fraction:
    """0.7 * codebase + 0.3 * metadata, exactly."""
    c, m = _exact(codebase), _exact(metadata)
    if not (0 <= c <= 100 and 0 <= m <= 100):
        raise OutOfRange(f"scores must lie in [0, 100]: {codebase}, {metadata}")
    return Fraction(7, 10) * c + Fraction(3, 10) * m


def categorize(combined) -> str:
    value = _exact(combined)
    if value < 40:
        return "low"
    if value < 60:
        return "intermediate"
    return "high"


def detect_suspicious(a: AlignmentAssessment) -> bool:
    return (a.maliciousness in ("medium", "high") and not a.is_security_tool
            and (a.domain_match != "low" or a.code_similarity != "low"))


@dataclass(frozen=True)
class ContextScore:
    codebase: Fraction
    metadata: Fraction
    combined: Fraction
    category: str
    suspicious: bool
    repo_id: str = ""
    repos: tuple = ()

    def to_dict(self) -> dict:
        return {
            "repo_id": self.repo_id,
            "codebase": display(self.codebase, 4),
            "metadata": display(self.metadata, 4),
            "combined": display(self.combined, 4),
            "category": self.category,
            "suspicious": self.suspicious,
        }


def display(x, places: int = 1) -> float:
    return round(float(x), places)


def score_repository(assessment: AlignmentAssessment, meta: RepoMetadata, now, repo_id: str = "") -> ContextScore:
    cb = Fraction(codebase_score(assessment))
    md = metadata_score(meta, now)
    comb = combine(cb, md)
    return ContextScore(cb, md, comb, categorize(comb), detect_suspicious(assessment), repo_id)


def aggregate_cross_repo(scores: list) -> ContextScore:
    """Mean over the three most relevant repositories (highest metadata score)."""
    if not scores:
        raise EmptyInput("no repository scores")
    ranked = sorted(scores, key=lambda s: (-s.metadata, -s.codebase, s.repo_id))[:3]
    n = len(ranked)
    codebase = sum((s.codebase for s in ranked), Fraction(0)) / n
    metadata = sum((s.metadata for s in ranked), Fraction(0)) / n
    combined = sum((s.combined for s in ranked), Fraction(0)) / n
    repo_id = ranked[0].repo_id if n == 1 else ""
    return ContextScore(codebase, metadata, combined, categorize(combined),
                        any(s.suspicious for s in ranked), repo_id, tuple(s.repo_id for s in ranked))


@dataclass(frozen=True)
class Dispersion:
    variance: float
    std: float
    range: float


def cross_repo_dispersion(codebase_scores: list) -> Dispersion:
    if len(codebase_scores) < 2:
        raise InsufficientRepos("need at least two repositories")
    values = [_exact(v) for v in codebase_scores]
    var = statistics.pvariance(values)
    return Dispersion(float(var), math.sqrt(var), float(max(values) - min(values)))


# -- context bundles ---------------------------------------------------------

@dataclass(frozen=True)
class ContextBundle:
    skill_md_excerpt: tuple
    readme_excerpt: tuple
    code_files: tuple
    has_readme: bool
    has_code: bool
    skill_path: str = ""
    file_listing: tuple = ()

    @property
    def doc_lines(self) -> int:
        return len(self.skill_md_excerpt) + len(self.readme_excerpt)

    def stats(self) -> dict:
        return {
            "skill_md_lines": len(self.skill_md_excerpt),
            "readme_lines": len(self.readme_excerpt),
            "code_files": [p for p, _ in self.code_files],
            "code_lines": sum(len(lines) for _, lines in self.code_files),
            "has_readme": self.has_readme,
            "has_code": self.has_code,
        }

    def to_request(self) -> dict:
        return {
            "skill_md_excerpt": "\n".join(self.skill_md_excerpt),
            "readme_excerpt": "\n".join(self.readme_excerpt),
            "code_files": {p: "\n".join(lines) for p, lines in self.code_files},
            "file_listing": list(self.file_listing),
        }


def _lines(content: bytes) -> list:
    return content.decode("utf-8", errors="replace").splitlines()


def _find_readme(tree: dict, skill_dir: str) -> Optional[str]:
    def readme_in(directory):
        prefix = f"{directory}/" if directory else ""
        names = sorted(p for p in tree if p.startswith(prefix) and "/" not in p[len(prefix):]
                       and p[len(prefix):].lower().split(".")[0] == "readme")
        return names[0] if names else None

    return readme_in("") or (readme_in(skill_dir) if skill_dir else None)


def _dir_distance(a: str, b: str) -> int:
    pa = [p for p in a.split("/") if p]
    pb = [p for p in b.split("/") if p]
    common = 0
    for x, y in zip(pa, pb):
        if x != y:
            break
        common += 1
    return (len(pa) - common) + (len(pb) - common)


def build_context_bundle(repo_tree: dict, skill_path: str) -> ContextBundle:
    """Collect the line-budgeted repository context for one skill.

    SKILL.md comes first, then the README head up to a shared 200-line
    budget. Up to three code files are taken, preferring files in the skill
    directory, then the fewest directory hops away, then larger files, and
    each is cut to 100 lines.
    """
    skill_dir = "" if skill_path in ("", ".") else skill_path.strip("/")
    manifest_path = posixpath.join(skill_dir, SKILL_MANIFEST) if skill_dir else SKILL_MANIFEST
    if manifest_path not in repo_tree:
        raise MissingSkillFile(manifest_path)
    skill_lines = _lines(repo_tree[manifest_path])[:SHARED_DOC_LINES]
    readme_path = _find_readme(repo_tree, skill_dir)
    readme_lines = []
    if readme_path:
        readme_lines = _lines(repo_tree[readme_path])[:SHARED_DOC_LINES - len(skill_lines)]

    candidates = [p for p in repo_tree if p.rsplit(".", 1)[-1].lower() in CODE_SUFFIXES and "." in p]

    def rank(path):
        directory = posixpath.dirname(path)
        return (directory != skill_dir, _dir_distance(directory, skill_dir), -len(repo_tree[path]), path)

    chosen = sorted(candidates, key=rank)[:MAX_CODE_FILES]
    code_files = tuple((p, tuple(_lines(repo_tree[p])[:CODE_FILE_LINES])) for p in chosen)
    return ContextBundle(tuple(skill_lines), tuple(readme_lines), code_files, readme_path is not None,
                         bool(candidates), skill_dir, tuple(sorted(repo_tree)))


# -- alignment backends ------------------------------------------------------

class AlignmentBackend(Protocol):
    def assess(self, bundle: ContextBundle) -> AlignmentAssessment:
        ...


_WORD = re.compile(r"[a-z][a-z0-9]{2,}")
STOPWORDS = frozenset("""the and for with this that from your you use when are can will into
not all any has have its our out via using used skill skills agent agents file files tool
tools code run runs make makes help helps based about more also than then them they their
what which while where who how get set new one two may must should would could other""".split())
SECURITY_TOOL = re.compile(r"\b(security|pentest\w*|penetration test\w*|red team\w*|vulnerabilit\w+|"
                           r"exploit\w*|malware analysis|ctf|forensic\w*|threat intel\w*|"
                           r"secret scann\w*)\b", re.IGNORECASE)
SUPPORT_FILES = re.compile(r"(^|/)(tests?/|\.github/workflows/|LICENSE|docs/|CONTRIBUTING|CHANGELOG)",
                           re.IGNORECASE)


def keywords(text: str) -> set:
    return {w for w in _WORD.findall(text.lower()) if w not in STOPWORDS}


def _level(ratio: float) -> str:
    return "high" if ratio >= 0.5 else "medium" if ratio >= 0.2 else "low"


class HeuristicAlignmentBackend:
    """Keyword-overlap alignment plus scanner-driven maliciousness, offline and deterministic."""

    def __init__(self, rules: Optional[list] = None):
        self.rules = rules if rules is not None else load_rules()

    def assess(self, bundle: ContextBundle) -> AlignmentAssessment:
        skill_text = "\n".join(bundle.skill_md_excerpt)
        try:
            manifest = parse_manifest(skill_text)
            skill_terms = keywords(f"{manifest.name.replace('-', ' ')} {manifest.description}")
            name = manifest.name
        except ParseError:
            skill_terms, name = keywords(skill_text), ""
        readme = "\n".join(bundle.readme_excerpt)
        code = "\n".join("\n".join(lines) for _, lines in bundle.code_files)
        readme_terms, code_terms = keywords(readme), keywords(code)
        denom = max(1, len(skill_terms))

        domain = _level(len(skill_terms & readme_terms) / denom) if bundle.has_readme else "low"
        similarity = _level(len(skill_terms & code_terms) / denom) if bundle.code_files else "low"
        if not bundle.has_readme:
            consistency = "low"
        elif name and name.lower() in readme.lower():
            consistency = "high"
        else:
            consistency = "medium" if skill_terms & readme_terms else "low"
        support = sum(1 for p in bundle.file_listing if SUPPORT_FILES.search(p)) > 0

        repo_files = {"SKILL.md": skill_text.encode()}
        if readme:
            repo_files["context/README.md"] = readme.encode()
        for i, (path, lines) in enumerate(bundle.code_files):
            repo_files[f"context/{i}/{path.rsplit('/', 1)[-1]}"] = "\n".join(lines).encode()
        report = scan(SkillArtifact.from_mapping(repo_files), self.rules)
        repo_only = ScanReport(report.digest, tuple(f for f in report.findings
                                                    if f.source_path.startswith("context/")))
        maliciousness = ("high" if repo_only.overall >= Severity.HIGH
                         else "medium" if repo_only.overall == Severity.MEDIUM else "low")
        security = bool(SECURITY_TOOL.search(f"{readme}\n{skill_text}"))
        return AlignmentAssessment(domain, similarity, consistency, support, maliciousness, security)


class RemoteAlignmentBackend:
    """POSTs the bundle as JSON and expects ``{"assessment": {...}}``; one retry on schema errors."""

    def __init__(self, endpoint: str, transport: Optional[Callable] = None, timeout: float = 120.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self.transport = transport or self._post
        self.tokens_sent = 0

    def _post(self, url, payload):
        req = urllib.request.Request(url, data=json.dumps(payload).encode(), method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise BackendUnavailable(str(exc)) from exc

    def assess(self, bundle: ContextBundle) -> AlignmentAssessment:
        payload = bundle.to_request()
        for attempt in range(2):
            self.tokens_sent += estimate_tokens(json.dumps(payload))
            answer = self.transport(self.endpoint, payload)
            try:
                return AlignmentAssessment.from_dict(answer["assessment"])
            except (KeyError, TypeError, ValueError) as exc:
                if attempt == 1:
                    raise MalformedBackendAnswer(str(exc)) from exc
