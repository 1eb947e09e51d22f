"""Cross-scanner agreement and repository-level aggregation of skill flags."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional


class UniverseNotCovered(ValueError):
    pass


class UnmappedDigest(KeyError):
    pass


@dataclass
class FlagSet:
    scanner_id: str
    flagged: set = field(default_factory=set)
    scanned: set = field(default_factory=set)

    def __post_init__(self):
        self.flagged = set(self.flagged)
        self.scanned = set(self.scanned) | self.flagged


def load_flag_sets(directory) -> list:
    """Read every ``*.jsonl`` under ``directory``; lines are {scanner_id, digest, flagged}."""
    sets: dict = {}
    for path in sorted(Path(directory).glob("*.jsonl")):
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                fs = sets.setdefault(row["scanner_id"], FlagSet(row["scanner_id"]))
                fs.scanned.add(row["digest"])
                if row["flagged"]:
                    fs.flagged.add(row["digest"])
    return [sets[k] for k in sorted(sets)]


def common_universe(sets: list) -> set:
    if not sets:
        return set()
    return set.intersection(*(s.scanned for s in sets))


def _check_universe(sets: list, universe: set) -> None:
    for s in sets:
        missing = universe - s.scanned
        if missing:
            raise UniverseNotCovered(f"{s.scanner_id} did not scan {len(missing)} universe skills")


def conditional_overlap(sets: list, universe: set) -> dict:
    """P(B flags | A flags) on the universe as nested dicts {A: {B: Fraction or None}}."""
    _check_universe(sets, universe)
    restricted = {s.scanner_id: s.flagged & universe for s in sets}
    matrix = {}
    for a, fa in restricted.items():
        row = {}
        for b, fb in restricted.items():
            row[b] = Fraction(len(fa & fb), len(fa)) if fa else None
        matrix[a] = row
    return matrix


def flagged_by_k(sets: list, universe: set) -> dict:
    _check_universe(sets, universe)
    counts: dict = {}
    for s in sets:
        for d in s.flagged & universe:
            counts[d] = counts.get(d, 0) + 1
    hist = {k: 0 for k in range(1, len(sets) + 1)}
    for k in counts.values():
        hist[k] += 1
    return hist


@dataclass
class RepoSummary:
    skills: int
    flagged_skills: int
    repos: int
    flagged_repos: int

    @property
    def skill_rate(self) -> float:
        return self.flagged_skills / self.skills if self.skills else 0.0

    @property
    def repo_rate(self) -> float:
        return self.flagged_repos / self.repos if self.repos else 0.0

    def to_dict(self) -> dict:
        return {
            "skills": self.skills, "flagged_skills": self.flagged_skills,
            "skill_rate": round(self.skill_rate, 6),
            "repos": self.repos, "flagged_repos": self.flagged_repos,
            "repo_rate": round(self.repo_rate, 6),
        }


def repo_aggregate(skill_flags: dict, mapping: dict):
    """A repository is flagged when at least one skill it contains is flagged."""
    repo_flags: dict = {}
    for digest, flagged in skill_flags.items():
        repos = mapping.get(digest)
        if not repos:
            if flagged:
                raise UnmappedDigest(digest)
            continue
        for repo in repos:
            repo_flags[repo] = repo_flags.get(repo, False) or bool(flagged)
    summary = RepoSummary(len(skill_flags), sum(1 for v in skill_flags.values() if v),
                          len(repo_flags), sum(1 for v in repo_flags.values() if v))
    return dict(sorted(repo_flags.items())), summary


def matrix_to_json(matrix: dict) -> dict:
    return {a: {b: (None if v is None else round(float(v), 6)) for b, v in row.items()}
            for a, row in matrix.items()}


def agreement_report(sets: list, universe: Optional[set] = None) -> dict:
    universe = common_universe(sets) if universe is None else universe
    union = set().union(*(s.flagged & universe for s in sets)) if sets else set()
    return {
        "scanners": [s.scanner_id for s in sets],
        "universe_size": len(universe),
        "flag_rates": {s.scanner_id: round(len(s.flagged & universe) / len(universe), 6) if universe else None
                       for s in sets},
        "matrix": matrix_to_json(conditional_overlap(sets, universe)),
        "flagged_by_k": {str(k): v for k, v in flagged_by_k(sets, universe).items()},
        "union_flagged": len(union),
    }


def median(values: list) -> Optional[float]:
    return statistics.median(values) if values else None
