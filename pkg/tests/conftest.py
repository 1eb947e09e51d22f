import sys
from pathlib import Path

import pytest

from skillguard.core import SkillArtifact

ROOT = Path(__file__).resolve().parent.parent
MINICORPUS = ROOT / "fixtures" / "minicorpus"


def make_artifact(files: dict, origin=None) -> SkillArtifact:
    """Build an artifact from {path: str|bytes}; adds a minimal SKILL.md when absent."""
    mapping = {p: (c.encode() if isinstance(c, str) else c) for p, c in files.items()}
    mapping.setdefault("SKILL.md", b"---\nname: t\ndescription: test skill\n---\n")
    return SkillArtifact.from_mapping(mapping, origin)


@pytest.fixture
def minicorpus() -> Path:
    return MINICORPUS


def fixture_skill(owner: str, repo: str, subpath: str = "") -> SkillArtifact:
    """Load a skill directory from the bundled mini-corpus."""
    base = MINICORPUS / "repos" / owner / repo / subpath
    files = {p.relative_to(base).as_posix(): p.read_bytes() for p in base.rglob("*") if p.is_file()}
    return SkillArtifact.from_mapping(files)


def malicious_demo() -> SkillArtifact:
    return fixture_skill("demo-attacker", "skill-pack", "skills/malicious-demo")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
