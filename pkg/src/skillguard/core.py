"""Skill data model: SKILL.md parsing, artifact construction and canonical digests."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

SKILL_MANIFEST = "SKILL.md"
DELIMITER = "---"

_KEY_LINE = re.compile(r"^([A-Za-z0-9_-]+):(?:[ \t]+(.*)|)$")


class ParseError(ValueError):
    """Raised when a SKILL.md document cannot be parsed."""


class NoFrontmatter(ParseError):
    pass


class UnterminatedFrontmatter(ParseError):
    pass


class MissingRequiredField(ParseError):
    def __init__(self, field_name: str):
        super().__init__(f"missing required field: {field_name}")
        self.field_name = field_name


class DuplicateKey(ParseError):
    def __init__(self, key: str):
        super().__init__(f"duplicate frontmatter key: {key}")
        self.key = key


class DuplicatePath(ValueError):
    pass


class InvalidPath(ValueError):
    pass


class MissingSkillManifest(ValueError):
    pass


@dataclass(frozen=True)
class SkillManifest:
    name: str
    description: str
    extra_metadata: dict = field(default_factory=dict)
    body: str = ""


def parse_manifest(text: str) -> SkillManifest:
    """Parse a SKILL.md document.

    Frontmatter is a flat block of ``key: value`` lines between two ``---``
    lines. Indented or list-item lines following an empty ``key:`` are kept
    verbatim as that key's value (no nesting is interpreted).
    """
    lines = text.split("\n")
    if lines[0].rstrip("\r") != DELIMITER:
        raise NoFrontmatter("document does not start with a '---' line")
    end = None
    for i in range(1, len(lines)):
        if lines[i].rstrip("\r") == DELIMITER:
            end = i
            break
    if end is None:
        raise UnterminatedFrontmatter("no closing '---' line")

    pairs: dict[str, str] = {}
    current: Optional[str] = None
    continuation: list[str] = []

    def flush() -> None:
        if current is not None and continuation:
            pairs[current] = "\n".join(continuation)

    for raw in lines[1:end]:
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        m = _KEY_LINE.match(line)
        if m:
            flush()
            key = m.group(1)
            if key in pairs:
                raise DuplicateKey(key)
            pairs[key] = (m.group(2) or "").strip()
            current, continuation = key, []
        elif current is not None and (line[0] in " \t" or line.startswith("- ")):
            continuation.append(line)
        elif line.lstrip().startswith("#"):
            continue
        else:
            raise ParseError(f"malformed frontmatter line: {line!r}")
    flush()

    for required in ("name", "description"):
        if not pairs.get(required):
            raise MissingRequiredField(required)
    name = pairs.pop("name")
    description = pairs.pop("description")
    body = "\n".join(lines[end + 1:])
    return SkillManifest(name, description, pairs, body)


def render_manifest(manifest: SkillManifest) -> str:
    out = [DELIMITER, f"name: {manifest.name}", f"description: {manifest.description}"]
    for key, value in manifest.extra_metadata.items():
        if "\n" in value:
            out.append(f"{key}:")
            out.append(value)
        else:
            out.append(f"{key}: {value}")
    out.append(DELIMITER)
    return "\n".join(out) + "\n" + manifest.body


def normalize_path(path: str) -> str:
    p = path.replace("\\", "/")
    while p.startswith("./"):
        p = p[2:]
    if not p or p.startswith("/"):
        raise InvalidPath(f"invalid skill file path: {path!r}")
    parts = p.split("/")
    if any(part in ("", ".", "..") for part in parts):
        raise InvalidPath(f"invalid skill file path: {path!r}")
    if "\x00" in p:
        raise InvalidPath("NUL byte in path")
    return p


def path_suffix(path: str) -> str:
    last = path.rsplit("/", 1)[-1]
    if "." not in last:
        return ""
    return last.rsplit(".", 1)[1].lower()


@dataclass(frozen=True)
class SkillFile:
    path: str
    content: bytes

    def __post_init__(self):
        object.__setattr__(self, "path", normalize_path(self.path))
        if not isinstance(self.content, bytes):
            raise TypeError("content must be bytes")

    @property
    def suffix(self) -> str:
        return path_suffix(self.path)

    def text(self) -> str:
        return self.content.decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Origin:
    platform: str
    owner: str
    repository: str
    subpath: str = ""
    retrieved_at: str = ""

    @property
    def repo_id(self) -> str:
        return f"{self.owner}/{self.repository}"

    def to_dict(self) -> dict:
        return {
            "platform": self.platform,
            "owner": self.owner,
            "repository": self.repository,
            "subpath": self.subpath,
            "retrieved_at": self.retrieved_at,
        }


def _sorted_files(files: Iterable[SkillFile]) -> list[SkillFile]:
    ordered = sorted(files, key=lambda f: f.path.encode("utf-8"))
    for a, b in zip(ordered, ordered[1:]):
        if a.path == b.path:
            raise DuplicatePath(a.path)
    return ordered


def canonical_encoding(files: Iterable[SkillFile]) -> bytes:
    """path, NUL, 8-byte big-endian length, content; files sorted bytewise by path."""
    chunks = []
    for f in _sorted_files(files):
        chunks.append(f.path.encode("utf-8"))
        chunks.append(b"\x00")
        chunks.append(len(f.content).to_bytes(8, "big"))
        chunks.append(f.content)
    return b"".join(chunks)


def decode_canonical(blob: bytes) -> list[SkillFile]:
    files = []
    pos = 0
    while pos < len(blob):
        nul = blob.index(b"\x00", pos)
        path = blob[pos:nul].decode("utf-8")
        size = int.from_bytes(blob[nul + 1:nul + 9], "big")
        start = nul + 9
        if start + size > len(blob) or nul + 9 > len(blob):
            raise ValueError("truncated canonical encoding")
        files.append(SkillFile(path, blob[start:start + size]))
        pos = start + size
    return files


def artifact_digest(files: Iterable[SkillFile]) -> bytes:
    return hashlib.sha256(canonical_encoding(files)).digest()


@dataclass(frozen=True)
class SkillArtifact:
    files: tuple
    origin: Optional[Origin] = None
    digest: bytes = field(init=False, compare=False)

    def __post_init__(self):
        ordered = tuple(_sorted_files(self.files))
        if not any(f.path == SKILL_MANIFEST for f in ordered):
            raise MissingSkillManifest("artifact has no top-level SKILL.md")
        object.__setattr__(self, "files", ordered)
        object.__setattr__(self, "digest", artifact_digest(ordered))

    @classmethod
    def from_mapping(cls, mapping: dict, origin: Optional[Origin] = None) -> "SkillArtifact":
        return cls(tuple(SkillFile(p, c) for p, c in mapping.items()), origin)

    @property
    def hexdigest(self) -> str:
        return self.digest.hex()

    @property
    def total_bytes(self) -> int:
        return sum(len(f.content) for f in self.files)

    def get(self, path: str) -> Optional[SkillFile]:
        for f in self.files:
            if f.path == path:
                return f
        return None

    def manifest(self) -> SkillManifest:
        return parse_manifest(self.get(SKILL_MANIFEST).text())


def dedup(artifacts: Sequence[SkillArtifact]):
    """Keep the first artifact per digest; map each digest to every origin seen."""
    unique: list[SkillArtifact] = []
    origins: dict[bytes, list] = {}
    for art in artifacts:
        if art.digest not in origins:
            origins[art.digest] = []
            unique.append(art)
        origins[art.digest].append(art.origin)
    return unique, origins
