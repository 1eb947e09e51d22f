"""Deterministic four-module rule scanner.

Modules: static rule matching, compiled-artifact integrity, shell-pipeline
analysis and lexical behavioral heuristics. Rules are data (JSON), the
other three modules use bundled pattern tables.
"""

from __future__ import annotations

import fnmatch
import importlib.util
import json
import marshal
import re
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import Optional

from .core import SkillArtifact
from .static import SCRIPT_SUFFIXES, is_ip, scan_text_endpoints


class Severity(IntEnum):
    NONE = 0
    LOW = 1
    MEDIUM = 2
    HIGH = 3
    CRITICAL = 4


MODULES = ("static", "bytecode-integrity", "pipeline", "behavioral")


class MalformedRule(ValueError):
    pass


@dataclass(frozen=True)
class ScanFinding:
    module: str
    rule_id: str
    source_path: str
    line: Optional[int]
    severity: Severity
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "module": self.module, "rule_id": self.rule_id, "source_path": self.source_path,
            "line": self.line, "severity": self.severity.name, "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanFinding":
        return cls(d["module"], d["rule_id"], d["source_path"], d["line"],
                   Severity[d["severity"]], d.get("note", ""))


@dataclass(frozen=True)
class ScanReport:
    digest: str
    findings: tuple = ()
    overall: Severity = field(init=False)

    def __post_init__(self):
        top = max((f.severity for f in self.findings), default=Severity.NONE)
        object.__setattr__(self, "overall", Severity(top))

    def to_dict(self) -> dict:
        return {
            "digest": self.digest,
            "overall": self.overall.name,
            "findings": [f.to_dict() for f in self.findings],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanReport":
        return cls(d["digest"], tuple(ScanFinding.from_dict(f) for f in d["findings"]))


# -- static rules ------------------------------------------------------------

@dataclass(frozen=True)
class Rule:
    id: str
    severity: Severity
    combinator: str
    patterns: tuple
    file_glob: Optional[str] = None
    description: str = ""

    def locate(self, text: str) -> Optional[int]:
        """Offset of the first match, or None when the rule does not fire."""
        hits = []
        for kind, pat in self.patterns:
            if kind == "literal":
                pos = text.find(pat)
            else:
                m = pat.search(text)
                pos = m.start() if m else -1
            if pos >= 0:
                hits.append(pos)
            elif self.combinator == "all":
                return None
        return min(hits) if hits else None


def _parse_rule(item) -> Rule:
    if not isinstance(item, dict):
        raise MalformedRule(f"rule must be an object: {item!r}")
    try:
        rule_id = item["id"]
        severity = Severity[str(item["severity"]).upper()]
        match = item["match"]
    except KeyError as exc:
        raise MalformedRule(f"rule {item.get('id', '?')}: missing or bad {exc}") from exc
    if severity is Severity.NONE:
        raise MalformedRule(f"rule {rule_id}: severity NONE is not allowed")
    if not isinstance(match, dict) or len(match) != 1 or next(iter(match)) not in ("any", "all"):
        raise MalformedRule(f"rule {rule_id}: match needs exactly one of any/all")
    combinator, entries = next(iter(match.items()))
    if not entries:
        raise MalformedRule(f"rule {rule_id}: empty pattern list")
    patterns = []
    for entry in entries:
        if "kind" in entry:
            kind, pat = entry["kind"], entry.get("pattern")
        elif len(entry) == 1 and next(iter(entry)) in ("literal", "regex"):
            kind, pat = next(iter(entry.items()))
        else:
            raise MalformedRule(f"rule {rule_id}: bad pattern entry {entry!r}")
        if kind not in ("literal", "regex") or not isinstance(pat, str) or not pat:
            raise MalformedRule(f"rule {rule_id}: bad pattern entry {entry!r}")
        if kind == "regex":
            try:
                pat = re.compile(pat, re.MULTILINE)
            except re.error as exc:
                raise MalformedRule(f"rule {rule_id}: {exc}") from exc
        patterns.append((kind, pat))
    return Rule(rule_id, severity, combinator, tuple(patterns), item.get("file_glob"),
                item.get("description", ""))


def load_rules(source=None) -> list:
    """Load a rule file; the bundled starter pack when ``source`` is None."""
    if source is None:
        raw = json.loads((resources.files("skillguard") / "data" / "rules.json").read_text())
    elif isinstance(source, (str, Path)):
        raw = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        raw = source
    if not isinstance(raw, list):
        raise MalformedRule("rule file must hold a JSON array")
    rules = [_parse_rule(item) for item in raw]
    ids = [r.id for r in rules]
    if len(ids) != len(set(ids)):
        raise MalformedRule("duplicate rule ids")
    return rules


def _line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1


def scan_static_rules(artifact: SkillArtifact, rules: list) -> list:
    findings = []
    for f in artifact.files:
        text = f.text()
        for rule in rules:
            if rule.file_glob and not fnmatch.fnmatch(f.path, rule.file_glob):
                continue
            pos = rule.locate(text)
            if pos is not None:
                findings.append(ScanFinding("static", rule.id, f.path, _line_of(text, pos),
                                            rule.severity, rule.description))
    findings.sort(key=lambda x: (x.source_path, x.line, x.rule_id))
    return findings


# -- compiled artifacts ------------------------------------------------------

_PYC_NAME = re.compile(rb"([\w.\-/\\]{1,200}\.py)(?![\w])")


def _pyc_stem(path: str) -> str:
    name = path.rsplit("/", 1)[-1][:-4]
    return name.split(".", 1)[0]


def pyc_source_name(data: bytes) -> Optional[str]:
    """Source filename recorded in a .pyc, or None when it cannot be read.

    Code objects are unmarshalled only for the running interpreter's magic
    number; other versions fall back to locating the embedded filename.
    """
    if len(data) < 16 or data[2:4] != b"\r\n":
        return None
    if data[:4] == importlib.util.MAGIC_NUMBER:
        try:
            code = marshal.loads(data[16:])
            return code.co_filename
        except (ValueError, EOFError, TypeError, AttributeError):
            return None
    m = _PYC_NAME.search(data[16:])
    return m.group(1).decode("ascii", "replace") if m else None


def scan_bytecode_integrity(artifact: SkillArtifact) -> list:
    paths = {f.path for f in artifact.files}
    findings = []
    for f in artifact.files:
        if f.suffix != "pyc":
            continue
        stem = _pyc_stem(f.path)
        directory = f.path.rsplit("/", 1)[0] if "/" in f.path else ""
        candidates = [f"{directory}/{stem}.py" if directory else f"{stem}.py"]
        if directory.endswith("__pycache__"):
            parent = directory.rsplit("/", 1)[0] if "/" in directory else ""
            candidates.append(f"{parent}/{stem}.py" if parent else f"{stem}.py")
        if not any(c in paths for c in candidates):
            findings.append(ScanFinding("bytecode-integrity", "orphan-compiled-artifact", f.path, None,
                                        Severity.HIGH, "orphan compiled artifact without source"))
        source_name = pyc_source_name(f.content)
        if source_name is None:
            findings.append(ScanFinding("bytecode-integrity", "opaque-compiled-artifact", f.path, None,
                                        Severity.MEDIUM, "opaque compiled artifact"))
        else:
            recorded = source_name.replace("\\", "/").rsplit("/", 1)[-1]
            recorded_stem = recorded[:-3] if recorded.endswith(".py") else recorded
            if recorded_stem != stem:
                findings.append(ScanFinding("bytecode-integrity", "source-name-mismatch", f.path, None,
                                            Severity.HIGH, f"compiled from {source_name!r}"))
    return findings


# -- shell pipelines ---------------------------------------------------------

SHELL_SUFFIXES = frozenset({"sh", "bash", "zsh", "ksh"})
MARKDOWN_SUFFIXES = frozenset({"md", "markdown", "mdx"})

_FETCH = r"(?:curl|wget|fetch|iwr|irm|invoke-webrequest|invoke-restmethod)"
_INTERP = r"(?:sudo\s+(?:-\S+\s+)*)?(?:ba|z|k|da|c)?sh|python[0-9.]*|perl|ruby|node|php|iex|invoke-expression|pwsh|powershell|source"
DOWNLOAD_TO_INTERPRETER = [
    re.compile(rf"\b{_FETCH}\b[^|\n]*\|\s*(?:{_INTERP})\b", re.IGNORECASE),
    re.compile(rf"(?:{_INTERP})\s+(?:-\w+\s+)*<\(\s*{_FETCH}\b", re.IGNORECASE),
    re.compile(rf"(?:{_INTERP})\s+-c\s+[\"']?\$\(\s*{_FETCH}\b", re.IGNORECASE),
    re.compile(rf"\b(?:iex|invoke-expression)\b[^\n]*\b{_FETCH}\b", re.IGNORECASE),
]
PIPE_TO_PRIVILEGE = re.compile(r"\|\s*(?:sudo|doas|su|pkexec|runas)\b", re.IGNORECASE)
TRACE_DISABLE = re.compile(
    r"unset\s+HISTFILE|HISTSIZE=0|HISTFILESIZE=0|set\s+\+o\s+history|history\s+-c|"
    r"HISTFILE=/dev/null|set\s+\+x\b|export\s+HISTCONTROL=ignore",
    re.IGNORECASE,
)
NETWORK_COMMAND = re.compile(
    r"\b(?:curl|wget|nc|ncat|netcat|scp|ssh|rsync|ftp|telnet|socat)\b|/dev/tcp/|/dev/udp/",
    re.IGNORECASE,
)
_FENCE = re.compile(r"^\s*(```|~~~)")


def executable_segments(artifact: SkillArtifact) -> list:
    """(path, [(line number, text)]) for shell files and markdown fenced blocks."""
    segments = []
    for f in artifact.files:
        lines = f.text().split("\n")
        if f.suffix in SHELL_SUFFIXES:
            segments.append((f.path, list(enumerate(lines, 1))))
        elif f.suffix in MARKDOWN_SUFFIXES:
            block, fence = None, None
            for n, line in enumerate(lines, 1):
                m = _FENCE.match(line)
                if block is None and m:
                    block, fence = [], m.group(1)
                elif block is not None and line.strip().startswith(fence):
                    segments.append((f.path, block))
                    block = None
                elif block is not None:
                    block.append((n, line))
            if block:
                segments.append((f.path, block))
    return segments


def _logical_lines(numbered: list) -> list:
    out, buf, start = [], [], None
    for n, line in numbered:
        if start is None:
            start = n
        if line.rstrip().endswith("\\"):
            buf.append(line.rstrip()[:-1])
            continue
        buf.append(line)
        out.append((start, " ".join(buf)))
        buf, start = [], None
    if buf:
        out.append((start, " ".join(buf)))
    return out


def scan_pipelines(artifact: SkillArtifact) -> list:
    findings = []
    per_file_lines: dict = {}
    for path, numbered in executable_segments(artifact):
        per_file_lines.setdefault(path, []).extend(_logical_lines(numbered))
    for path, lines in per_file_lines.items():
        trace_off_at = None
        trace_flagged = False
        for n, line in lines:
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            code = line
            if any(rx.search(code) for rx in DOWNLOAD_TO_INTERPRETER):
                findings.append(ScanFinding("pipeline", "download-to-interpreter", path, n,
                                            Severity.CRITICAL, "remote content piped into an interpreter"))
            elif PIPE_TO_PRIVILEGE.search(code):
                findings.append(ScanFinding("pipeline", "pipe-to-privilege", path, n, Severity.HIGH,
                                            "pipeline feeds a privilege-elevation command"))
            if trace_off_at is None and TRACE_DISABLE.search(code):
                trace_off_at = n
            elif trace_off_at is not None and not trace_flagged and NETWORK_COMMAND.search(code):
                trace_flagged = True
                findings.append(ScanFinding("pipeline", "trace-disabled-network", path, trace_off_at,
                                            Severity.MEDIUM,
                                            f"history/trace disabled before network use on line {n}"))
    findings.sort(key=lambda x: (x.source_path, x.line, x.rule_id))
    return findings


# -- behavioral heuristics ---------------------------------------------------

SENSITIVE_PATHS = re.compile(
    r"~/\.ssh|\.ssh/|id_rsa|id_ed25519|id_ecdsa|\.aws/credentials|\.aws/config|"
    r"\.bash_history|\.zsh_history|\.netrc|\.gnupg|/etc/shadow|/etc/passwd|"
    r"\.kube/config|\.docker/config\.json|\.git-credentials|\.npmrc|\.pypirc|"
    r"\.config/gcloud|Login Data|Local State|Cookies\.sqlite|Keychains|wallet\.dat|"
    r"\.config/solana|\.ethereum/keystore|\.env\b",
)
NETWORK_TOKENS = re.compile(
    r"requests\.(?:get|post|put|patch|request|Session)|urllib\.request|urlopen|http\.client|"
    r"httpx\.|aiohttp|socket\.socket|\.connect\(|\bfetch\(|axios|XMLHttpRequest|"
    r"\bcurl\b|\bwget\b|\bnc\s|Invoke-WebRequest|Invoke-RestMethod|Net::HTTP|/dev/tcp/|"
    r"smtplib|ftplib|paramiko|WebSocket|https?\.request\(",
)


def scan_behavior(artifact: SkillArtifact) -> list:
    findings = []
    for f in artifact.files:
        if f.suffix not in SCRIPT_SUFFIXES:
            continue
        lines = f.text().split("\n")
        sensitive_line = network_line = None
        for n, line in enumerate(lines, 1):
            if sensitive_line is None and SENSITIVE_PATHS.search(line):
                sensitive_line = n
            if network_line is None and NETWORK_TOKENS.search(line):
                network_line = n
        if sensitive_line and network_line:
            findings.append(ScanFinding("behavioral", "possible-exfiltration", f.path, network_line,
                                        Severity.HIGH, "sensitive read and outbound network in one file"))
        elif network_line:
            ips = [e for e in scan_text_endpoints(f.text()) if e[2] in ("ipv4", "ipv6")
                   or (e[2] == "url" and is_ip(e[3]))]
            if ips:
                findings.append(ScanFinding("behavioral", "raw-ip-network", f.path, network_line,
                                            Severity.MEDIUM, f"outbound network to raw IP {ips[0][1]}"))
        elif sensitive_line:
            findings.append(ScanFinding("behavioral", "sensitive-read", f.path, sensitive_line,
                                        Severity.LOW, "reads a sensitive path"))
    return findings


def scan(artifact: SkillArtifact, rules: list) -> ScanReport:
    findings = (
        scan_static_rules(artifact, rules)
        + scan_bytecode_integrity(artifact)
        + scan_pipelines(artifact)
        + scan_behavior(artifact)
    )
    return ScanReport(artifact.hexdigest, tuple(findings))
