"""Static skill analysis: endpoints, eTLD+1, geolocation, trackers, scripts, secrets."""

from __future__ import annotations

import ipaddress
import json
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol
from urllib.parse import urlsplit

from .core import SkillArtifact

CONTINENTS = ("NA", "EU", "AS", "SA", "AF", "OC", "AN", "unknown")
SCRIPT_SUFFIXES = frozenset({"py", "sh", "js", "ts", "bash", "zsh", "ps1", "rb"})
VALIDATION_STATES = ("not-attempted", "valid", "invalid", "indeterminate")

# URLs require a scheme; bare domains are deliberately not extracted.
_URL = re.compile(
    r"https?://(?:\[[0-9A-Fa-f:.]+\](?::\d+)?|[^\s/\"'<>()\[\]{}\\`|,;]+)"
    r"(?:[/?#][^\s\"'<>\[\]{}\\`|]*)?",
    re.IGNORECASE,
)
_OCTET = r"(?:25[0-5]|2[0-4]\d|1\d\d|[1-9]?\d)"
_IPV4 = re.compile(rf"(?<![\w.]){_OCTET}(?:\.{_OCTET}){{3}}(?!\w|\.\d)")
_IPV6_BRACKETED = re.compile(r"(?<![\w\])])\[([0-9A-Fa-f:.]{2,45})\]")
_IPV6_BARE = re.compile(r"(?<![\w:.\[])((?:[0-9A-Fa-f]{0,4}:){2,7}[0-9A-Fa-f.]{0,15})(?![\w:])")
_TRAILING = ".,;:!?'\")]}>*"


@dataclass(frozen=True)
class Endpoint:
    raw: str
    kind: str
    host: str
    etld1: Optional[str]
    continent: str
    source_path: str
    offset: int = field(default=0, compare=False)

    def to_dict(self) -> dict:
        return {
            "raw": self.raw, "kind": self.kind, "host": self.host, "etld1": self.etld1,
            "continent": self.continent, "source_path": self.source_path,
        }


def is_ip(host: str) -> bool:
    try:
        ipaddress.ip_address(host.strip("[]"))
        return True
    except ValueError:
        return False


class PublicSuffixList:
    """Rules in the public-suffix-list text format, both ICANN and private sections."""

    def __init__(self, lines: Iterable[str]):
        self.rules: set = set()
        self.wildcards: set = set()
        self.exceptions: set = set()
        for line in lines:
            rule = line.strip().split()[0] if line.strip() else ""
            if not rule or rule.startswith("//"):
                continue
            for form in {rule.lower(), _to_ascii(rule.lower())}:
                if form is None:
                    continue
                if form.startswith("!"):
                    self.exceptions.add(form[1:])
                elif form.startswith("*."):
                    self.wildcards.add(form[2:])
                else:
                    self.rules.add(form)

    @classmethod
    def from_file(cls, path) -> "PublicSuffixList":
        with open(path, encoding="utf-8") as fh:
            return cls(fh)

    def public_suffix(self, host: str) -> Optional[str]:
        labels = host.lower().strip(".").split(".")
        best = None
        for i in range(len(labels)):
            candidate = ".".join(labels[i:])
            if candidate in self.exceptions:
                return ".".join(labels[i + 1:])
            parent = ".".join(labels[i + 1:])
            if best is None and (candidate in self.rules or (parent and parent in self.wildcards)):
                best = candidate
        return best

    def etld1(self, host: str) -> Optional[str]:
        host = host.lower().strip(".")
        if not host or is_ip(host):
            return None
        suffix = self.public_suffix(host)
        if suffix is None or suffix == host:
            return None
        labels = host.split(".")
        n = len(suffix.split("."))
        return ".".join(labels[-(n + 1):])


def _to_ascii(rule: str) -> Optional[str]:
    prefix = ""
    if rule.startswith("!") or rule.startswith("*."):
        prefix, rule = (rule[0], rule[1:]) if rule[0] == "!" else ("*.", rule[2:])
    try:
        return prefix + rule.encode("idna").decode("ascii")
    except UnicodeError:
        return None


@lru_cache(maxsize=1)
def bundled_suffix_list() -> PublicSuffixList:
    ref = resources.files("skillguard") / "data" / "public_suffix_list.dat"
    return PublicSuffixList(ref.read_text(encoding="utf-8").splitlines())


def resolve_etld1(host: str, suffix_list: Optional[PublicSuffixList] = None) -> Optional[str]:
    """Registrable domain of ``host``; None for IPs and hosts without a public suffix."""
    return (suffix_list or bundled_suffix_list()).etld1(host)


def load_geo_table(path) -> dict:
    table = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                table[row["etld1"].lower()] = row["continent"]
    return table


def geolocate(etld1: Optional[str], geo_table: dict) -> str:
    if not etld1:
        return "unknown"
    continent = geo_table.get(etld1.lower(), "unknown")
    return continent if continent in CONTINENTS else "unknown"


def load_trackers(path) -> set:
    with open(path, encoding="utf-8") as fh:
        return {ln.strip().lower() for ln in fh if ln.strip() and not ln.startswith("#")}


def _clean_url(raw: str) -> str:
    while raw and raw[-1] in _TRAILING:
        closer = {")": "(", "]": "["}.get(raw[-1])
        if closer and raw.count(closer) >= raw.count(raw[-1]):
            break
        raw = raw[:-1]
    return raw


def scan_text_endpoints(text: str) -> list:
    """(offset, raw, kind, host) tuples found in one decoded file."""
    found = []
    spans = []
    for m in _URL.finditer(text):
        raw = _clean_url(m.group(0))
        try:
            host = urlsplit(raw).hostname or ""
        except ValueError:
            continue
        if not host:
            continue
        spans.append((m.start(), m.start() + len(raw)))
        found.append((m.start(), raw, "url", host.lower()))

    def inside_url(pos):
        return any(a <= pos < b for a, b in spans)

    for m in _IPV4.finditer(text):
        if not inside_url(m.start()):
            found.append((m.start(), m.group(0), "ipv4", m.group(0)))
    for rx in (_IPV6_BRACKETED, _IPV6_BARE):
        for m in rx.finditer(text):
            candidate = m.group(1)
            if inside_url(m.start()) or sum(1 for g in candidate.split(":") if g) < 2:
                continue
            try:
                addr = ipaddress.IPv6Address(candidate)
            except ValueError:
                continue
            found.append((m.start(), m.group(0), "ipv6", str(addr)))
    found.sort(key=lambda t: (t[0], t[1]))
    return found


def extract_endpoints(artifact: SkillArtifact, suffix_list: Optional[PublicSuffixList] = None,
                      geo_table: Optional[dict] = None) -> list:
    """Every URL and IP literal in every file, ordered by (path, offset)."""
    geo_table = geo_table or {}
    out = []
    for f in artifact.files:
        seen = set()
        for offset, raw, kind, host in scan_text_endpoints(f.text()):
            if raw in seen:
                continue
            seen.add(raw)
            etld1 = None if kind != "url" else resolve_etld1(host, suffix_list)
            out.append(Endpoint(raw, kind, host, etld1, geolocate(etld1, geo_table), f.path, offset))
    return out


def match_trackers(endpoints: Iterable[Endpoint], tracker_domains: set) -> list:
    return [(e, e.etld1) for e in endpoints if e.etld1 and e.etld1 in tracker_domains]


@dataclass(frozen=True)
class ScriptInventory:
    counts_by_suffix: dict
    has_scripts: bool
    nonconforming_scripts: tuple

    def to_dict(self) -> dict:
        return {
            "counts_by_suffix": dict(self.counts_by_suffix),
            "has_scripts": self.has_scripts,
            "nonconforming_scripts": list(self.nonconforming_scripts),
        }


def script_inventory(artifact: SkillArtifact, script_suffixes=SCRIPT_SUFFIXES) -> ScriptInventory:
    counts: dict = {}
    nonconforming = []
    for f in artifact.files:
        if f.suffix in script_suffixes:
            counts[f.suffix] = counts.get(f.suffix, 0) + 1
            if not f.path.startswith("scripts/"):
                nonconforming.append(f.path)
    return ScriptInventory(dict(sorted(counts.items())), bool(counts), tuple(nonconforming))


# -- secrets -----------------------------------------------------------------

class ValidationUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorRule:
    detector_id: str
    pattern: re.Pattern
    validation: Optional[dict] = None


def load_detectors(source=None) -> list:
    """Detector rules from a JSON file; the bundled set when ``source`` is None."""
    if source is None:
        raw = json.loads((resources.files("skillguard") / "data" / "detectors.json").read_text())
    elif isinstance(source, (str, Path)):
        raw = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        raw = source
    rules = []
    for item in raw:
        rules.append(DetectorRule(item["detector_id"], re.compile(item["pattern"]),
                                  item.get("validation")))
    return rules


@dataclass(frozen=True)
class SecretFinding:
    detector_id: str
    source_path: str
    line: int
    redacted_match: str
    validation: str = "not-attempted"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class SecretValidator(Protocol):
    def validate(self, rule: DetectorRule, secret: str) -> str:
        """Return 'valid', 'invalid' or 'indeterminate'."""


def redact(secret: str) -> str:
    keep = 4 if len(secret) > 12 else (1 if len(secret) > 4 else 0)
    if keep == 0:
        return "*" * len(secret)
    return secret[:keep] + "*" * (len(secret) - 2 * keep) + secret[-keep:]


class HttpValidator:
    """Checks a secret against the endpoint described in its detector rule.

    Only used when a caller opts into validate mode. ``url_template`` and
    optional ``headers`` may reference ``{secret}``.
    """

    def __init__(self, opener: Optional[Callable] = None, timeout: float = 10.0):
        self.opener = opener
        self.timeout = timeout

    def validate(self, rule: DetectorRule, secret: str) -> str:
        desc = rule.validation or {}
        url = desc["url_template"].replace("{secret}", secret)
        headers = {k: v.replace("{secret}", secret) for k, v in desc.get("headers", {}).items()}
        req = urllib.request.Request(url, method=desc.get("method", "GET"), headers=headers)
        open_fn = self.opener or (lambda r: urllib.request.urlopen(r, timeout=self.timeout))
        try:
            with open_fn(req) as resp:
                status = resp.status
        except urllib.error.HTTPError as exc:
            status = exc.code
        except (urllib.error.URLError, OSError):
            return "indeterminate"
        if 200 <= status < 300:
            return "valid"
        if status in (401, 403):
            return "invalid"
        return "indeterminate"


def detect_secrets(artifact: SkillArtifact, detectors: list, mode: str = "offline",
                   validator: Optional[SecretValidator] = None) -> list:
    if mode not in ("offline", "validate"):
        raise ValueError(f"unknown secrets mode {mode!r}")
    if mode == "validate" and validator is None:
        raise ValidationUnavailable("validate mode needs a validator")
    findings = []
    for f in artifact.files:
        text = f.text()
        seen = set()
        for rule in detectors:
            for m in rule.pattern.finditer(text):
                secret = m.group(1) if m.re.groups and m.group(1) else m.group(0)
                line = text.count("\n", 0, m.start()) + 1
                if (rule.detector_id, line, secret) in seen:
                    continue
                seen.add((rule.detector_id, line, secret))
                state = "not-attempted"
                if mode == "validate":
                    state = validator.validate(rule, secret) if rule.validation else "indeterminate"
                    if state not in VALIDATION_STATES:
                        state = "indeterminate"
                findings.append(SecretFinding(rule.detector_id, f.path, line, redact(secret), state))
    findings.sort(key=lambda s: (s.source_path, s.line, s.detector_id))
    return findings
