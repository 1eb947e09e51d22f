"""Behavioral questionnaire (25 features), risk scoring and the flag decision.

Risk mapping: each triggered group adds 1; the evasion group adds 2, and the
credentials group adds 2 when ``transmits_credentials`` is set. Risk is
``1 + min(4, weighted total)``, so a vector with no triggers scores 1.

======================  ======================================  ======
group                   triggered when any of these are true    weight
======================  ======================================  ======
system                  exec_shell ... spawns_background_process  1
network                 network booleans (counts do not trigger)  1
credentials             requests/embeds/transmits credentials     1 (2)
persistence             scheduled task, startup hook, memory      1
evasion                 obfuscation, logging off, triggers, hide  2
financial               wallets, payment redirects, paid promos   1
meta                    prompt injection, capability mismatch     1
======================  ======================================  ======
"""

from __future__ import annotations

import json
import math
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Protocol

from .core import SKILL_MANIFEST, ParseError, SkillArtifact, parse_manifest
from .scanner import (
    NETWORK_TOKENS,
    SENSITIVE_PATHS,
    ScanReport,
    Severity,
    executable_segments,
    scan_behavior,
    scan_pipelines,
)
from .static import (
    SCRIPT_SUFFIXES,
    detect_secrets,
    extract_endpoints,
    is_ip,
    load_detectors,
)

QUESTIONNAIRE_VERSION = "1"
EXCERPT_LINES = 200

GROUPS = {
    "system": ("exec_shell", "writes_outside_skill_dir", "reads_sensitive_paths",
               "modifies_agent_config", "spawns_background_process"),
    "network": ("makes_network_calls", "contacted_domain_count", "unique_ip_count",
                "uses_raw_ip_endpoints", "downloads_executable_content"),
    "credentials": ("requests_user_secrets", "embeds_credentials", "transmits_credentials"),
    "persistence": ("installs_scheduled_task", "adds_startup_hook", "writes_agent_memory"),
    "evasion": ("obfuscated_payloads", "disables_logging", "conditional_time_or_env_triggers",
                "instructs_agent_to_hide_actions"),
    "financial": ("references_crypto_wallets", "redirects_payments", "promotes_external_paid_service"),
    "meta": ("prompt_injection_in_manifest", "claims_capability_mismatch"),
}
COUNT_FEATURES = ("contacted_domain_count", "unique_ip_count")


class BackendUnavailable(RuntimeError):
    pass


class MalformedBackendAnswer(ValueError):
    pass


class DigestMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    exec_shell: bool = False
    writes_outside_skill_dir: bool = False
    reads_sensitive_paths: bool = False
    modifies_agent_config: bool = False
    spawns_background_process: bool = False
    makes_network_calls: bool = False
    contacted_domain_count: int = 0
    unique_ip_count: int = 0
    uses_raw_ip_endpoints: bool = False
    downloads_executable_content: bool = False
    requests_user_secrets: bool = False
    embeds_credentials: bool = False
    transmits_credentials: bool = False
    installs_scheduled_task: bool = False
    adds_startup_hook: bool = False
    writes_agent_memory: bool = False
    obfuscated_payloads: bool = False
    disables_logging: bool = False
    conditional_time_or_env_triggers: bool = False
    instructs_agent_to_hide_actions: bool = False
    references_crypto_wallets: bool = False
    redirects_payments: bool = False
    promotes_external_paid_service: bool = False
    prompt_injection_in_manifest: bool = False
    claims_capability_mismatch: bool = False

    def __post_init__(self):
        for name in COUNT_FEATURES:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_answers(cls, answers) -> "FeatureVector":
        """Strictly validate a backend answer: all 25 names, exact types."""
        if not isinstance(answers, dict):
            raise MalformedBackendAnswer("features must be an object")
        names = [f.name for f in fields(cls)]
        missing = [n for n in names if n not in answers]
        extra = [k for k in answers if k not in names]
        if missing or extra:
            raise MalformedBackendAnswer(f"missing={missing} unexpected={extra}")
        for name in names:
            value = answers[name]
            if name in COUNT_FEATURES:
                if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                    raise MalformedBackendAnswer(f"{name} must be a non-negative integer")
            elif not isinstance(value, bool):
                raise MalformedBackendAnswer(f"{name} must be a boolean")
        return cls(**{n: answers[n] for n in names})


FEATURE_NAMES = tuple(f.name for f in fields(FeatureVector))
assert len(FEATURE_NAMES) == 25
assert sorted(FEATURE_NAMES) == sorted(n for g in GROUPS.values() for n in g)


@dataclass(frozen=True)
class RiskAssessment:
    vector: FeatureVector
    risk: int
    rationale: dict = field(default_factory=dict)
    digest: Optional[str] = None


def triggered_groups(vector: FeatureVector) -> dict:
    out = {}
    for group, names in GROUPS.items():
        hits = [n for n in names if n not in COUNT_FEATURES and getattr(vector, n)]
        if hits:
            out[group] = hits
    return out


def risk_score(vector: FeatureVector, digest: Optional[str] = None) -> RiskAssessment:
    groups = triggered_groups(vector)
    weight = 0
    for group in groups:
        if group == "evasion" or (group == "credentials" and vector.transmits_credentials):
            weight += 2
        else:
            weight += 1
    rationale = {g: ", ".join(hits) for g, hits in groups.items()}
    return RiskAssessment(vector, 1 + min(4, weight), rationale, digest)


def is_flagged(report: ScanReport, assessment: RiskAssessment) -> bool:
    if assessment.digest is not None and assessment.digest != report.digest:
        raise DigestMismatch(f"{report.digest} != {assessment.digest}")
    return report.overall >= Severity.HIGH and assessment.risk > 3


# -- backends ----------------------------------------------------------------

class AnalysisBackend(Protocol):
    def evaluate(self, artifact: SkillArtifact) -> dict:
        """Answer the questionnaire for one artifact in a fresh session."""


def _rx(pattern: str) -> re.Pattern:
    return re.compile(pattern, re.IGNORECASE)


SHELL_EXEC = _rx(r"subprocess\.|os\.system|os\.popen|child_process|execSync|spawnSync|"
                 r"Runtime\.getRuntime\(\)\.exec|\bbash\s+-c\b|\bsh\s+-c\b|\bsystem\(")
WRITE_OUTSIDE = _rx(r"(>>?|tee\s+(-a\s+)?)\s*[\"']?(~/|/(?!dev/null)|\$HOME)|"
                    r"open\(\s*(os\.path\.expanduser\(|[\"'](~|/))[^)]*,\s*[\"'][wa]|"
                    r"writeFileSync\(\s*[\"'](/|~)")
AGENT_CONFIG = _rx(r"\.claude/|CLAUDE\.md|AGENTS\.md|\.openclaw|\.cursor/|mcp\.json|\.codex/")
BACKGROUND = _rx(r"\bnohup\b|\bdisown\b|\bsetsid\b|subprocess\.Popen|start_new_session|"
                 r"daemon\s*=\s*True|screen\s+-dm|tmux\s+new(-session)?\s+-d|&\s*$")
DOWNLOAD_EXEC = _rx(r"(curl|wget)[^\n]*\.(sh|exe|bin|ps1|py|elf|dmg|pkg|msi)\b[^\n]*(-o|-O|>)|"
                    r"urlretrieve\([^)]*\.(sh|exe|bin|py)")
ASK_SECRETS = _rx(r"\b(enter|provide|paste|give|share|send|type)\b[^.\n]{0,40}"
                  r"\b(api[ _-]?key|password|passphrase|token|secret|credential|private key|seed phrase)")
ENV_SECRET = _rx(r"os\.environ|os\.getenv|process\.env|\$\{?[A-Z_]*(KEY|TOKEN|SECRET|PASSWORD)")
SCHEDULED = _rx(r"\bcrontab\b|/etc/cron|\bschtasks\b|launchctl\s+load|systemctl\s+enable|\.timer\b")
STARTUP = _rx(r"\.bashrc|\.zshrc|\.bash_profile|\.profile\b|LaunchAgents|/autostart/|rc\.local|"
              r"CurrentVersion\\Run")
AGENT_MEMORY = _rx(r"MEMORY\.md|SOUL\.md|\.claude/(memory|projects)|agent memory|"
                   r"(store|save|write)[^.\n]{0,30}\bin (your|the agent'?s?) memory")
OBFUSCATION = _rx(r"base64\s+(-d|--decode)|b64decode|atob\(|fromCharCode|codecs\.decode\([^)]*rot|"
                  r"(\\x[0-9a-f]{2}){16,}|marshal\.loads|zlib\.decompress")
LOGGING_OFF = _rx(r"unset\s+HISTFILE|HISTSIZE=0|set\s+\+o\s+history|history\s+-c|logging\.disable|"
                  r"auditctl\s+-D|rm\s+-rf?\s+/var/log|HISTFILE=/dev/null")
TIME_TRIGGER = _rx(r"(datetime\.(now|today|utcnow)\(\)|time\.time\(\)|new Date\(\)|\$\(date)[^\n]{0,60}"
                   r"(>=|<=|>|<|==)|if[^\n]{0,40}(getenv|environ|process\.env)[^\n]{0,40}==")
HIDE_ACTIONS = _rx(r"\b(do not|don't|never)\s+(tell|inform|mention|show|reveal|notify|alert)\b[^.\n]{0,40}"
                   r"\b(user|human|operator)|without (telling|informing|notifying|alerting) the user|"
                   r"\b(silently|secretly|covertly)\b")
CRYPTO = _rx(r"\bwallet\.dat\b|seed phrase|mnemonic|metamask|phantom wallet|\b0x[a-f0-9]{40}\b|"
             r"\bbc1[a-z0-9]{25,59}\b|private key[^.\n]{0,20}(eth|btc|sol)")
PAYMENT_REDIRECT = _rx(r"(replace|change|swap|set)\s+(the\s+)?(recipient|payee|beneficiary|iban|"
                       r"wallet address|payment address)|send (all )?(funds|payments?|crypto)[^.\n]{0,30}\bto\b")
PAID_PROMO = _rx(r"\b(upgrade to (pro|premium)|affiliate link|referral code|promo code|discount code|"
                 r"subscribe (now|today)|buy (now|credits))\b|\$\d+\s*/\s*(mo|month)")
INJECTION = _rx(r"\b(ignore|disregard|forget)\s+(all\s+)?(previous|prior|above|earlier|system)\s+"
                r"(instructions|rules|prompts?)|you are now (in )?\w+ mode|<\s*/?\s*system\s*>|"
                r"override (your|the) (safety|system)")
CAPABILITY_CLAIM = _rx(r"read-only|offline|no network|local only|never (sends|uploads|transmits)|"
                       r"does not (access|use|contact) (the )?(internet|network)")
MARKDOWN = frozenset({"md", "markdown", "mdx"})


def contacted_domains(endpoints) -> set:
    return {e.etld1 or e.host for e in endpoints if e.kind == "url" and not is_ip(e.host)}


def unique_ips(endpoints) -> set:
    return {e.host for e in endpoints if e.kind in ("ipv4", "ipv6") or (e.kind == "url" and is_ip(e.host))}


def heuristic_answers(artifact: SkillArtifact, detectors: Optional[list] = None) -> dict:
    """Questionnaire answers derived from static-analysis and scanner signals."""
    scripts = [f.text() for f in artifact.files if f.suffix in SCRIPT_SUFFIXES]
    blocks = ["\n".join(line for _, line in lines) for _, lines in executable_segments(artifact)]
    exec_text = "\n".join(scripts + blocks)
    docs = "\n".join(f.text() for f in artifact.files if f.suffix in MARKDOWN)
    skill_md = artifact.get(SKILL_MANIFEST).text()
    try:
        description = parse_manifest(skill_md).description
    except ParseError:
        description = ""

    endpoints = extract_endpoints(artifact)
    exec_endpoints = [e for e in endpoints if e.source_path.rsplit(".", 1)[-1].lower() in SCRIPT_SUFFIXES]
    pipelines = scan_pipelines(artifact)
    behavior = scan_behavior(artifact)
    secrets = detect_secrets(artifact, detectors if detectors is not None else load_detectors())

    network = bool(NETWORK_TOKENS.search(exec_text))
    any_shell = any(f.suffix in ("sh", "bash", "zsh") for f in artifact.files)
    exfil_file = any(b.rule_id == "possible-exfiltration" for b in behavior)
    env_and_net = any(ENV_SECRET.search(s) and NETWORK_TOKENS.search(s) for s in scripts)
    writes_outside = bool(WRITE_OUTSIDE.search(exec_text))
    exec_shell = any_shell or bool(SHELL_EXEC.search(exec_text)) or bool(pipelines)

    answers = {
        "exec_shell": exec_shell,
        "writes_outside_skill_dir": writes_outside,
        "reads_sensitive_paths": bool(SENSITIVE_PATHS.search(exec_text)),
        "modifies_agent_config": bool(AGENT_CONFIG.search(exec_text)),
        "spawns_background_process": bool(BACKGROUND.search(exec_text)),
        "makes_network_calls": network,
        "contacted_domain_count": len(contacted_domains(endpoints)),
        "unique_ip_count": len(unique_ips(endpoints)),
        "uses_raw_ip_endpoints": bool(unique_ips(exec_endpoints)) and network,
        "downloads_executable_content": any(p.rule_id == "download-to-interpreter" for p in pipelines)
        or bool(DOWNLOAD_EXEC.search(exec_text)),
        "requests_user_secrets": bool(ASK_SECRETS.search(docs)),
        "embeds_credentials": bool(secrets),
        "transmits_credentials": exfil_file or env_and_net,
        "installs_scheduled_task": bool(SCHEDULED.search(exec_text)),
        "adds_startup_hook": bool(STARTUP.search(exec_text)),
        "writes_agent_memory": bool(AGENT_MEMORY.search(exec_text + "\n" + docs)),
        "obfuscated_payloads": bool(OBFUSCATION.search(exec_text)),
        "disables_logging": bool(LOGGING_OFF.search(exec_text)),
        "conditional_time_or_env_triggers": bool(TIME_TRIGGER.search(exec_text)),
        "instructs_agent_to_hide_actions": bool(HIDE_ACTIONS.search(docs)),
        "references_crypto_wallets": bool(CRYPTO.search(exec_text + "\n" + docs)),
        "redirects_payments": bool(PAYMENT_REDIRECT.search(exec_text + "\n" + docs)),
        "promotes_external_paid_service": bool(PAID_PROMO.search(docs)),
        "prompt_injection_in_manifest": bool(INJECTION.search(skill_md)),
        "claims_capability_mismatch": bool(CAPABILITY_CLAIM.search(description))
        and (network or writes_outside or exec_shell),
    }
    return answers


class HeuristicBackend:
    """Deterministic offline backend; holds no state between artifacts."""

    def __init__(self, detectors: Optional[list] = None):
        self.detectors = detectors

    def evaluate(self, artifact: SkillArtifact) -> dict:
        return heuristic_answers(artifact, self.detectors)


def estimate_tokens(text: str) -> int:
    """Rough token count (4 characters per token) for cost reporting."""
    return math.ceil(len(text) / 4)


def build_request(artifact: SkillArtifact) -> dict:
    skill_lines = artifact.get(SKILL_MANIFEST).text().split("\n")[:EXCERPT_LINES]
    scripts = {}
    for f in artifact.files:
        if f.suffix in SCRIPT_SUFFIXES:
            scripts[f.path] = "\n".join(f.text().split("\n")[:EXCERPT_LINES])
    return {
        "questionnaire_version": QUESTIONNAIRE_VERSION,
        "skill_manifest_excerpt": "\n".join(skill_lines),
        "file_listing": [f.path for f in artifact.files],
        "script_excerpts": scripts,
    }


def _post_json(url: str, payload: dict, timeout: float) -> dict:
    req = urllib.request.Request(url, data=json.dumps(payload).encode(), method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            body = resp.read()
    except (urllib.error.URLError, OSError) as exc:
        raise BackendUnavailable(str(exc)) from exc
    try:
        return json.loads(body)
    except ValueError as exc:
        raise MalformedBackendAnswer("response is not JSON") from exc


class RemoteBackend:
    """Text-model backend behind an HTTP JSON endpoint.

    Each call is a standalone request, so no context carries over between
    artifacts. ``transport(url, payload) -> dict`` can be swapped for tests.
    """

    def __init__(self, endpoint: str, transport: Optional[Callable] = None, timeout: float = 120.0):
        self.endpoint = endpoint
        self.transport = transport or (lambda url, payload: _post_json(url, payload, timeout))
        self.tokens_sent = 0

    def evaluate(self, artifact: SkillArtifact) -> dict:
        request = build_request(artifact)
        self.tokens_sent += estimate_tokens(json.dumps(request))
        response = self.transport(self.endpoint, request)
        if not isinstance(response, dict) or "features" not in response:
            raise MalformedBackendAnswer("response lacks 'features'")
        return response["features"]


def extract_features(artifact: SkillArtifact, backend: AnalysisBackend) -> FeatureVector:
    """Run the questionnaire; a schema-violating answer is retried once."""
    try:
        return FeatureVector.from_answers(backend.evaluate(artifact))
    except MalformedBackendAnswer:
        return FeatureVector.from_answers(backend.evaluate(artifact))
