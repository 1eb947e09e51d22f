"""Pipeline stages reading and writing line-delimited JSON keyed by skill digest.

Every stage writes its outputs under ``out`` and a ``<stage>.manifest.json``
beside them; timestamps live only in the manifests (and the store catalog),
so content outputs are byte-identical across runs on identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import __version__
from .context import (
    ContextScore,
    HeuristicAlignmentBackend,
    RemoteAlignmentBackend,
    RepoMetadata,
    aggregate_cross_repo,
    build_context_bundle,
    cross_repo_dispersion,
    display,
    score_repository,
)
from .core import ParseError
from .features import (
    HeuristicBackend,
    RemoteBackend,
    build_request,
    estimate_tokens,
    extract_features,
    is_flagged,
    risk_score,
)
from .hijack import ForgeUnavailable, LiveForge, ReplayForge, audit_index
from .ingest import (
    DEFAULT_MAX_BYTES,
    ContentStore,
    FetchBudget,
    LocalFixtureFetcher,
    ShallowGitFetcher,
    UnreadableSource,
    _read_tree,
    ingest_entries,
    ingest_index,
)
from .scanner import MalformedRule, ScanReport, load_rules, scan
from .static import (
    HttpValidator,
    detect_secrets,
    extract_endpoints,
    load_detectors,
    load_geo_table,
    load_trackers,
    match_trackers,
    script_inventory,
)
from .stats import FlagSet, agreement_report, common_universe, load_flag_sets, repo_aggregate

log = logging.getLogger(__name__)

EXIT_CODES = {"config": 1, "ingest": 2, "analyze": 3, "scan": 4, "features": 9,
              "context": 5, "agree": 6, "hijack": 7, "report": 8}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = EXIT_CODES[stage]


class MalformedInput(ValueError):
    pass


_PATH_KEYS = ("index", "store", "out", "rules", "detectors", "trackers", "geo", "repos",
              "repo_meta", "flags")


@dataclass
class Config:
    store: Optional[Path] = None
    out: Optional[Path] = None
    index: Optional[Path] = None
    fetcher: str = "git"
    timeout_secs: float = 120.0
    max_bytes: int = DEFAULT_MAX_BYTES
    workers: int = 4
    rules: Optional[Path] = None
    detectors: Optional[Path] = None
    trackers: Optional[Path] = None
    geo: Optional[Path] = None
    secrets_mode: str = "offline"
    backend: str = "heuristic"
    endpoint: Optional[str] = None
    repos: Optional[Path] = None
    repo_meta: Optional[Path] = None
    now: Optional[str] = None
    flags: Optional[Path] = None
    universe: str = "common"
    forge: Optional[str] = None
    retirement_threshold: Optional[int] = None

    @classmethod
    def load(cls, path=None, **overrides) -> "Config":
        data: dict = {}
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise StageError("config", f"cannot read config {path}: {exc}") from exc
            base = path.parent
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise StageError("config", f"unknown config keys: {sorted(unknown)}")
        for key in _PATH_KEYS:
            if data.get(key) is not None:
                data[key] = (base / data[key]).resolve()
        if isinstance(data.get("fetcher"), str) and data["fetcher"].startswith("local:"):
            data["fetcher"] = "local:" + str((base / data["fetcher"][6:]).resolve())
        if isinstance(data.get("forge"), str) and data["forge"].startswith("replay:"):
            data["forge"] = "replay:" + str((base / data["forge"][7:]).resolve())
        for key, value in overrides.items():
            if value is not None:
                data[key] = Path(value).resolve() if key in _PATH_KEYS else value
        cfg = cls(**data)
        if cfg.secrets_mode not in ("offline", "validate"):
            raise StageError("config", f"bad secrets_mode {cfg.secrets_mode!r}")
        if cfg.backend not in ("heuristic", "remote"):
            raise StageError("config", f"bad backend {cfg.backend!r}")
        if cfg.backend == "remote" and not cfg.endpoint:
            raise StageError("config", "remote backend needs an endpoint")
        return cfg

    def snapshot(self) -> dict:
        return {k: (str(v) if isinstance(v, Path) else v) for k, v in asdict(self).items()}

    def require(self, stage: str, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise StageError(stage if stage in EXIT_CODES else "config", f"missing setting: {name}")


def _now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except ValueError as exc:
                    raise MalformedInput(f"{path.name}:{n}: {exc}") from exc
    return rows


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


class Stage:
    """Context manager recording a RunManifest beside a stage's outputs."""

    def __init__(self, name: str, cfg: Config, inputs: list = ()):
        self.name, self.cfg, self.inputs = name, cfg, inputs

    def __enter__(self):
        self.started = _now_iso()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None and self.cfg.out is not None:
            inputs = {}
            for p in self.inputs:
                if p is None:
                    continue
                p = Path(p)
                if p.is_file():
                    inputs[str(p)] = _sha256_file(p)
            write_json(self.cfg.out / f"{self.name}.manifest.json", {
                "command": self.name,
                "config": self.cfg.snapshot(),
                "input_digests": inputs,
                "tool_version": __version__,
                "started_at": self.started,
                "finished_at": _now_iso(),
            })
        return False


def _store(cfg: Config, stage: str) -> ContentStore:
    cfg.require(stage, "store", "out")
    return ContentStore(cfg.store)


def make_fetcher(spec: str):
    if spec.startswith("local:"):
        return LocalFixtureFetcher(spec[6:])
    if spec == "git":
        return ShallowGitFetcher()
    if spec.startswith("git:"):
        return ShallowGitFetcher(spec[4:])
    raise StageError("config", f"unknown fetcher {spec!r}")


# -- stages ------------------------------------------------------------------

def run_ingest(cfg: Config) -> dict:
    store = _store(cfg, "ingest")
    cfg.require("ingest", "index")
    with Stage("ingest", cfg, [cfg.index]):
        try:
            load = ingest_index(cfg.index)
        except UnreadableSource as exc:
            raise StageError("ingest", str(exc)) from exc
        budget = FetchBudget(cfg.timeout_secs, cfg.max_bytes)
        results = ingest_entries(load.entries, store, make_fetcher(cfg.fetcher), budget, cfg.workers)
        rows = []
        for entry, status, digests in results:
            row = entry.to_dict()
            row.update(status=status, digests=digests)
            rows.append(row)
        write_jsonl(cfg.out / "ingest.jsonl", rows)
        counts: dict = {}
        for _, status, _ in results:
            counts[status] = counts.get(status, 0) + 1
        summary = {"entries": len(load.entries), "skipped_lines": load.skipped,
                   "status_counts": dict(sorted(counts.items())), "unique_skills": len(store.digests())}
        write_json(cfg.out / "ingest_summary.json", summary)
    return summary


def _artifacts(store: ContentStore):
    origins = store.origins()
    for digest in sorted(store.digests()):
        yield store.get(digest, origins[digest][0])


def run_analyze(cfg: Config) -> int:
    store = _store(cfg, "analyze")
    try:
        geo = load_geo_table(cfg.geo) if cfg.geo else {}
        trackers = load_trackers(cfg.trackers) if cfg.trackers else set()
        detectors = load_detectors(cfg.detectors)
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("analyze", f"cannot load analysis tables: {exc}") from exc
    validator = HttpValidator() if cfg.secrets_mode == "validate" else None
    with Stage("analyze", cfg, [cfg.geo, cfg.trackers, cfg.detectors, store.catalog_path]):
        rows = []
        for art in _artifacts(store):
            endpoints = extract_endpoints(art, geo_table=geo)
            continents: dict = {}
            for e in endpoints:
                if e.etld1:
                    continents[e.continent] = continents.get(e.continent, 0) + 1
            rows.append({
                "digest": art.hexdigest,
                "files": [{"path": f.path, "suffix": f.suffix, "size": len(f.content)} for f in art.files],
                "endpoints": [e.to_dict() for e in endpoints],
                "etld1s": sorted({e.etld1 for e in endpoints if e.etld1}),
                "continents": dict(sorted(continents.items())),
                "trackers": sorted({t for _, t in match_trackers(endpoints, trackers)}),
                "scripts": script_inventory(art).to_dict(),
                "secrets": [s.to_dict() for s in detect_secrets(art, detectors, cfg.secrets_mode, validator)],
            })
        write_jsonl(cfg.out / "analysis.jsonl", rows)
    return len(rows)


def run_scan(cfg: Config) -> int:
    store = _store(cfg, "scan")
    try:
        rules = load_rules(cfg.rules)
    except (MalformedRule, OSError, ValueError) as exc:
        raise StageError("scan", f"cannot load rules: {exc}") from exc
    with Stage("scan", cfg, [cfg.rules, store.catalog_path]):
        rows = [scan(art, rules).to_dict() for art in _artifacts(store)]
        write_jsonl(cfg.out / "scan.jsonl", rows)
    return len(rows)


def run_features(cfg: Config) -> int:
    store = _store(cfg, "features")
    scan_path = cfg.out / "scan.jsonl"
    if not scan_path.exists():
        raise StageError("features", "scan.jsonl not found; run the scan stage first")
    reports = {r["digest"]: ScanReport.from_dict(r) for r in read_jsonl(scan_path)}
    if cfg.backend == "remote":
        backend = RemoteBackend(cfg.endpoint)
    else:
        backend = HeuristicBackend(load_detectors(cfg.detectors))
    with Stage("features", cfg, [scan_path, store.catalog_path]):
        rows = []
        for art in _artifacts(store):
            report = reports.get(art.hexdigest)
            if report is None:
                raise StageError("features", f"no scan report for {art.hexdigest}")
            try:
                vector = extract_features(art, backend)
            except Exception as exc:  # backend errors are stage-scoped
                raise StageError("features", f"{art.hexdigest}: {exc}") from exc
            assessment = risk_score(vector, art.hexdigest)
            rows.append({
                "digest": art.hexdigest,
                "features": vector.to_dict(),
                "risk": assessment.risk,
                "rationale": assessment.rationale,
                "scan_overall": report.overall.name,
                "flagged": is_flagged(report, assessment),
                "request_tokens": estimate_tokens(json.dumps(build_request(art), sort_keys=True)),
            })
        write_jsonl(cfg.out / "features.jsonl", rows)
    return len(rows)


def load_repo_meta(path: Path) -> dict:
    meta = {}
    for row in read_jsonl(path):
        meta[row["repo_id"]] = RepoMetadata.from_dict(row)
    return meta


def run_context(cfg: Config, flagged_path: Optional[Path] = None) -> int:
    store = _store(cfg, "context")
    cfg.require("context", "repos", "now")
    flagged_path = flagged_path or cfg.out / "features.jsonl"
    meta_path = cfg.repo_meta or cfg.repos / "_meta.jsonl"
    if not flagged_path.exists():
        raise StageError("context", f"{flagged_path.name} not found")
    try:
        metadata = load_repo_meta(meta_path)
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("context", f"cannot read repository metadata: {exc}") from exc
    if cfg.backend == "remote":
        backend = RemoteAlignmentBackend(cfg.endpoint)
    else:
        backend = HeuristicAlignmentBackend(load_rules(cfg.rules))
    origins = store.origins()
    trees: dict = {}
    with Stage("context", cfg, [flagged_path, meta_path, store.catalog_path]):
        repo_rows, skill_rows = [], []
        flagged = [r["digest"] for r in read_jsonl(flagged_path) if r.get("flagged")]
        for digest in sorted(set(flagged)):
            seen, scores = set(), []
            for origin in origins.get(digest, []):
                if origin.platform == "hosted" or origin.repo_id in seen:
                    continue
                seen.add(origin.repo_id)
                repo_dir = cfg.repos / origin.owner / origin.repository
                if origin.repo_id not in metadata or not repo_dir.is_dir():
                    log.warning("no repository context for %s", origin.repo_id)
                    continue
                if origin.repo_id not in trees:
                    trees[origin.repo_id] = _read_tree(repo_dir)
                try:
                    bundle = build_context_bundle(trees[origin.repo_id], origin.subpath)
                    assessment = backend.assess(bundle)
                    score = score_repository(assessment, metadata[origin.repo_id], cfg.now, origin.repo_id)
                except (FileNotFoundError, ValueError, ParseError) as exc:
                    raise StageError("context", f"{digest} in {origin.repo_id}: {exc}") from exc
                scores.append(score)
                row = {"digest": digest, "skill_path": origin.subpath, "assessment": assessment.to_dict(),
                       "bundle": bundle.stats(),
                       "request_tokens": estimate_tokens(json.dumps(bundle.to_request(), sort_keys=True))}
                row.update(score.to_dict())
                repo_rows.append(row)
            if not scores:
                continue
            agg = aggregate_cross_repo(scores)
            row = {"digest": digest, "repos": list(agg.repos), "repo_count": len(scores)}
            row.update(agg.to_dict())
            del row["repo_id"]
            if len(scores) >= 2:
                d = cross_repo_dispersion([s.codebase for s in scores])
                row["dispersion"] = {"variance": round(d.variance, 4), "std": round(d.std, 4),
                                     "range": round(d.range, 4)}
            skill_rows.append(row)
        write_jsonl(cfg.out / "context.jsonl", repo_rows)
        write_jsonl(cfg.out / "context_skills.jsonl", skill_rows)
    return len(skill_rows)


def run_agree(cfg: Config) -> dict:
    store = _store(cfg, "agree")
    features_path = cfg.out / "features.jsonl"
    if not features_path.exists():
        raise StageError("agree", "features.jsonl not found")
    rows = read_jsonl(features_path)
    scanned = {r["digest"] for r in rows}
    own = [
        FlagSet("rule-scanner", {r["digest"] for r in rows if r["scan_overall"] in ("HIGH", "CRITICAL")}, scanned),
        FlagSet("questionnaire", {r["digest"] for r in rows if r["risk"] > 3}, scanned),
        FlagSet("skillguard", {r["digest"] for r in rows if r["flagged"]}, scanned),
    ]
    external = load_flag_sets(cfg.flags) if cfg.flags else []
    sets = own + external
    if cfg.universe == "common":
        universe = common_universe(sets)
    else:
        universe = set(Path(cfg.universe).read_text().split())
    mapping: dict = {}
    for digest, origs in store.origins().items():
        repos = {o.repo_id for o in origs if o.platform != "hosted"}
        if repos:
            mapping[digest] = repos
    with Stage("agree", cfg, [features_path] + sorted(Path(cfg.flags).glob("*.jsonl")) if cfg.flags else [features_path]):
        try:
            report = agreement_report(sets, universe)
            skill_flags = {r["digest"]: r["flagged"] for r in rows if r["digest"] in mapping}
            repo_flags, summary = repo_aggregate(skill_flags, mapping)
        except (ValueError, KeyError) as exc:
            raise StageError("agree", str(exc)) from exc
        report["repo_aggregation"] = summary.to_dict()
        write_json(cfg.out / "agreement.json", report)
        write_jsonl(cfg.out / "repo_flags.jsonl", [{"repo_id": k, "flagged": v} for k, v in repo_flags.items()])
    return report


def make_forge(spec: str):
    if spec.startswith("replay:"):
        return ReplayForge.from_file(spec[7:])
    if spec == "live":
        return LiveForge()
    raise StageError("config", f"unknown forge {spec!r}")


def run_hijack(cfg: Config) -> dict:
    cfg.require("hijack", "index", "forge", "out")
    with Stage("hijack", cfg, [cfg.index] + ([cfg.forge[7:]] if cfg.forge.startswith("replay:") else [])):
        try:
            entries = ingest_index(cfg.index).entries
            result = audit_index(entries, make_forge(cfg.forge), cfg.retirement_threshold, cfg.workers)
        except (ForgeUnavailable, UnreadableSource, OSError) as exc:
            raise StageError("hijack", str(exc)) from exc
        write_jsonl(cfg.out / "hijack.jsonl", [r.to_dict() for r in result["rows"]])
        write_json(cfg.out / "hijack_summary.json", result["summary"])
    return result["summary"]


# -- report ------------------------------------------------------------------

def _pct(num: int, den: int) -> str:
    return f"{100.0 * num / den:.2f}%" if den else "n/a"


def render_report(out: Path) -> tuple:
    """Build (summary dict, text table) from the stage outputs in ``out``."""
    out = Path(out)
    for required in ("scan.jsonl", "features.jsonl"):
        if not (out / required).exists():
            raise MalformedInput(f"missing required input {required}")
    scans = {r["digest"]: r for r in read_jsonl(out / "scan.jsonl")}
    feats = {r["digest"]: r for r in read_jsonl(out / "features.jsonl")}
    if set(scans) != set(feats):
        raise MalformedInput("scan.jsonl and features.jsonl cover different digests")
    for d, r in feats.items():
        if r["scan_overall"] != scans[d]["overall"]:
            raise MalformedInput(f"conflicting severity for {d}")
    flagged = sorted(d for d, r in feats.items() if r["flagged"])
    n = len(feats)
    severity_counts = {s: 0 for s in ("NONE", "LOW", "MEDIUM", "HIGH", "CRITICAL")}
    for r in scans.values():
        severity_counts[r["overall"]] += 1
    summary = {
        "skills_scanned": n,
        "severity_counts": severity_counts,
        "flagged": len(flagged),
        "flagged_rate": round(len(flagged) / n, 6) if n else None,
        "flagged_digests": flagged,
        "estimated_tokens": {"questionnaire": sum(r.get("request_tokens", 0) for r in feats.values())},
    }
    if (out / "ingest_summary.json").exists():
        summary["ingest"] = json.loads((out / "ingest_summary.json").read_text())
    if (out / "context_skills.jsonl").exists():
        ctx = read_jsonl(out / "context_skills.jsonl")
        stray = [r["digest"] for r in ctx if r["digest"] not in feats or not feats[r["digest"]]["flagged"]]
        if stray:
            raise MalformedInput(f"context scores for unflagged or unknown digests: {stray}")
        cats = {"low": 0, "intermediate": 0, "high": 0}
        for r in ctx:
            cats[r["category"]] += 1
        suspicious = sum(1 for r in ctx if r["suspicious"])
        summary["context"] = {
            "rescored": len(ctx),
            "categories": cats,
            "suspicious": suspicious,
            "suspicious_rate": round(suspicious / len(ctx), 6) if ctx else None,
            "skills": {r["digest"]: {"combined": r["combined"], "category": r["category"]} for r in ctx},
        }
        if (out / "context.jsonl").exists():
            summary["estimated_tokens"]["context"] = sum(
                r.get("request_tokens", 0) for r in read_jsonl(out / "context.jsonl"))
    if (out / "agreement.json").exists():
        agreement = json.loads((out / "agreement.json").read_text())
        summary["agreement"] = agreement
    if (out / "hijack_summary.json").exists():
        summary["hijack"] = json.loads((out / "hijack_summary.json").read_text())
    return summary, format_report(summary)


def format_report(summary: dict) -> str:
    lines = ["skillguard report", "=" * 17, ""]

    def row(label, value):
        lines.append(f"{label:<32}{value}")

    n = summary["skills_scanned"]
    if "ingest" in summary:
        ing = summary["ingest"]
        row("index entries", ing["entries"])
        for status, count in ing["status_counts"].items():
            row(f"  fetch {status}", count)
        row("unique skills stored", ing["unique_skills"])
    row("skills scanned", n)
    for sev, count in summary["severity_counts"].items():
        row(f"  scanner {sev}", count)
    row("flagged (HIGH+ and risk > 3)", f"{summary['flagged']} ({_pct(summary['flagged'], n)})")
    if "agreement" in summary:
        agg = summary["agreement"]["repo_aggregation"]
        row("repo-level flag rate", f"{agg['flagged_repos']}/{agg['repos']} ({_pct(agg['flagged_repos'], agg['repos'])})")
        row("skill-level flag rate (repos)", f"{agg['flagged_skills']}/{agg['skills']} "
            f"({_pct(agg['flagged_skills'], agg['skills'])})")
    if "context" in summary:
        ctx = summary["context"]
        row("context rescored", ctx["rescored"])
        for cat, count in ctx["categories"].items():
            row(f"  category {cat}", count)
        row("suspicious context", f"{ctx['suspicious']} ({_pct(ctx['suspicious'], ctx['rescored'])})")
        for digest, s in sorted(ctx["skills"].items()):
            row(f"  {digest[:12]}", f"{s['combined']:.1f} {s['category']}")
    if "hijack" in summary:
        hj = summary["hijack"]
        for verdict, count in hj["verdicts"].items():
            row(f"hijack {verdict}", count)
        row("vulnerable repositories", hj["vulnerable_repos"])
        row("affected skills", hj["affected_skills"])
        dl = hj["downloads"]
        row("downloads median/max", f"{dl['median']}/{dl['max']}")
    tokens = summary["estimated_tokens"]
    row("est. questionnaire tokens", tokens.get("questionnaire", 0))
    if "context" in tokens:
        row("est. context tokens", tokens["context"])
    if "agreement" in summary:
        ag = summary["agreement"]
        lines += ["", f"agreement P(col flags | row flags), universe={ag['universe_size']}"]
        names = ag["scanners"]
        width = max([len(s) for s in names] + [8])
        lines.append(" " * width + "".join(f"{s[:10]:>12}" for s in names))
        for a in names:
            cells = "".join(f"{'-' if v is None else f'{v:.3f}':>12}"
                            for v in (ag["matrix"][a][b] for b in names))
            lines.append(f"{a:<{width}}{cells}")
        lines.append("flagged by k: " + ", ".join(f"{k}:{v}" for k, v in ag["flagged_by_k"].items()))
    return "\n".join(lines) + "\n"


def run_report(cfg: Config) -> dict:
    cfg.require("report", "out")
    with Stage("report", cfg, [cfg.out / "scan.jsonl", cfg.out / "features.jsonl"]):
        try:
            summary, text = render_report(cfg.out)
        except (MalformedInput, KeyError, ValueError) as exc:
            raise StageError("report", str(exc)) from exc
        write_json(cfg.out / "summary.json", summary)
        (cfg.out / "summary.txt").write_text(text, encoding="utf-8")
    return summary


def run_pipeline(cfg: Config) -> dict:
    """ingest -> analyze -> scan -> features -> context -> agree -> hijack -> report."""
    cfg.require("config", "store", "out")
    cfg.out.mkdir(parents=True, exist_ok=True)
    if cfg.index is not None:
        run_ingest(cfg)
    run_analyze(cfg)
    run_scan(cfg)
    run_features(cfg)
    if cfg.repos is not None:
        run_context(cfg)
    run_agree(cfg)
    if cfg.forge is not None and cfg.index is not None:
        run_hijack(cfg)
    return run_report(cfg)
