"""Command-line entry point: ``skillguard <stage> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .ingest import DEFAULT_MAX_BYTES
from .pipeline import (
    Config,
    StageError,
    run_agree,
    run_analyze,
    run_context,
    run_features,
    run_hijack,
    run_ingest,
    run_pipeline,
    run_report,
    run_scan,
)


OPTIONS = {
    "index": (["--index"], {}),
    "fetcher": (["--fetcher"], {"help": "git | git:BASEURL | local:DIR"}),
    "timeout_secs": (["--timeout-secs"], {"type": float}),
    "max_bytes": (["--max-bytes"], {"type": int, "help": f"per-skill size cap (default {DEFAULT_MAX_BYTES})"}),
    "trackers": (["--trackers"], {}),
    "geo": (["--geo"], {}),
    "detectors": (["--detectors"], {}),
    "secrets_mode": (["--secrets-mode"], {"choices": ["offline", "validate"]}),
    "rules": (["--rules"], {}),
    "backend": (["--backend"], {"choices": ["heuristic", "remote"]}),
    "endpoint": (["--endpoint"], {}),
    "flagged": (["--flagged"], {"help": "features JSONL (default: OUT/features.jsonl)"}),
    "repos": (["--repos"], {}),
    "repo_meta": (["--repo-meta"], {}),
    "now": (["--now"], {"help": "ISO-8601 reference time for metadata scoring"}),
    "flags": (["--flags"], {"help": "directory of external flag-set JSONL files"}),
    "universe": (["--universe"], {"help": "'common' or a file of digests"}),
    "forge": (["--forge"], {"help": "replay:FILE | live"}),
    "retirement_threshold": (["--retirement-threshold"], {"type": int}),
}

COMMANDS = {
    "ingest": ("fetch indexed skills into the store", ["index", "fetcher", "timeout_secs", "max_bytes"]),
    "analyze": ("endpoints, trackers, scripts, secrets", ["trackers", "geo", "detectors", "secrets_mode"]),
    "scan": ("run the rule scanner", ["rules"]),
    "features": ("behavioral features and risk", ["backend", "endpoint"]),
    "context": ("repository-context rescoring of flagged skills",
                ["flagged", "repos", "repo_meta", "now", "backend", "endpoint", "rules"]),
    "agree": ("cross-scanner agreement", ["flags", "universe"]),
    "hijack": ("audit index references for takeover exposure", ["index", "forge", "retirement_threshold"]),
    "report": ("summary tables from stage outputs", []),
    "run": ("run every configured stage in order", [o for o in OPTIONS if o != "flagged"]),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; relative paths resolve against its directory")
    common.add_argument("--store", help="content-addressed store directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="skillguard", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    for name, (help_text, options) in COMMANDS.items():
        s = sub.add_parser(name, parents=[common], help=help_text)
        for opt in options:
            flags, kwargs = OPTIONS[opt]
            s.add_argument(*flags, dest=opt, **kwargs)
    return p


_NOT_CONFIG = {"command", "config", "verbose", "flagged"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    try:
        cfg = Config.load(args.config, **overrides)
        if cfg.out is not None:
            cfg.out.mkdir(parents=True, exist_ok=True)
        cmd = args.command
        if cmd == "ingest":
            result = run_ingest(cfg)
        elif cmd == "analyze":
            result = {"skills": run_analyze(cfg)}
        elif cmd == "scan":
            result = {"skills": run_scan(cfg)}
        elif cmd == "features":
            result = {"skills": run_features(cfg)}
        elif cmd == "context":
            result = {"rescored": run_context(cfg, Path(args.flagged) if args.flagged else None)}
        elif cmd == "agree":
            result = run_agree(cfg)
        elif cmd == "hijack":
            result = run_hijack(cfg)
        elif cmd == "report":
            run_report(cfg)
            result = None
        else:
            run_pipeline(cfg)
            result = None
    except StageError as exc:
        print(f"skillguard: {exc}", file=sys.stderr)
        return exc.exit_code
    if result is None:
        sys.stdout.write((cfg.out / "summary.txt").read_text(encoding="utf-8"))
    else:
        print(json.dumps(result, sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
