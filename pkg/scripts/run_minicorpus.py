"""Run the full pipeline on the bundled mini-corpus and print the report.

Usage: python scripts/run_minicorpus.py [WORKDIR]
"""

import argparse
import sys
import tempfile
from pathlib import Path

from skillguard.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "fixtures" / "minicorpus" / "config.json"


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("workdir", nargs="?", help="where store/ and out/ go (default: a temp dir)")
    args = p.parse_args(argv)
    work = Path(args.workdir or tempfile.mkdtemp(prefix="skillguard-"))
    rc = main(["run", "--config", str(CONFIG), "--store", str(work / "store"), "--out", str(work / "out")])
    print(f"outputs in {work / 'out'}", file=sys.stderr)
    return rc


if __name__ == "__main__":
    sys.exit(run())
