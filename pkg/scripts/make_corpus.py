#!/usr/bin/env python3
"""Generate the three synthetic corpora the experiments use.

* ``main``: 40 pieces x 6 pianists x 3 takes, well-separated styles;
  drives the length and feature-combination studies.
* ``small`` / ``large``: 16 vs 40 pieces x 2 takes of closely spaced
  styles; the pair for the split-sensitivity study (large is 2.5x small).

Everything is seeded, so re-running reproduces the same bytes.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from perfid.cli import main as perfid_main


def run(argv: list[str]) -> None:
    code = perfid_main(argv)
    if code != 0:
        raise SystemExit(code)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="data", help="output root directory")
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()
    root = Path(args.root)
    force = ["--force"] if args.force else []

    run(["synth", "--out", str(root / "main"), "--seed", "7",
         "--pieces", "40", "--per-cell", "3", "--difficulty", "easy",
         "--length-min", "1100", "--length-max", "1500"] + force)
    run(["synth", "--out", str(root / "small"), "--seed", "21",
         "--pieces", "16", "--per-cell", "2", "--difficulty", "hard",
         "--length-min", "600", "--length-max", "900"] + force)
    run(["synth", "--out", str(root / "large"), "--seed", "22",
         "--pieces", "40", "--per-cell", "2", "--difficulty", "hard",
         "--length-min", "600", "--length-max", "900"] + force)
    print(f"corpora ready under {root}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
