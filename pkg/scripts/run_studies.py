#!/usr/bin/env python3
"""Run the three studies end to end on the generated corpora.

Expects the directory layout produced by ``scripts/make_corpus.py``.
With the default desk profile the full sweep takes on the order of an
hour on one CPU core; pass ``--epochs`` to shorten exploratory runs.
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
    parser.add_argument("--root", default="data", help="corpus root directory")
    parser.add_argument("--out", default="results", help="report root directory")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()
    root, out = Path(args.root), Path(args.out)
    extra = ["--force"] if args.force else []
    if args.epochs is not None:
        extra += ["--epochs", str(args.epochs)]

    run(["study", "--id", "study1", "--corpus", str(root / "main"),
         "--out", str(out / "study1")] + extra)
    run(["study", "--id", "study2", "--corpus", str(root / "main"),
         "--out", str(out / "study2")] + extra)
    run(["study", "--id", "study3", "--corpus", str(root / "small"),
         "--corpus-b", str(root / "large"), "--out", str(out / "study3"),
         "--length", "500"] + extra)
    print(f"reports ready under {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
