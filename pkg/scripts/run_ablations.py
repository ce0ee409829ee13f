#!/usr/bin/env python3
"""Run the step-order/fusion ablation table on a synthetic sequence.

Covers the reorderings and fusions plus the flag variants (no qkv
finetuning, single-scale decomposition, no decomposition):

    python3 scripts/run_ablations.py --workdir runs/ablations --frames 300 --epochs 2
"""

import argparse
from pathlib import Path

from stagedsfm.cli import main as cli_main

PLANS = ";".join([
    "I,II,III",
    "I,II,III@no-qkv",
    "I,II,III@no-multiscale",
    "III,I,II",
    "I,{II,III}",
    "I,{II,III}@no-iid",
    "{I,II},III",
    "I,III",
])


def run(args) -> None:
    work = Path(args.workdir)
    force = ["--force"] if args.force else []
    rc = cli_main(["synth", "--out", str(work / "data"), "--frames", str(args.frames),
                   "--size", "64x64", "--seed", str(args.seed)] + force)
    assert rc == 0
    rc = cli_main(["ablate", "--data", str(work / "data"), "--out", str(work / "table"),
                   "--epochs", str(args.epochs), "--seed", str(args.seed),
                   "--plans", PLANS] + force)
    assert rc == 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--frames", type=int, default=300)
    parser.add_argument("--epochs", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--force", action="store_true")
    run(parser.parse_args())
