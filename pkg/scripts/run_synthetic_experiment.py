#!/usr/bin/env python3
"""End-to-end synthetic experiment: synthesize a sequence, train the staged
schedule, and evaluate depth, trajectory and intrinsics on held-out splits.

Equivalent to chaining the CLI commands; handy as a single reproducible run.

    python3 scripts/run_synthetic_experiment.py --workdir runs/demo \
        --frames 400 --epochs 4 --seed 0
"""

import argparse
import json
from pathlib import Path

from stagedsfm.cli import main as cli_main


def run(args) -> None:
    work = Path(args.workdir)
    data = work / "data"
    train_out = work / "train"
    force = ["--force"] if args.force else []

    rc = cli_main(["synth", "--out", str(data), "--frames", str(args.frames),
                   "--size", f"{args.size}x{args.size}", "--seed", str(args.seed)] + force)
    assert rc == 0, "synth failed"
    rc = cli_main(["train", "--data", str(data), "--out", str(train_out),
                   "--epochs", str(args.epochs), "--seed", str(args.seed),
                   "--order", args.order] + force)
    assert rc == 0, "train failed"

    last = sorted((train_out / "checkpoints").iterdir())[-1]
    for cmd, split_name in (("eval-depth", "val"), ("eval-traj", "test"),
                            ("eval-intrinsics", "test")):
        out = work / cmd.replace("eval-", "eval_")
        rc = cli_main([cmd, "--checkpoint", str(last), "--data", str(data),
                       "--out", str(out), "--split", split_name] + force)
        assert rc == 0, f"{cmd} failed"
        print(f"{cmd}: {json.loads((out / 'metrics.json').read_text())}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--frames", type=int, default=400)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--epochs", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--order", default="I,II,III")
    parser.add_argument("--force", action="store_true")
    run(parser.parse_args())
