"""End-to-end run on a small synthetic corpus: synth, prepare, train, evaluate, gradcheck.

    python scripts/smoke_run.py --out runs/smoke --preset CNN --epochs 3
"""

import argparse
import os
import sys

from hybridecg.cli import main


def run(argv):
    print("$ hybridecg " + " ".join(argv), flush=True)
    code = main(argv)
    if code:
        sys.exit(code)


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/smoke")
    p.add_argument("--preset", default="CNN")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--n-records", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args(argv)


def smoke(args):
    data = os.path.join(args.out, "data")
    run(["synth", "--out", data, "--n-records", str(args.n_records), "--seed", str(args.seed)])
    run(["prepare", "--data-root", data, "--out", os.path.join(args.out, "prepare")])
    model_dir = os.path.join(args.out, args.preset)
    run(["train", "--data-root", data, "--out", model_dir, "--preset", args.preset,
         "--epochs", str(args.epochs), "--seed", str(args.seed)])
    run(["evaluate", "--data-root", data, "--out", model_dir, "--split", "test"])
    run(["gradcheck", "--seeds", "3", "--out", os.path.join(args.out, "gradcheck")])


if __name__ == "__main__":
    smoke(parse_args())
