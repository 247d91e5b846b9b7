"""Long-run recipe on the full PTB-XL corpus (compute-bound; not part of the test suite).

Trains every preset with and without gating, evaluates on fold 10, runs 5-fold
cross-validation for one preset and writes deviation tables against the
published numbers.

    HYBRIDECG_DATA_ROOT=/data/ptb-xl python scripts/reproduce_comparison.py --out runs/full
"""

import argparse
import os
import sys

from hybridecg.cli import main
from hybridecg.model import presets


def run(argv):
    print("$ hybridecg " + " ".join(argv), flush=True)
    code = main(argv)
    if code:
        sys.exit(code)


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/full")
    p.add_argument("--data-root", default=os.environ.get("HYBRIDECG_DATA_ROOT"))
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--cv-preset", default="BiLSTM")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args(argv)


def reproduce(args):
    if not args.data_root:
        sys.exit("set HYBRIDECG_DATA_ROOT or pass --data-root")
    common = ["--data-root", args.data_root, "--seed", str(args.seed)]
    run(["prepare", *common, "--out", os.path.join(args.out, "prepare")])
    cmp_dir = os.path.join(args.out, "compare")
    run(["compare", *common, "--out", cmp_dir, "--ablate-gating", "--split", "test",
         "--epochs", str(args.epochs), "--parallel", str(args.parallel)])
    for name in sorted(presets()):
        report = os.path.join(cmp_dir, name.replace("+", "_"), "metrics_test.json")
        run(["regress", "--report", report, "--preset", name, "--tolerance", str(args.tolerance),
             "--out", os.path.join(args.out, "regress", name.replace("+", "_"))])
    run(["train", *common, "--preset", args.cv_preset, "--cv", "5", "--epochs", str(args.epochs),
         "--out", os.path.join(args.out, "cv", args.cv_preset.replace("+", "_"))])


if __name__ == "__main__":
    reproduce(parse_args())
