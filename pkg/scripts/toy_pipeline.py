#!/usr/bin/env python3
"""End-to-end desk-scale experiment: build the canonical toy corpus, pre-train
the temporal GRU, run adversarial training, then generate and evaluate.

Every stage goes through the CLI so the run is reproducible from the written
manifests.  With the default arguments this takes a few minutes on a laptop.
"""

import argparse
import json
import sys
from pathlib import Path

from visitgan import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("workdir", type=Path, help="output directory for all artifacts")
    parser.add_argument("--patients", type=int, default=2000)
    parser.add_argument("--iterations", type=int, default=20_000)
    parser.add_argument("--pretrain-epochs", type=int, default=50)
    parser.add_argument("--hidden", type=int, default=64)
    parser.add_argument("--seed", type=int, default=3)
    args = parser.parse_args()

    work = args.workdir
    corpus = work / "corpus"
    pre_ckpt = work / "pretrain" / "pre.mtgn"
    run_dir = work / "run"
    syn_dir = work / "synthetic"
    report = work / "report.json"

    stages = [
        ["make-toy", "--canonical", corpus, "--patients", args.patients],
        ["pretrain", corpus, pre_ckpt, "--epochs", args.pretrain_epochs,
         "--hidden", args.hidden, "--seed", 1],
        ["train", corpus, pre_ckpt, run_dir, "--iterations", args.iterations,
         "--decay-every", max(args.iterations // 2, 1), "--hidden", args.hidden,
         "--seed", args.seed],
        ["generate", run_dir / "checkpoint_final.mtgn", corpus, syn_dir,
         "--patients", args.patients, "--seed", 11],
        ["evaluate", corpus, run_dir / "checkpoint_final.mtgn", report, "--seed", 0],
    ]
    for stage in stages:
        argv = [str(a) for a in stage]
        print(f"\n== visitgan {' '.join(argv)}")
        code = cli.main(argv)
        if code != 0:
            return code

    print("\n== final report")
    print(json.dumps(json.loads(report.read_text()), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
