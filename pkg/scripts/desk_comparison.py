"""Generate the desk corpus (if missing) and run the ERS-vs-Dual comparison on it.

    python3 scripts/desk_comparison.py [--data data/desk] [--out runs/desk] [--set KEY=VALUE ...]
"""

import argparse
import sys
from pathlib import Path

from duallm.cli import main as cli_main
from duallm.synthetic import markov_corpus, write_splits

ROOT = Path(__file__).resolve().parent.parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default="data/desk")
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], dest="overrides")
    args = p.parse_args()
    data = Path(args.data)
    if not (data / "train.txt").is_file():
        write_splits(data, *markov_corpus(seed=args.seed))
    argv = ["compare", "--config", str(ROOT / "configs" / "desk.cfg"), "--out", args.out]
    for split in ("train", "valid", "test"):
        argv += ["--set", f"{split}_path={data / f'{split}.txt'}"]
    for item in args.overrides:
        argv += ["--set", item]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
