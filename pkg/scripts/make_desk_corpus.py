"""Write the desk-scale Markov corpus used by configs/desk.cfg.

    python3 scripts/make_desk_corpus.py [--out data/desk] [--seed 0]
"""

import argparse

from duallm.synthetic import markov_corpus, write_splits


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="data/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-tokens", type=int, default=4000)
    p.add_argument("--eval-tokens", type=int, default=800)
    args = p.parse_args()
    paths = write_splits(args.out, *markov_corpus(args.train_tokens, args.eval_tokens, seed=args.seed))
    for path in paths:
        print(path)


if __name__ == "__main__":
    main()
