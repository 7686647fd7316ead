"""Reference runs behind the frozen thresholds in tests/test_acceptance.py.

    python3 scripts/reference_runs.py [convergence|dyneval|all]

Both runs are seeded end to end; rerunning prints the same numbers.
"""

import argparse
import json
import math
import time

from duallm.data import Corpus, tokenize_lines
from duallm.model import ModelConfig
from duallm.synthetic import repeated_pattern, two_regime
from duallm.train import TrainSettings, dynamic_eval, evaluate, train_run

# convergence: 512-token repeated pattern, Dual LSTM 16/16/16
CONVERGENCE_SEED = 7
CONVERGENCE_SETTINGS = TrainSettings(epochs=200, batch_size=4, seq_len=25, lr=1e-3, eval_batch_size=4)

# dynamic evaluation: two-regime corpus whose test half switches successor map
DYNEVAL_SEED = 11
DYNEVAL_SETTINGS = TrainSettings(epochs=30, batch_size=4, seq_len=25, lr=3e-3, eval_batch_size=1)
DYNEVAL_LR = 1e-3
DYNEVAL_SEQ_LEN = 5


def small_dual(seed: int) -> ModelConfig:
    return ModelConfig(architecture="Dual", recurrence="LSTM", embedding_units=16, recurrent_units=16,
                       dual_units=16, seed=seed)


def convergence_corpus() -> Corpus:
    toks = tokenize_lines(repeated_pattern(seed=CONVERGENCE_SEED))
    return Corpus.from_tokens(toks, toks, toks)


def dyneval_corpus() -> Corpus:
    return Corpus.from_tokens(*(tokenize_lines(s) for s in two_regime(seed=DYNEVAL_SEED)))


def run_convergence(epochs: int | None = None) -> dict:
    corpus = convergence_corpus()
    settings = CONVERGENCE_SETTINGS
    if epochs is not None:
        settings = TrainSettings(**{**settings.__dict__, "epochs": epochs})
    start = time.perf_counter()
    _, metrics = train_run(small_dual(CONVERGENCE_SEED), corpus, settings)
    train_ppl = [math.exp(r.train_loss) for r in metrics.epochs]
    first = next((i + 1 for i, p in enumerate(train_ppl) if p < 1.5), None)
    return {
        "tokens": len(corpus.train),
        "first_epoch_below_1.5": first,
        "final_train_ppl": train_ppl[-1],
        "seconds": round(time.perf_counter() - start, 1),
    }


def run_dyneval() -> dict:
    corpus = dyneval_corpus()
    start = time.perf_counter()
    ckpt, _ = train_run(small_dual(DYNEVAL_SEED), corpus, DYNEVAL_SETTINGS)
    static = evaluate(ckpt, corpus.test, DYNEVAL_SETTINGS.seq_len).perplexity
    dyn = dynamic_eval(ckpt, corpus.test, DYNEVAL_LR, 0.0, DYNEVAL_SEQ_LEN).perplexity
    return {
        "static_ppl": static,
        "dyneval_ppl": dyn,
        "margin": static - dyn,
        "seconds": round(time.perf_counter() - start, 1),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("which", nargs="?", default="all", choices=["convergence", "dyneval", "all"])
    args = p.parse_args()
    out = {}
    if args.which in ("convergence", "all"):
        out["convergence"] = run_convergence()
    if args.which in ("dyneval", "all"):
        out["dyneval"] = run_dyneval()
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
