"""Small generated corpora for desk-scale experiments.

Each generator returns lines of whitespace-separated tokens, so they pass
through the same ``tokenize_lines`` path as corpus files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _word(i: int) -> str:
    return f"w{i}"


def repeated_pattern(n_lines: int = 32, pattern_len: int = 15, vocab: int = 8, seed: int = 7) -> list[str]:
    """One fixed random line repeated ``n_lines`` times (512 tokens with ``<eos>`` by default)."""
    rng = np.random.default_rng(seed)
    line = " ".join(_word(int(i)) for i in rng.integers(vocab, size=pattern_len))
    return [line] * n_lines


def cycle_corpus(n_tokens: int, vocab: int = 10, line_len: int = 20, seed: int = 0) -> list[str]:
    """A random cyclic permutation walked from random starts: each token fixes the next."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(vocab)
    succ = np.empty(vocab, dtype=int)
    succ[order] = np.roll(order, -1)
    return _walk(succ, n_tokens, line_len, rng, vocab, noise=0.0)


def _walk(succ, n_tokens, line_len, rng, vocab, noise, start=None):
    lines, made = [], 0
    tok = int(rng.integers(vocab)) if start is None else start
    while made < n_tokens:
        words = []
        for _ in range(min(line_len, n_tokens - made)):
            words.append(_word(tok))
            made += 1
            tok = int(rng.integers(vocab)) if noise and rng.random() < noise else int(succ[tok])
        lines.append(" ".join(words))
        made += 1  # <eos>
    return lines


def two_regime(
    n_train: int = 1200,
    n_eval: int = 600,
    vocab: int = 12,
    line_len: int = 24,
    noise: float = 0.1,
    seed: int = 11,
) -> tuple[list[str], list[str], list[str]]:
    """Train/valid follow one successor map; test switches to another halfway.

    Returns ``(train, valid, test)`` line lists.
    """
    rng = np.random.default_rng(seed)
    succ_a = rng.permutation(vocab)
    succ_b = rng.permutation(vocab)
    while np.any(succ_b == succ_a):
        succ_b = rng.permutation(vocab)
    train = _walk(succ_a, n_train, line_len, rng, vocab, noise)
    valid = _walk(succ_a, n_eval, line_len, rng, vocab, noise)
    test = _walk(succ_a, n_eval // 2, line_len, rng, vocab, noise) + _walk(
        succ_b, n_eval - n_eval // 2, line_len, rng, vocab, noise
    )
    return train, valid, test


def markov_corpus(
    n_train: int = 4000,
    n_eval: int = 800,
    vocab: int = 24,
    branching: int = 3,
    line_len: int = 16,
    seed: int = 0,
) -> tuple[list[str], list[str], list[str]]:
    """Second-order Markov text where each context has ``branching`` likely successors."""
    rng = np.random.default_rng(seed)
    succ = rng.integers(vocab, size=(vocab, vocab, branching))
    probs = rng.dirichlet(np.ones(branching), size=(vocab, vocab))

    def gen(n):
        lines, made = [], 0
        while made < n:
            a, b = (int(v) for v in rng.integers(vocab, size=2))
            words = [_word(a), _word(b)]
            while len(words) < line_len and made + len(words) < n:
                c = int(succ[a, b, rng.choice(branching, p=probs[a, b])])
                words.append(_word(c))
                a, b = b, c
            lines.append(" ".join(words))
            made += len(words) + 1
        return lines

    return gen(n_train), gen(n_eval), gen(n_eval)


def write_splits(directory, train, valid, test) -> tuple[Path, Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, lines in (("train", train), ("valid", valid), ("test", test)):
        p = directory / f"{name}.txt"
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(p)
    return tuple(paths)
