"""Corpus loading, vocabularies and contiguous batching for stateful LMs."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

EOS = "<eos>"
UNK = "<unk>"


class CorpusError(ValueError):
    pass


class VocabError(KeyError):
    pass


def tokenize_lines(lines: Sequence[str]) -> list[str]:
    """Whitespace-split every line and close it with ``<eos>``."""
    out: list[str] = []
    for line in lines:
        out.extend(line.split())
        out.append(EOS)
    return out


def load_tokens(path) -> list[str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc.strerror or exc}") from exc
    if not text:
        raise CorpusError(f"corpus file {path} is empty")
    return tokenize_lines(text.splitlines())


def load_corpus(train, valid, test) -> tuple[list[str], list[str], list[str]]:
    return load_tokens(train), load_tokens(valid), load_tokens(test)


@dataclass
class Vocab:
    itos: list[str] = field(default_factory=list)
    stoi: dict[str, int] = field(default_factory=dict)
    frozen: bool = False

    def __len__(self) -> int:
        return len(self.itos)

    def add(self, token: str) -> int:
        if token in self.stoi:
            return self.stoi[token]
        if self.frozen:
            raise VocabError(f"vocabulary is frozen; cannot add {token!r}")
        self.stoi[token] = len(self.itos)
        self.itos.append(token)
        return self.stoi[token]

    @property
    def unk_id(self) -> int | None:
        return self.stoi.get(UNK)

    def id(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is not None:
            return idx
        if self.unk_id is None:
            raise VocabError(f"out-of-vocabulary token {token!r} and no {UNK} entry to map it to")
        return self.unk_id

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.fromiter((self.id(t) for t in tokens), dtype=np.int64, count=len(tokens))

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]


def build_vocab(tokens: Sequence[str]) -> Vocab:
    """Map every distinct training token, most frequent first (ties by first appearance)."""
    if not tokens:
        raise CorpusError("cannot build a vocabulary from an empty training sequence")
    counts = Counter(tokens)
    first = {}
    for i, t in enumerate(tokens):
        first.setdefault(t, i)
    vocab = Vocab()
    for t in sorted(counts, key=lambda t: (-counts[t], first[t])):
        vocab.add(t)
    vocab.add(EOS)
    vocab.frozen = True
    return vocab


class BatchStream:
    """Corpus ids laid out as ``B`` contiguous rows; the ragged tail is dropped."""

    def __init__(self, ids, batch_size: int):
        ids = np.asarray(ids, dtype=np.int64)
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        n = len(ids) // batch_size
        if n < 2:
            raise CorpusError(f"{len(ids)} tokens are too few for batch size {batch_size}")
        self.data = ids[: n * batch_size].reshape(batch_size, n)
        self.cursor = 0

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def num_targets(self) -> int:
        return self.data.shape[0] * (self.data.shape[1] - 1)

    def reset(self) -> None:
        self.cursor = 0

    def windows(self, seq_len: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(x, y)`` pairs left to right; ``y`` is ``x`` shifted by one token."""
        if seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {seq_len}")
        n = self.data.shape[1]
        while self.cursor < n - 1:
            i = self.cursor
            t = min(seq_len, n - 1 - i)
            self.cursor = i + t
            yield self.data[:, i : i + t], self.data[:, i + 1 : i + 1 + t]


def windows(stream: BatchStream, seq_len: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    stream.reset()
    return stream.windows(seq_len)


@dataclass
class Corpus:
    """Encoded train/valid/test splits sharing one training vocabulary."""

    vocab: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    @classmethod
    def from_tokens(cls, train: Sequence[str], valid: Sequence[str], test: Sequence[str]) -> Corpus:
        vocab = build_vocab(train)
        return cls(vocab, vocab.encode(train), vocab.encode(valid), vocab.encode(test))

    @classmethod
    def from_files(cls, train, valid, test) -> Corpus:
        return cls.from_tokens(*load_corpus(train, valid, test))
