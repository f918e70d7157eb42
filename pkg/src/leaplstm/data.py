"""Corpus ingestion, vocabulary, batching and schedule-training masks."""

from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class CorpusError(ValueError):
    """Malformed corpus or embedding file."""


def tokenize(text: str) -> list[str]:
    """Lower-case, split on whitespace, and split every punctuation character off.

    >>> tokenize("U.S.-based")
    ['u', '.', 's', '.', '-', 'based']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class TextExample:
    tokens: list[str]
    label: int


@dataclass
class Document:
    tokens: np.ndarray
    label: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1 or self.tokens.size < 1:
            raise ValueError("a document needs at least one token")

    @property
    def length(self) -> int:
        return int(self.tokens.size)


@dataclass
class Vocabulary:
    itos: list[str] = field(default_factory=lambda: [PAD_TOKEN, UNK_TOKEN])

    def __post_init__(self):
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 2) -> Vocabulary:
    """Vocabulary of tokens seen at least ``min_freq`` times.

    Ids start at 2 in descending frequency; ties keep first-occurrence order.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    n_docs = 0
    for tokens in corpus:
        if isinstance(tokens, TextExample):
            tokens = tokens.tokens
        counts.update(tokens)
        n_docs += 1
    if n_docs == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    # most_common sorts stably, so equal counts stay in insertion order.
    kept = [tok for tok, n in counts.most_common() if n >= min_freq
            and tok not in (PAD_TOKEN, UNK_TOKEN)]
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept)


def load_corpus(path: str | Path, num_classes: int) -> list[TextExample]:
    """Read a quoted CSV corpus: 1-based class, then one or more text fields."""
    examples = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise CorpusError(f"{path}: row {row_no}: expected class and text fields, got {row!r}")
            try:
                cls = int(row[0])
            except ValueError:
                raise CorpusError(f"{path}: row {row_no}: class {row[0]!r} is not an integer") from None
            if not 1 <= cls <= num_classes:
                raise CorpusError(f"{path}: row {row_no}: class {cls} outside 1..{num_classes}")
            tokens = tokenize(" ".join(row[1:]))
            if not tokens:
                raise CorpusError(f"{path}: row {row_no}: empty text")
            examples.append(TextExample(tokens, cls - 1))
    return examples


def write_corpus(path: str | Path, examples: Iterable[TextExample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_ALL)
        for ex in examples:
            w.writerow([str(ex.label + 1), " ".join(ex.tokens)])


def encode_corpus(examples: Iterable[TextExample], vocab: Vocabulary) -> list[Document]:
    return [Document(vocab.encode(ex.tokens), ex.label) for ex in examples]


def load_embeddings(path: str | Path, vocab: Vocabulary, dim: int,
                    rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
    """Embedding table from a GloVe-style text file.

    Rows of tokens missing from the file are drawn from U(-scale, scale);
    the PAD row is zero.
    """
    table = rng.uniform(-scale, scale, size=(len(vocab), dim))
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token = parts[0]
            if len(parts) - 1 != dim:
                raise CorpusError(
                    f"{path}: line {line_no}: token {token!r} has {len(parts) - 1} values, expected {dim}")
            idx = vocab.stoi.get(token)
            if idx is None or idx == PAD_ID:
                continue
            table[idx] = np.asarray(parts[1:], dtype=np.float64)
    table[PAD_ID] = 0.0
    return table


def mask_probability(epoch: int, r_m: float, beta: float, index_base: int = 0) -> float:
    """Word-deletion probability ``max(0, r_m - i * beta)`` for loop counter ``epoch``.

    ``epoch`` counts from 0; ``index_base`` shifts it to the formula's ``i``.
    """
    i = epoch + index_base
    # Rounding keeps e.g. 0.45 - 3 * 0.15 from leaving a 5e-17 residue.
    return max(0.0, round(r_m - i * beta, 12))


def schedule_mask(doc: Document, epoch: int, r_m: float, beta: float,
                  rng: np.random.Generator, index_base: int = 0) -> Document:
    """Delete each token independently with the epoch's mask probability.

    Surviving tokens keep their order.  If every token would go, one of them,
    chosen uniformly, is kept.
    """
    p = mask_probability(epoch, r_m, beta, index_base)
    if p <= 0.0:
        return doc
    keep = rng.random(doc.length) >= p
    if not keep.any():
        keep[rng.integers(doc.length)] = True
    return Document(doc.tokens[keep], doc.label)


@dataclass
class Batch:
    ids: np.ndarray       # [batch, T_max], PAD-filled
    lengths: np.ndarray   # [batch]
    labels: np.ndarray    # [batch]

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])

    @property
    def mask(self) -> np.ndarray:
        """1.0 on real tokens, 0.0 on padding."""
        return (np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]).astype(np.float64)


def collate(docs: Sequence[Document]) -> Batch:
    lengths = np.array([d.length for d in docs], dtype=np.int64)
    ids = np.full((len(docs), int(lengths.max())), PAD_ID, dtype=np.int64)
    for row, d in enumerate(docs):
        ids[row, :d.length] = d.tokens
    return Batch(ids, lengths, np.array([d.label for d in docs], dtype=np.int64))


def make_batches(docs: Sequence[Document], batch_size: int,
                 shuffle_seed: int | None = None) -> Iterator[Batch]:
    """Yield padded batches; the last one may be partial."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(docs))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(docs))
    for start in range(0, len(docs), batch_size):
        yield collate([docs[i] for i in order[start:start + batch_size]])


def split_dev(items: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    """Random train/dev split; the dev part gets ``round(fraction * n)`` items (at least 1)."""
    n = len(items)
    n_dev = max(1, int(round(fraction * n)))
    if n_dev >= n:
        raise ValueError(f"cannot split {n} items into train and a dev fraction of {fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    dev_idx = set(perm[:n_dev].tolist())
    train = [items[i] for i in range(n) if i not in dev_idx]
    dev = [items[i] for i in range(n) if i in dev_idx]
    return train, dev
