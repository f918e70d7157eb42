"""Planted-keyword classification task for desk-scale experiments.

Each document is uniform noise over a shared word pool with one to three
positions overwritten by keywords of its class.  A reader that keeps only the
keywords loses nothing, so the task exposes whether skipping is selective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Document, TextExample, Vocabulary


@dataclass
class KeywordTask:
    train: list[Document]
    test: list[Document]
    keywords: dict[int, list[int]]
    vocab: Vocabulary

    @property
    def keyword_ids(self) -> set[int]:
        return {i for ids in self.keywords.values() for i in ids}

    def as_text(self, docs: list[Document]) -> list[TextExample]:
        return [TextExample(self.vocab.decode(d.tokens), d.label) for d in docs]


def make_keyword_task(n_train: int = 5000, n_test: int = 1000, vocab_size: int = 200,
                      length: int = 100, num_classes: int = 2, keywords_per_class: int = 5,
                      min_planted: int = 1, max_planted: int = 3, seed: int = 0) -> KeywordTask:
    rng = np.random.default_rng(seed)
    # ids 0 and 1 are PAD and UNK.
    pool = np.arange(2, vocab_size)
    chosen = rng.choice(pool, size=num_classes * keywords_per_class, replace=False)
    keywords = {c: sorted(int(i) for i in chosen[c * keywords_per_class:(c + 1) * keywords_per_class])
                for c in range(num_classes)}
    noise = np.setdiff1d(pool, chosen)

    def sample(n: int) -> list[Document]:
        docs = []
        for _ in range(n):
            label = int(rng.integers(num_classes))
            tokens = rng.choice(noise, size=length)
            k = int(rng.integers(min_planted, max_planted + 1))
            where = rng.choice(length, size=k, replace=False)
            tokens[where] = rng.choice(keywords[label], size=k)
            docs.append(Document(tokens, label))
        return docs

    itos = ["<pad>", "<unk>"]
    kw_of = {i: c for c, ids in keywords.items() for i in ids}
    for i in range(2, vocab_size):
        itos.append(f"key{kw_of[i]}_{i}" if i in kw_of else f"w{i}")
    train = sample(n_train)
    test = sample(n_test)
    return KeywordTask(train, test, keywords, Vocabulary(itos))
