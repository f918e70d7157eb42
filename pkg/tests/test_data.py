import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leaplstm.data import (
    PAD_ID, UNK_ID, CorpusError, Document, build_vocab, collate, load_corpus,
    load_embeddings, make_batches, mask_probability, schedule_mask, split_dev, tokenize,
)


class TestTokenize:
    def test_sentence(self):
        assert tokenize("Treasury Prices fell.") == ["treasury", "prices", "fell", "."]

    def test_empty(self):
        assert tokenize("") == []

    def test_punctuation_rule(self):
        assert tokenize("U.S.-based") == ["u", ".", "s", ".", "-", "based"]

    @settings(max_examples=100, deadline=None)
    @given(st.text(max_size=60))
    def test_lowercase_idempotent(self, text):
        once = tokenize(text)
        assert tokenize(" ".join(once)) == once
        assert tokenize(text.lower()) == once


class TestVocab:
    def test_min_freq(self):
        v = build_vocab([["a", "a", "b"]], min_freq=2)
        assert v.itos[2:] == ["a"]
        assert v.id("a") == 2 and v.id("b") == UNK_ID

    def test_min_freq_one_keeps_all(self):
        v = build_vocab([["a", "b"], ["c", "a"]], min_freq=1)
        assert set(v.itos[2:]) == {"a", "b", "c"}

    def test_ties_follow_first_occurrence(self):
        corpus = [["q", "z", "y"], ["y", "z", "x", "x", "q", "m"], ["m"]]
        v = build_vocab(corpus, min_freq=1)
        # brute force: count, then order by (-count, first index)
        flat = [t for doc in corpus for t in doc]
        counts = Counter(flat)
        expected = sorted(counts, key=lambda t: (-counts[t], flat.index(t)))
        assert v.itos[2:] == expected

    def test_reserved_ids(self):
        v = build_vocab([["a"]], min_freq=1)
        assert v.itos[PAD_ID] == "<pad>" and v.itos[UNK_ID] == "<unk>"

    def test_empty_corpus(self):
        with pytest.raises(CorpusError):
            build_vocab([], min_freq=1)

    def test_round_trip(self):
        corpus = [tokenize("the cat sat on the mat"), tokenize("the dog")]
        v = build_vocab(corpus, min_freq=2)
        for doc in corpus:
            decoded = v.decode(v.encode(doc))
            assert all(d == t or d == "<unk>" for d, t in zip(decoded, doc))


class TestLoadCorpus:
    def test_format(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text('"3","title","body"\n')
        [ex] = load_corpus(p, num_classes=4)
        assert ex.label == 2 and ex.tokens == tokenize("title body")

    def test_class_out_of_range(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text('"1","ok"\n"5","bad"\n')
        with pytest.raises(CorpusError, match="row 2"):
            load_corpus(p, num_classes=4)

    def test_malformed_row(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text('"1","ok"\n"x","bad"\n')
        with pytest.raises(CorpusError, match="row 2"):
            load_corpus(p, num_classes=4)

    def test_row_count_matches_line_count(self, tmp_path):
        rng = np.random.default_rng(0)
        lines = [f'"{rng.integers(1, 5)}","Title {i}","Body, with punctuation. #{i}"' for i in range(57)]
        p = tmp_path / "ag.csv"
        p.write_text("\n".join(lines) + "\n")
        assert len(load_corpus(p, 4)) == len(p.read_text().splitlines())


class TestEmbeddings:
    def test_loader(self, tmp_path):
        v = build_vocab([["cat", "dog"]], min_freq=1)
        p = tmp_path / "e.txt"
        p.write_text("cat 0.1 0.2 0.3\nzebra 1 1 1\n")
        table = load_embeddings(p, v, 3, np.random.default_rng(0))
        np.testing.assert_array_equal(table[v.id("cat")], [0.1, 0.2, 0.3])
        dog = table[v.id("dog")]
        assert np.all(np.abs(dog) <= 0.05) and np.all(dog != 0)
        np.testing.assert_array_equal(table[PAD_ID], 0.0)

    def test_dimension_mismatch_names_token(self, tmp_path):
        v = build_vocab([["cat"]], min_freq=1)
        p = tmp_path / "e.txt"
        p.write_text("cat 0.1 0.2\n")
        with pytest.raises(CorpusError, match="'cat'"):
            load_embeddings(p, v, 3, np.random.default_rng(0))


class TestScheduleMask:
    def test_default_schedule(self):
        assert mask_probability(0, 0.45, 0.15) == pytest.approx(0.45)
        assert mask_probability(3, 0.45, 0.15) == 0.0
        assert [round(mask_probability(i, 0.45, 0.15), 10) for i in range(5)] == [0.45, 0.3, 0.15, 0.0, 0.0]

    def test_one_based_index(self):
        assert mask_probability(0, 0.45, 0.15, index_base=1) == pytest.approx(0.30)
        assert mask_probability(2, 0.45, 0.15, index_base=1) == 0.0

    def test_zero_probability_is_identity(self, rng):
        doc = Document(rng.integers(2, 50, size=30), 1)
        assert schedule_mask(doc, 3, 0.45, 0.15, rng) is doc

    def test_removal_rate(self):
        rng = np.random.default_rng(3)
        doc = Document(np.arange(2, 1002), 0)
        removed = total = 0
        for _ in range(100):
            out = schedule_mask(doc, 1, 0.45, 0.15, rng)  # p = 0.30
            removed += doc.length - out.length
            total += doc.length
        assert total >= 10**5
        assert abs(removed / total - 0.30) <= 0.02
        # within 3 binomial standard deviations
        assert abs(removed - 0.3 * total) <= 3 * math.sqrt(total * 0.3 * 0.7)

    def test_order_preserved(self, rng):
        doc = Document(np.arange(2, 200), 0)
        out = schedule_mask(doc, 0, 0.45, 0.15, rng)
        assert np.all(np.diff(out.tokens) > 0)

    def test_never_empty(self):
        rng = np.random.default_rng(0)
        doc = Document([5, 6, 7], 0)
        for _ in range(50):
            out = schedule_mask(doc, 0, 1.0, 0.0, rng)
            assert out.length == 1 and out.tokens[0] in (5, 6, 7)


class TestBatches:
    def docs(self, n, rng):
        return [Document(rng.integers(2, 20, size=rng.integers(1, 9)), int(rng.integers(3))) for n_ in range(n)]

    def test_partial_batch(self, rng):
        batches = list(make_batches(self.docs(10, rng), 32, shuffle_seed=0))
        assert len(batches) == 1 and batches[0].size == 10

    def test_same_seed_same_order(self, rng):
        docs = self.docs(50, rng)
        a = [b.ids.tobytes() for b in make_batches(docs, 8, shuffle_seed=4)]
        b = [b.ids.tobytes() for b in make_batches(docs, 8, shuffle_seed=4)]
        assert a == b

    def test_padding(self):
        batch = collate([Document([5, 6, 7], 0), Document([2, 3, 4, 5, 6], 1)])
        assert batch.ids.shape == (2, 5)
        np.testing.assert_array_equal(batch.ids[0, 3:], PAD_ID)
        np.testing.assert_array_equal(batch.mask, [[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])

    def test_bad_batch_size(self, rng):
        with pytest.raises(ValueError):
            list(make_batches(self.docs(3, rng), 0))


def test_split_dev_is_disjoint_and_seeded():
    items = list(range(100))
    tr, dv = split_dev(items, 0.1, seed=3)
    assert len(dv) == 10 and not set(tr) & set(dv) and sorted(tr + dv) == items
    assert split_dev(items, 0.1, seed=3) == (tr, dv)
