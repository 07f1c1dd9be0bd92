"""BLEU and ROUGE-L sanity values and oracle equivalence."""

import math

import numpy as np
import pytest

from rapsg.metrics import bleu, rouge_l, score_corpus

from oracles import bleu_oracle, rouge_oracle

VOCAB = ["man", "dog", "bus", "kite", "park", "red", "big", "rides",
         "the", "a", "on", "street", "tree", "ball", "runs"]


def _sentence(rng, max_len=15):
    length = int(rng.integers(1, max_len + 1))
    return " ".join(VOCAB[int(rng.integers(0, len(VOCAB)))] for _ in range(length))


class TestBleu:
    def test_perfect_match(self):
        candidates = ["a man rides the bus downtown", "a big red kite in the park"]
        scores = bleu(candidates, [[c] for c in candidates])
        assert scores == (1.0, 1.0, 1.0, 1.0)

    def test_zero_overlap(self):
        scores = bleu(["a dog runs fast"], [["purple quantum flux"]])
        assert scores == (0.0, 0.0, 0.0, 0.0)

    def test_clipping_classic_case(self):
        # Candidate repeats one matching unigram: clipped 1/3 precision.
        scores = bleu(["the the the"], [["the cat"]])
        assert scores[0] == pytest.approx(1 / 3, rel=1e-12)

    def test_brevity_penalty(self):
        # candidate 2 tokens, reference 3: BP = exp(1 - 3/2), p1 = p2 = 1.
        scores = bleu(["a dog"], [["a dog runs"]])
        assert scores[0] == pytest.approx(math.exp(-0.5), rel=1e-12)
        assert scores[1] == pytest.approx(math.exp(-0.5), rel=1e-12)

    def test_closest_reference_length_ties_to_shorter(self):
        # candidate length 3; refs of lengths 2 and 4 tie on |delta| = 1.
        scores = bleu(["a dog runs"], [["a dog", "a dog runs fast"]])
        assert scores[0] == pytest.approx(1.0)  # c=3 >= r=2, no penalty

    def test_random_corpora_match_oracle(self):
        rng = np.random.default_rng(40)
        for _ in range(50):
            n = int(rng.integers(1, 6))
            candidates = [_sentence(rng) for _ in range(n)]
            references = [
                [_sentence(rng) for _ in range(int(rng.integers(1, 3)))]
                for _ in range(n)
            ]
            got = bleu(candidates, references)
            want = bleu_oracle(candidates, references)
            for g, w in zip(got, want):
                assert g == pytest.approx(w, rel=1e-9, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bleu(["a"], [["a"], ["b"]])

    def test_empty_reference_list(self):
        with pytest.raises(ValueError):
            bleu(["a"], [[]])


class TestRougeL:
    def test_identical(self):
        assert rouge_l(["a man rides the bus"], [["a man rides the bus"]]) == 1.0

    def test_disjoint(self):
        assert rouge_l(["a dog"], [["purple flux"]]) == 0.0

    def test_hand_computed_subsequence(self):
        # LCS("a dog runs", "a big dog") = 2; P = 2/3, R = 2/3.
        got = rouge_l(["a dog runs"], [["a big dog"]])
        p = r = 2 / 3
        expected = (1 + 1.2) * p * r / (r + 1.2 * p)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_best_reference_wins(self):
        got = rouge_l(["a dog runs"], [["zebra", "a dog runs"]])
        assert got == 1.0

    def test_random_corpora_match_oracle(self):
        rng = np.random.default_rng(41)
        for _ in range(50):
            n = int(rng.integers(1, 6))
            candidates = [_sentence(rng) for _ in range(n)]
            references = [
                [_sentence(rng) for _ in range(int(rng.integers(1, 3)))]
                for _ in range(n)
            ]
            got = rouge_l(candidates, references)
            want = rouge_oracle(candidates, references)
            assert got == pytest.approx(want, rel=1e-9, abs=1e-12)


class TestScoreCorpus:
    def test_bundles_everything(self):
        corpus = ["a man rides the bus", "a dog in the park"]
        score = score_corpus(corpus, [[c] for c in corpus])
        assert score.bleu == (1.0, 1.0, 1.0, 1.0)
        assert score.rouge_l == 1.0
        assert score.sentence_count == 2

    def test_pure_and_deterministic(self):
        rng = np.random.default_rng(42)
        candidates = [_sentence(rng) for _ in range(10)]
        references = [[_sentence(rng)] for _ in range(10)]
        assert score_corpus(candidates, references) == score_corpus(
            candidates, references
        )
