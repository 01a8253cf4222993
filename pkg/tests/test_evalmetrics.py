from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krtod.corpus import EOS, Corpus, CorpusConfig, Dialog, KnowledgeBase, Turn, Vocabulary, generate_synthetic_corpus
from krtod.errors import ConfigError, DomainError, ShapeError
from krtod.evalmetrics import (
    EvalReport,
    bleu4,
    combined,
    compare,
    evaluate,
    matched_pairs_test,
    smoothed_bleu,
    success_rate,
)

WORDS = "the cat is on mat sat a dog runs fast today".split()
W = {w: i + 20 for i, w in enumerate(WORDS)}


def _ids(text):
    return tuple(W[w] for w in text.split())


def _three_dialogs():
    vocab = Vocabulary.from_words(["p0", "p1", "price", "fee", "x1", "x2", "is", "and"])
    kb = KnowledgeBase.from_triples([("p0", "price", "x1"), ("p1", "fee", "x2")], vocab)
    act = vocab.encode("price") + (EOS,)
    both = Turn(vocab.encode("price"), vocab.encode("p0 price is x1 and p1 fee is x2"), (1, 1), act)
    one = Turn(vocab.encode("price"), vocab.encode("p0 price is x1"), (1, 0), act)
    dialogs = tuple(Dialog(f"d{i}", kb, (both, one), True) for i in range(3))
    return Corpus(dialogs, vocab), vocab


class TestCombined:
    def test_paper_rows(self):
        assert round(combined(31.5, 4.170), 2) == pytest.approx(39.84, abs=1e-9)
        assert round(combined(91.8, 9.677), 2) == pytest.approx(111.15, abs=1e-9)
        assert combined(91.8, 9.677) == pytest.approx(111.154, abs=1e-9)

    def test_zero(self):
        assert combined(0, 0) == 0

    @given(st.floats(0, 100), st.floats(0, 100))
    def test_linear(self, s, b):
        assert combined(s, b) - combined(s, 0) == pytest.approx(2 * b, abs=1e-9)


class TestSuccess:
    def test_gold_responses(self):
        c = generate_synthetic_corpus(CorpusConfig(dialogs=50, labeled_fraction=1.0), seed=2)
        rate, flags = success_rate([[t.response for t in d.turns] for d in c], c)
        assert rate == 100.0 and all(flags)

    def test_empty_predictions(self):
        c = generate_synthetic_corpus(CorpusConfig(dialogs=50, labeled_fraction=1.0, chat_rate=0.0), seed=2)
        rate, _ = success_rate([[() for _ in d.turns] for d in c], c)
        assert rate == 0.0

    def test_hand_fixture_two_of_three(self):
        corpus, vocab = _three_dialogs()
        preds = [[t.response for t in d.turns] for d in corpus]
        # dialog 1 drops the second requested value in turn 1
        preds[1][0] = vocab.encode("p0 price is x1")
        rate, flags = success_rate(preds, corpus)
        assert flags == [1, 0, 1]
        assert rate == pytest.approx(66.67, abs=0.01)

    def test_value_must_be_contiguous(self):
        corpus, vocab = _three_dialogs()
        preds = [[t.response for t in d.turns] for d in corpus]
        preds[0][1] = vocab.encode("p0 price is")
        assert success_rate(preds, corpus)[1][0] == 0

    def test_monotone(self):
        corpus, vocab = _three_dialogs()
        preds = [[t.response for t in d.turns] for d in corpus]
        preds[2][0] = vocab.encode("p0 price is x1")
        before, _ = success_rate(preds, corpus)
        preds[2][0] = preds[2][0] + vocab.encode("and p1 fee is x2")
        after, _ = success_rate(preds, corpus)
        assert after >= before

    def test_misaligned(self):
        corpus, _ = _three_dialogs()
        with pytest.raises(ShapeError):
            success_rate([[()]] * 3, corpus)
        with pytest.raises(ShapeError):
            success_rate([], corpus)


class TestBleu:
    def test_identical(self):
        refs = [_ids("the cat is on the mat"), _ids("a dog runs fast today")]
        assert bleu4(refs, refs) == pytest.approx(100.0, abs=1e-9)

    def test_disjoint(self):
        assert bleu4([_ids("the cat is on")], [_ids("a dog runs fast")]) == 0.0

    def test_two_sentence_fixture(self):
        hyps = [_ids("the cat is on the mat"), _ids("a dog runs fast today")]
        refs = [_ids("the cat sat on the mat"), _ids("a dog runs fast")]
        # clipped precisions 9/11, 6/9, 3/7, 1/5; hyp_len 11 > ref_len 10 so BP = 1
        expected = 100.0 * (9 / 11 * 6 / 9 * 3 / 7 * 1 / 5) ** 0.25
        assert bleu4(hyps, refs) == pytest.approx(expected, abs=1e-6)

    def test_brevity_and_smoothing(self):
        # precisions 1, 1, 1 and no 4-gram at all: 1/(2 * 3) substitutes; BP = exp(1 - 4/3)
        expected = 100.0 * math.exp(1 - 4 / 3) * (1 / 6) ** 0.25
        assert bleu4([_ids("a dog runs")], [_ids("a dog runs fast")]) == pytest.approx(expected, abs=1e-9)

    def test_no_smoothing_after_zero_lower_order(self):
        # bigram precision 0 forces 0 even though unigrams match
        assert bleu4([_ids("cat the")], [_ids("the cat")]) == 0.0

    def test_empty_set(self):
        with pytest.raises(DomainError):
            bleu4([], [])

    def test_count_mismatch(self):
        with pytest.raises(ShapeError):
            bleu4([_ids("a")], [])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.lists(st.integers(0, 6), min_size=1, max_size=8),
                              st.lists(st.integers(0, 6), min_size=1, max_size=8)), min_size=1, max_size=5),
           st.randoms(use_true_random=False))
    def test_pair_order_and_relabeling(self, pairs, rnd):
        hyps = [tuple(h) for h, _ in pairs]
        refs = [tuple(r) for _, r in pairs]
        base = bleu4(hyps, refs)
        order = list(range(len(pairs)))
        rnd.shuffle(order)
        assert bleu4([hyps[i] for i in order], [refs[i] for i in order]) == pytest.approx(base, abs=1e-9)
        relabel = list(range(100, 107))
        rnd.shuffle(relabel)
        mapped = [tuple(relabel[t] for t in s) for s in hyps], [tuple(relabel[t] for t in s) for s in refs]
        assert bleu4(*mapped) == pytest.approx(base, abs=1e-9)

    def test_smoothed_positive_on_partial_match(self):
        assert 0 < smoothed_bleu([_ids("cat the")], [_ids("the cat")]) < 100


class TestMatchedPairs:
    def test_identical(self):
        a = np.linspace(0, 100, 200)
        assert matched_pairs_test(a, a, 10000, seed=1) == 1.0

    def test_uniform_shift(self):
        rng = np.random.default_rng(0)
        b = rng.uniform(0, 200, size=200)
        p = matched_pairs_test(b + 10, b, 10000, seed=1)
        assert p <= 0.001
        assert p == pytest.approx(1 / 10001)

    def test_null_calibration(self):
        rng = np.random.default_rng(5)
        rejections = 0
        trials = 1000
        for k in range(trials):
            x = rng.normal(size=(2, 40))
            rejections += matched_pairs_test(x[0], x[1], 1000, seed=k) <= 0.05
        assert abs(rejections / trials - 0.05) <= 0.02

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 30))
        assert matched_pairs_test(a, b, 2000, 4) == matched_pairs_test(b, a, 2000, 4)

    def test_validation(self):
        with pytest.raises(ShapeError):
            matched_pairs_test([1, 2], [1], 1000)
        with pytest.raises(ConfigError):
            matched_pairs_test([1, 2], [1, 2], 999)


class TestReports:
    def _records(self, corpus, vocab, drop=None):
        recs = []
        for i, d in enumerate(corpus):
            for t, turn in enumerate(d.turns, start=1):
                resp = turn.response if (i, t) != drop else vocab.encode("p0 price is x1")
                recs.append({"dialog_id": d.id, "turn": t, "response": " ".join(vocab.decode(resp))})
        return recs

    def test_invariants(self):
        corpus, vocab = _three_dialogs()
        rep = evaluate(self._records(corpus, vocab, drop=(1, 1)), corpus)
        assert rep.combined == rep.success + 2 * rep.bleu4
        assert rep.success == pytest.approx(100 * np.mean([r["success"] for r in rep.per_dialog]))
        assert len(rep.per_dialog_combined()) == 3

    def test_display(self):
        rep = EvalReport(91.8, 9.6774, combined(91.8, 9.6774), p_value=0.01234)
        assert rep.display() == {"success": "91.8", "bleu4": "9.677", "combined": "111.15", "p_value": "0.0123"}

    def test_missing_record(self):
        corpus, vocab = _three_dialogs()
        with pytest.raises(ShapeError):
            evaluate(self._records(corpus, vocab)[:-1], corpus)

    def test_compare_identical(self):
        corpus, vocab = _three_dialogs()
        recs = self._records(corpus, vocab)
        a, b, p = compare(recs, recs, corpus, 1000, 0)
        assert p == 1.0 and a.p_value == 1.0
        assert a.to_dict()["combined"] == b.to_dict()["combined"]
