from __future__ import annotations


import numpy as np
import pytest

from helpers import small_splits
from krtod.corpus import EOS, NULL, RSP, Corpus, Dialog, Turn, build_context, serialize_xi
from krtod.decode import TurnPrediction, read_predictions, respond, run_corpus, write_predictions
from krtod.errors import ConfigError, ParseError
from krtod.models import FeatureEncoder, Retriever, TabularSequenceModel, Theta, generator_condition
from krtod.trainer import TrainConfig, supervised_pretrain


def _forced_generator(vocab_size, condition, output):
    """Tabular generator that emits ``output`` with probability 1 given ``condition``."""
    enc = FeatureEncoder("tabular", dim=1, order=len(output) + 1)
    gen = TabularSequenceModel(vocab_size, enc)
    for l, tok in enumerate(output):
        row = np.full(vocab_size, -np.inf)
        row[tok] = 0.0
        gen.tables[enc.table_key(condition, output[:l])] = row
    gen.touch()
    return gen


@pytest.fixture(scope="module")
def splits():
    return small_splits(dialogs=40, seed=3, labeled_fraction=1.0)


@pytest.fixture(scope="module")
def theta(splits):
    cfg = TrainConfig(dim=1 << 12, pretrain_epochs=2, lr_generator=0.05, lr_inference=0.05, lr_retriever=0.1)
    return supervised_pretrain(splits["labeled"], cfg)[0]


class TestRespond:
    def _setup(self, splits, output, bias=-30.0):
        d = splits["test"].dialogs[0]
        ret = Retriever(FeatureEncoder("tabular", dim=1))
        ret.b = bias
        mask = (0,) * len(d.kb)
        cond = generator_condition((), d.turns[0].user, serialize_xi(mask, d.kb))
        gen = _forced_generator(len(splits["test"].vocabulary), cond, output)
        return Theta(ret, gen), d, mask

    def test_forced_output(self, splits):
        theta, d, mask = self._setup(splits, (20, 21, RSP, 30, 31, EOS))
        pred = respond(theta, (), d.turns[0].user, d.kb)
        assert pred == TurnPrediction(mask, (20, 21), (30, 31), False)

    def test_untrained_retriever_high_threshold(self, splits):
        d = splits["test"].dialogs[0]
        ret = Retriever(FeatureEncoder("tabular", dim=1))
        cond = generator_condition((), d.turns[0].user, (NULL,))
        gen = _forced_generator(len(splits["test"].vocabulary), cond, (20, RSP, 30, EOS))
        pred = respond(Theta(ret, gen), (), d.turns[0].user, d.kb, threshold=0.999)
        assert pred.retrieved_mask == (0,) * len(d.kb)
        assert pred.response == (30,)

    def test_truncation_without_boundary(self, splits):
        theta, d, _ = self._setup(splits, (20, 21, 22, 23))
        pred = respond(theta, (), d.turns[0].user, d.kb, max_len=4)
        assert pred.act == () and pred.response == (20, 21, 22, 23) and pred.truncated

    def test_empty_response_is_null(self, splits):
        theta, d, _ = self._setup(splits, (20, RSP, EOS))
        pred = respond(theta, (), d.turns[0].user, d.kb)
        assert pred.response == (NULL,) and pred.truncated

    def test_sampled_mode(self, splits, theta):
        d = splits["test"].dialogs[0]
        a = respond(theta, (), d.turns[0].user, d.kb, mode="sampled", rng=np.random.default_rng(1))
        b = respond(theta, (), d.turns[0].user, d.kb, mode="sampled", rng=np.random.default_rng(1))
        assert a == b and len(a.response) > 0

    def test_bad_arguments(self, splits, theta):
        d = splits["test"].dialogs[0]
        with pytest.raises(ConfigError):
            respond(theta, (), d.turns[0].user, d.kb, mode="beam")
        with pytest.raises(ConfigError):
            respond(theta, (), d.turns[0].user, d.kb, mode="sampled")
        with pytest.raises(ValueError):
            respond(theta, (), d.turns[0].user, d.kb, threshold=1.0)


class TestRunCorpus:
    def test_empty(self, splits, theta, tmp_path):
        recs = run_corpus(theta, Corpus((), splits["test"].vocabulary))
        assert recs == []
        write_predictions(recs, tmp_path / "p.jsonl")
        assert (tmp_path / "p.jsonl").read_text() == ""

    def test_one_record_per_turn(self, splits, theta):
        recs = run_corpus(theta, splits["test"])
        assert len(recs) == splits["test"].n_turns()
        keys = [(r["dialog_id"], r["turn"]) for r in recs]
        assert keys == [(d.id, t) for d in splits["test"] for t in range(1, len(d.turns) + 1)]
        assert set(recs[0]) == {"dialog_id", "turn", "mask", "act", "response", "truncated"}

    def test_greedy_byte_identical(self, splits, theta, tmp_path):
        write_predictions(run_corpus(theta, splits["test"]), tmp_path / "a.jsonl")
        write_predictions(run_corpus(theta, splits["test"]), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_sampled_reproducible_by_seed(self, splits, theta):
        a = run_corpus(theta, splits["test"], mode="sampled", seed=5)
        assert a == run_corpus(theta, splits["test"], mode="sampled", seed=5)

    def test_never_reads_current_gold_response(self, splits, theta):
        """Altering each dialog's final gold response must not change any prediction."""
        vocab = splits["test"].vocabulary
        filler = vocab.encode("thanks")
        altered = []
        for d in splits["test"]:
            last = d.turns[-1]
            turns = d.turns[:-1] + (Turn(last.user, filler, last.gold_xi, last.gold_act),)
            altered.append(Dialog(d.id, d.kb, turns, d.labeled))
        corpus = Corpus(tuple(altered), vocab)
        assert run_corpus(theta, corpus) == run_corpus(theta, splits["test"])

    def test_uses_gold_history(self, splits, theta):
        d = next(d for d in splits["test"] if len(d.turns) > 1)
        rec = run_corpus(theta, Corpus((d,), splits["test"].vocabulary))[1]
        pred = respond(theta, build_context(d, 2), d.turns[1].user, d.kb)
        assert rec["response"] == " ".join(splits["test"].vocabulary.decode(pred.response))


class TestPredictionFiles:
    def test_round_trip(self, splits, theta, tmp_path):
        recs = run_corpus(theta, splits["test"])
        write_predictions(recs, tmp_path / "p.jsonl")
        assert read_predictions(tmp_path / "p.jsonl") == recs

    def test_bad_line(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text('{"dialog_id": "a", "turn": 1, "response": "x"}\n{"dialog_id": "a"}\n')
        with pytest.raises(ParseError) as err:
            read_predictions(path)
        assert err.value.line == 2
