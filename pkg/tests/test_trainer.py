from __future__ import annotations

import numpy as np
import pytest

from helpers import small_splits
from krtod.corpus import Corpus, build_context, serialize_xi
from krtod.decode import run_corpus
from krtod.errors import ConfigError, DomainError
from krtod.models import generator_condition, generator_target, inference_condition, inference_target
from krtod.oracle import proposal_from_distribution, tiny_instance
from krtod.sampler import LatentCache, sample_dialog_latents
from krtod.trainer import (
    GradBuffers,
    TrainConfig,
    TrainLog,
    accumulate_dialog,
    gold_latents,
    jsa_train,
    mix_batches,
    new_models,
    objectives,
    parse_ratio,
    pl_train,
    pseudo_labels,
    supervised_pretrain,
    sweep,
    train,
)

FAST = dict(dim=1 << 12, pretrain_epochs=2, semi_epochs=1, lr_generator=0.05, lr_inference=0.05,
            lr_retriever=0.1)


def _arrays(theta, phi):
    out = {"ret_W": theta.retriever.W.copy(), "ret_b": np.array(theta.retriever.b)}
    for name, m in (("gen", theta.generator), ("inf", phi.inference)):
        for k, v in m.named_arrays().items():
            out[f"{name}_{k}"] = v.copy()
    return out


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def splits():
    return small_splits(dialogs=60, seed=1, labeled_fraction=0.5)


@pytest.fixture(scope="module")
def pretrained(splits):
    return supervised_pretrain(splits["labeled"], TrainConfig(**FAST))


class TestRatio:
    def test_parse(self):
        assert parse_ratio("9:1") == (9, 1)
        assert parse_ratio((2, 1)) == (2, 1)

    @pytest.mark.parametrize("bad", ["9", "a:b", "1:0", "-1:1"])
    def test_bad(self, bad):
        with pytest.raises(ConfigError):
            parse_ratio(bad)


class TestMixBatches:
    def test_supervised_is_permutation(self):
        lab = [f"l{i}" for i in range(30)]
        out = mix_batches(lab, [], (0, 1), np.random.default_rng(0))
        assert sorted(out) == sorted(lab) and out != lab

    def test_two_to_one_full_pools(self):
        lab = [f"l{i}" for i in range(100)]
        unl = [f"u{i}" for i in range(200)]
        out = mix_batches(lab, unl, (2, 1), np.random.default_rng(0))
        assert len(out) == 300 and len(set(out)) == 300
        pattern = ["u" if x[0] == "u" else "l" for x in out]
        assert pattern == ["u", "u", "l"] * 100

    def test_labeled_repeats_when_needed(self):
        lab = [f"l{i}" for i in range(10)]
        unl = [f"u{i}" for i in range(90)]
        out = mix_batches(lab, unl, (9, 1), np.random.default_rng(0))
        assert len(out) == 100
        assert sorted(x for x in out if x[0] == "u") == sorted(unl)
        out = mix_batches(lab, unl, (1, 1), np.random.default_rng(0))
        counts = {x: out.count(x) for x in lab}
        assert set(counts.values()) == {9}

    def test_deterministic(self):
        lab, unl = list("abc"), list("uvwxyz")
        a = mix_batches(lab, unl, (2, 1), np.random.default_rng(4))
        assert a == mix_batches(lab, unl, (2, 1), np.random.default_rng(4))

    def test_empty_pools(self):
        with pytest.raises(ConfigError):
            mix_batches(["a"], [], (2, 1), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            mix_batches([], ["u"], (2, 1), np.random.default_rng(0))


class TestConfig:
    def test_backend_defaults(self):
        assert TrainConfig().lr_generator == 0.01
        assert TrainConfig(backend="tabular").lr_retriever == 0.1
        assert TrainConfig(lr_generator=0.3).lr_generator == 0.3

    @pytest.mark.parametrize("kw", [{"method": "em"}, {"threshold": 1.0}, {"batch_size": 0},
                                    {"lr_generator": -1.0}, {"backend": "dense"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_file_round_trip(self, tmp_path):
        cfg = TrainConfig(ratio="4:1", lr_retriever=0.2, seed=3, semi_epochs=2)
        cfg.to_file(tmp_path / "t.cfg")
        assert TrainConfig.from_file(tmp_path / "t.cfg") == cfg
        assert TrainConfig.from_file(tmp_path / "t.cfg", seed=9).seed == 9

    def test_unknown_key(self, tmp_path):
        (tmp_path / "t.cfg").write_text("semi_epochs = 1\nmomentum = 0.9\n")
        with pytest.raises(ConfigError):
            TrainConfig.from_file(tmp_path / "t.cfg")


class TestSupervised:
    def test_zero_rate_keeps_parameters(self, splits):
        cfg = TrainConfig(**{**FAST, "lr_generator": 0.0, "lr_inference": 0.0, "lr_retriever": 0.0})
        start = _arrays(*new_models(len(splits["labeled"].vocabulary), cfg))
        assert _same(_arrays(*supervised_pretrain(splits["labeled"], cfg)), start)

    def test_objective_non_decreasing(self, splits):
        cfg = TrainConfig(**{**FAST, "lr_generator": 0.01, "lr_inference": 0.01, "lr_retriever": 0.01})
        lab = Corpus(splits["labeled"].dialogs[:10], splits["labeled"].vocabulary)
        models = supervised_pretrain(lab, cfg, epochs=0)
        prev = objectives(*models, lab)
        for _ in range(4):
            models = supervised_pretrain(lab, cfg, init=models, epochs=1)
            cur = objectives(*models, lab)
            assert cur.J_theta >= prev.J_theta and cur.J_phi >= prev.J_phi
            prev = cur

    def test_objectives_equal_model_log_probs(self, splits, pretrained):
        theta, phi = pretrained
        lab = Corpus(splits["labeled"].dialogs[:5], splits["labeled"].vocabulary)
        jt = jp = 0.0
        for d in lab:
            for t, turn in enumerate(d.turns, start=1):
                c = build_context(d, t)
                xi = serialize_xi(turn.gold_xi, d.kb)
                jt += theta.retriever.mask_log_prob(c, turn.user, turn.gold_xi, d.kb.entry_tokens)
                jt += theta.generator.log_prob(generator_condition(c, turn.user, xi),
                                               generator_target(turn.gold_act, turn.response))
                jp += phi.inference.log_prob(inference_condition(c, turn.user, turn.response),
                                             inference_target(xi, turn.gold_act))
        acc = objectives(theta, phi, lab)
        assert acc.J_theta == pytest.approx(jt, abs=1e-9) and acc.J_phi == pytest.approx(jp, abs=1e-9)
        again = objectives(theta, phi, lab)
        assert (again.J_theta, again.J_phi) == (acc.J_theta, acc.J_phi)

    def test_retrieval_f1_on_held_out(self):
        sp = small_splits(dialogs=200, seed=2, labeled_fraction=1.0)
        cfg = TrainConfig(**{**FAST, "pretrain_epochs": 5})
        theta, _ = supervised_pretrain(sp["labeled"], cfg)
        recs = run_corpus(theta, sp["test"], cfg.threshold)
        tp = fp = fn = 0
        gold = [t.gold_xi for d in sp["test"] for t in d.turns]
        for rec, g in zip(recs, gold):
            pred = set(rec["mask"])
            true = {i for i, b in enumerate(g) if b}
            tp += len(pred & true)
            fp += len(pred - true)
            fn += len(true - pred)
        assert 2 * tp / (2 * tp + fp + fn) >= 0.95

    def test_rejects_bad_input(self, splits):
        with pytest.raises(ConfigError):
            supervised_pretrain(Corpus((), splits["labeled"].vocabulary), TrainConfig(**FAST))
        with pytest.raises(DomainError):
            supervised_pretrain(splits["unlabeled"], TrainConfig(**FAST))


class TestSemiSupervised:
    def test_no_unlabeled_matches_supervised_continuation(self, splits, pretrained):
        cfg = TrainConfig(**FAST)
        a = jsa_train(splits["labeled"], None, cfg, pretrained)
        b = supervised_pretrain(splits["labeled"], cfg, init=pretrained, epochs=cfg.semi_epochs)
        assert _same(_arrays(*a), _arrays(*b))

    def test_pretrained_not_mutated(self, splits, pretrained):
        before = _arrays(*pretrained)
        jsa_train(splits["labeled"], splits["unlabeled"], TrainConfig(**FAST), pretrained)
        assert _same(_arrays(*pretrained), before)

    def test_zero_rates_still_sample(self, splits, pretrained):
        cfg = TrainConfig(**{**FAST, "lr_generator": 0.0, "lr_inference": 0.0, "lr_retriever": 0.0})
        log = TrainLog(keep_latents=True)
        out = jsa_train(splits["labeled"], splits["unlabeled"], cfg, pretrained, log=log)
        assert _same(_arrays(*out), _arrays(*pretrained))
        assert set(log.latents) == {d.id for d in splits["unlabeled"]}
        assert 0.0 <= log.records[-1]["acceptance"] <= 1.0

    def test_retriever_frozen_on_unlabeled_steps(self, splits, pretrained, monkeypatch):
        import krtod.trainer as tr

        last = {}
        checked = []
        real_acc, real_apply = tr.accumulate_dialog, tr.apply_grads

        def acc(theta, phi, dialog, latents, grads, update_retriever, scale=1.0):
            last["labeled"] = dialog.labeled
            return real_acc(theta, phi, dialog, latents, grads, update_retriever, scale)

        def apply(theta, phi, grads, config, n):
            w, b = theta.retriever.W.copy(), theta.retriever.b
            g = theta.generator.W.copy()
            real_apply(theta, phi, grads, config, n)
            if not last["labeled"]:
                assert np.array_equal(theta.retriever.W, w) and theta.retriever.b == b
                checked.append(not np.array_equal(theta.generator.W, g))

        monkeypatch.setattr(tr, "accumulate_dialog", acc)
        monkeypatch.setattr(tr, "apply_grads", apply)
        for fn in (jsa_train, pl_train):
            fn(splits["labeled"], splits["unlabeled"], TrainConfig(**FAST), pretrained)
        assert checked and all(checked)

    def test_labeled_gradients_identical_across_methods(self, splits, pretrained):
        d = splits["labeled"].dialogs[0]
        theta, phi = pretrained
        g1, g2 = GradBuffers.new(theta, phi), GradBuffers.new(theta, phi)
        accumulate_dialog(theta, phi, d, gold_latents(d), g1, True)
        accumulate_dialog(theta, phi, d, gold_latents(d), g2, True)
        assert g1.generator.dense(theta.generator.W.shape).tolist() == g2.generator.dense(theta.generator.W.shape).tolist()

    def test_deterministic_proposal_pl_equals_jsa(self):
        rng = np.random.default_rng(3)
        inst = tiny_instance(rng, n_entries=2, n_actions=2, max_act_len=2)
        c, u, r, kb = inst.turn_inputs(1)
        h = next(iter(inst.posterior()))
        phi = proposal_from_distribution({h: 1.0}, inference_condition(c, u, r), kb, len(inst.vocab))
        cons = inst.constraints()
        jsa = sample_dialog_latents(inst.theta, phi, inst.dialog, LatentCache(), rng, cons)
        assert jsa == pseudo_labels(phi, inst.dialog, cons) == [h]

    def test_requires_pretrained(self, splits):
        with pytest.raises(ConfigError):
            jsa_train(splits["labeled"], splits["unlabeled"], TrainConfig(**FAST), None)

    def test_reproducible(self, splits, pretrained):
        cfg = TrainConfig(**FAST)
        a = jsa_train(splits["labeled"], splits["unlabeled"], cfg, pretrained)
        b = jsa_train(splits["labeled"], splits["unlabeled"], cfg, pretrained)
        assert _same(_arrays(*a), _arrays(*b))

    def test_epoch_log_lines(self, splits, pretrained):
        lines = []
        log = TrainLog(echo=lines.append)
        train("jsa", splits["labeled"], splits["unlabeled"], TrainConfig(**FAST), splits["dev"], log, pretrained)
        last = lines[-1]
        for key in ("epoch=", "J_theta=", "J_phi=", "dev_success=", "dev_bleu4=", "dev_combined=", "acceptance="):
            assert key in last


class TestSweep:
    def test_rows(self, splits, pretrained):
        rows = sweep(splits["labeled"], splits["unlabeled"], splits["test"], TrainConfig(**FAST),
                     ratios=[(1, 1), (9, 1)], pretrained=pretrained, permutations=1000)
        assert [(r["method"], r["ratio"]) for r in rows] == [("jsa", "1:1"), ("pl", "1:1"), ("jsa", "9:1"), ("pl", "9:1")]
        for r in rows:
            assert 0 < r["p_value"] <= 1
            assert r["combined"] == pytest.approx(r["success"] + 2 * r["bleu4"])
        assert rows[0]["p_value"] == rows[1]["p_value"]
        assert rows[0]["unlabeled"] == len(splits["labeled"])
