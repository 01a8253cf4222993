"""Supervised pretraining, JSA semi-supervised training and the
pseudo-labeling baseline, with ratio-controlled mixing of labeled and
unlabeled dialogs.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .corpus import Corpus, Dialog, build_context, serialize_xi
from .decode import predicted_responses, run_corpus
from .errors import ConfigError, DomainError
from .evalmetrics import evaluate_responses, matched_pairs_test
from .kvconfig import coerce, read_kv, write_kv
from .models import (
    FeatureEncoder,
    Phi,
    Theta,
    generator_condition,
    generator_target,
    inference_condition,
    inference_target,
    init_models,
)
from .sampler import (
    LatentCache,
    LatentConstraints,
    LatentState,
    dialog_rng,
    fallback_state,
    parse_proposal,
    sample_dialog_latents,
)

METHODS = ("supervised", "jsa", "pl")
DEFAULT_LR = {"tabular": 0.1, "hashed": 0.01}


def parse_ratio(text) -> tuple[int, int]:
    if isinstance(text, tuple):
        return text
    try:
        u, l = (int(x) for x in str(text).split(":"))
    except ValueError:
        raise ConfigError(f"ratio must look like U:L, got {text!r}") from None
    if u < 0 or l < 1:
        raise ConfigError("ratio needs U >= 0 and L >= 1")
    return u, l


@dataclass
class TrainConfig:
    # None means the backend default
    lr_retriever: float | None = None
    lr_generator: float | None = None
    lr_inference: float | None = None
    pretrain_epochs: int = 10
    semi_epochs: int = 10
    batch_size: int = 1
    ratio: tuple[int, int] = (9, 1)
    threshold: float = 0.5
    seed: int = 0
    method: str = "jsa"
    backend: str = "hashed"
    dim: int = 1 << 16
    order: int = 2
    init_scale: float = 0.0
    max_act_len: int = 8
    max_len: int = 64
    mis_steps: int = 1
    # epochs without dev improvement before stopping; 0 disables
    patience: int = 0
    dev_limit: int = 0

    def __post_init__(self):
        self.ratio = parse_ratio(self.ratio)
        base = DEFAULT_LR.get(self.backend)
        if base is None:
            raise ConfigError(f"unknown backend {self.backend!r}")
        for name in ("lr_retriever", "lr_generator", "lr_inference"):
            if getattr(self, name) is None:
                setattr(self, name, base)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if min(self.lr_retriever, self.lr_generator, self.lr_inference) < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.pretrain_epochs < 0 or self.semi_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.max_act_len < 1 or self.max_len < 2 or self.mis_steps < 1:
            raise ConfigError("max_act_len, max_len and mis_steps must be positive")

    def encoder(self) -> FeatureEncoder:
        return FeatureEncoder(self.backend, self.dim, self.seed, self.order)

    def constraints(self) -> LatentConstraints:
        return LatentConstraints(max_act_len=self.max_act_len, max_len=self.max_len)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = f"{self.ratio[0]}:{self.ratio[1]}"
        return d

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        raw = read_kv(path)
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in raw.items():
            if k == "ratio":
                kwargs[k] = parse_ratio(v)
            elif k.startswith("lr_"):
                kwargs[k] = coerce(v, 0.0)
            else:
                kwargs[k] = coerce(v, getattr(cls, k))
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    def to_file(self, path) -> None:
        write_kv(path, self.to_dict())


@dataclass
class ObjectiveAccumulators:
    J_theta: float = 0.0
    J_phi: float = 0.0

    def add(self, jt, jp):
        self.J_theta += jt
        self.J_phi += jp


@dataclass
class TrainLog:
    """Per-epoch records; ``echo`` receives a formatted line per epoch."""

    records: list = field(default_factory=list)
    echo: object = None
    latents: dict = field(default_factory=dict)
    keep_latents: bool = False

    def epoch(self, rec: dict) -> None:
        self.records.append(rec)
        if self.echo is not None:
            self.echo(" ".join(f"{k}={_fmt(v)}" for k, v in rec.items()))


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# -- data mixing -------------------------------------------------------------


def mix_batches(labeled_ids, unlabeled_ids, ratio, rng) -> list:
    """One epoch's dialog-id stream: groups of U unlabeled ids then L labeled ids.

    The unlabeled pool is passed once in shuffled order; labeled ids are drawn
    as successive shuffles of their pool, as many as the ratio requires.
    """
    u, l = parse_ratio(ratio)
    labeled_ids, unlabeled_ids = list(labeled_ids), list(unlabeled_ids)
    if not labeled_ids:
        raise ConfigError("the labeled pool is empty")
    if u == 0:
        return [labeled_ids[i] for i in rng.permutation(len(labeled_ids))]
    if not unlabeled_ids:
        raise ConfigError(f"ratio {u}:{l} needs unlabeled dialogs but the pool is empty")
    unl = [unlabeled_ids[i] for i in rng.permutation(len(unlabeled_ids))]
    n_groups = math.ceil(len(unl) / u)
    need = n_groups * l
    lab: list = []
    while len(lab) < need:
        lab += [labeled_ids[i] for i in rng.permutation(len(labeled_ids))]
    out = []
    for g in range(n_groups):
        out += unl[g * u:(g + 1) * u]
        out += lab[g * l:(g + 1) * l]
    return out


# -- per-dialog gradients ------------------------------------------------------


def gold_latents(dialog: Dialog) -> list[LatentState]:
    if not dialog.labeled:
        raise DomainError(f"dialog {dialog.id} has no gold labels")
    return [LatentState(t.gold_xi, t.gold_act) for t in dialog.turns]


@dataclass
class GradBuffers:
    retriever: object
    generator: object
    inference: object

    @classmethod
    def new(cls, theta: Theta, phi: Phi) -> "GradBuffers":
        return cls(theta.retriever.new_grad(), theta.generator.new_grad(), phi.inference.new_grad())


def accumulate_dialog(theta: Theta, phi: Phi, dialog: Dialog, latents, grads: GradBuffers,
                      update_retriever: bool, scale=1.0) -> tuple[float, float]:
    """Add the completed-data log-likelihood gradients of one dialog.

    Returns the dialog's contributions to (J_theta, J_phi).
    """
    jt = jp = 0.0
    entries = dialog.kb.entry_tokens
    for t, (turn, h) in enumerate(zip(dialog.turns, latents), start=1):
        c = build_context(dialog, t)
        xi = serialize_xi(h.xi_mask, dialog.kb)
        if update_retriever:
            jt += theta.retriever.accumulate(c, turn.user, h.xi_mask, entries, grads.retriever, scale)
        jt += theta.generator.accumulate(
            generator_condition(c, turn.user, xi), generator_target(h.act, turn.response), grads.generator, scale)
        jp += phi.inference.accumulate(
            inference_condition(c, turn.user, turn.response), inference_target(xi, h.act), grads.inference, scale)
    return jt, jp


def apply_grads(theta: Theta, phi: Phi, grads: GradBuffers, config: TrainConfig, n: int) -> None:
    """Apply accumulated gradients averaged over ``n`` dialogs; empty buffers are skipped."""
    for model, grad, lr in (
        (theta.retriever, grads.retriever, config.lr_retriever),
        (theta.generator, grads.generator, config.lr_generator),
        (phi.inference, grads.inference, config.lr_inference),
    ):
        if lr > 0 and not grad.is_empty():
            model.apply_update(grad, lr / n)
        else:
            grad.clear()


def objectives(theta: Theta, phi: Phi, corpus: Corpus) -> ObjectiveAccumulators:
    """J_theta and J_phi of a labeled corpus under frozen parameters."""
    acc = ObjectiveAccumulators()
    grads = GradBuffers.new(theta, phi)
    for d in corpus:
        acc.add(*accumulate_dialog(theta, phi, d, gold_latents(d), grads, True))
        grads.retriever.clear()
        grads.generator.clear()
        grads.inference.clear()
    return acc


def pseudo_labels(phi: Phi, dialog: Dialog, constraints: LatentConstraints) -> list[LatentState]:
    out = []
    for t, turn in enumerate(dialog.turns, start=1):
        c = build_context(dialog, t)
        cond = inference_condition(c, turn.user, turn.response)
        h = parse_proposal(phi.inference.greedy(cond, constraints.max_len), dialog.kb, constraints)
        out.append(h if h is not None else fallback_state(phi, c, turn.user, turn.response, dialog.kb, constraints))
    return out


# -- evaluation hook -----------------------------------------------------------


def dev_report(theta: Theta, dev: Corpus, config: TrainConfig):
    if config.dev_limit and len(dev) > config.dev_limit:
        dev = Corpus(dev.dialogs[:config.dev_limit], dev.vocabulary)
    recs = run_corpus(theta, dev, config.threshold, "greedy", max_len=config.max_len)
    return evaluate_responses(predicted_responses(recs, dev), dev)


# -- training loops ------------------------------------------------------------


def _run(labeled: Corpus, unlabeled: Corpus | None, config: TrainConfig, theta: Theta, phi: Phi,
         epochs: int, method: str, dev: Corpus | None, log: TrainLog | None, phase: str):
    lab = labeled.by_id()
    unl = unlabeled.by_id() if unlabeled is not None and method != "supervised" else {}
    if not lab:
        raise ConfigError("training needs at least one labeled dialog")
    ratio = config.ratio if unl else (0, config.ratio[1])
    stream_rng = np.random.default_rng(config.seed)
    constraints = config.constraints()
    cache = LatentCache()
    grads = GradBuffers.new(theta, phi)

    best, best_score, stale = None, -math.inf, 0
    if dev is not None and phase != "pretrain":
        rep = dev_report(theta, dev, config)
        best, best_score = (theta.copy(), phi.copy()), rep.combined
        if log is not None:
            log.epoch({"phase": phase, "epoch": 0, "dev_success": rep.success,
                       "dev_bleu4": rep.bleu4, "dev_combined": rep.combined})

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        stream = mix_batches(list(lab), list(unl), ratio, stream_rng)
        acc = ObjectiveAccumulators()
        cache.reset_counters()
        for start in range(0, len(stream), config.batch_size):
            batch = stream[start:start + config.batch_size]
            for did in batch:
                if did in lab:
                    d, latents, ret = lab[did], gold_latents(lab[did]), True
                else:
                    d, ret = unl[did], False
                    if method == "jsa":
                        latents = sample_dialog_latents(theta, phi, d, cache, dialog_rng(config.seed, did, epoch),
                                                        constraints, config.mis_steps)
                    else:
                        latents = pseudo_labels(phi, d, constraints)
                    if log is not None and log.keep_latents:
                        log.latents[did] = latents
                acc.add(*accumulate_dialog(theta, phi, d, latents, grads, ret))
            apply_grads(theta, phi, grads, config, len(batch))

        rec = {"phase": phase, "epoch": epoch, "J_theta": acc.J_theta, "J_phi": acc.J_phi}
        if method == "jsa" and unl:
            rec["acceptance"] = cache.acceptance_rate
        if dev is not None:
            rep = dev_report(theta, dev, config)
            rec.update(dev_success=rep.success, dev_bleu4=rep.bleu4, dev_combined=rep.combined)
            if rep.combined > best_score:
                best, best_score, stale = (theta.copy(), phi.copy()), rep.combined, 0
            else:
                stale += 1
        rec["seconds"] = time.perf_counter() - t0
        if log is not None:
            log.epoch(rec)
        if dev is not None and config.patience and stale >= config.patience:
            break

    if best is not None:
        return best
    return theta, phi


def new_models(vocab_size: int, config: TrainConfig) -> tuple[Theta, Phi]:
    return init_models(vocab_size, config.encoder(), config.init_scale, config.seed)


def supervised_pretrain(labeled: Corpus, config: TrainConfig, dev: Corpus | None = None,
                        init: tuple[Theta, Phi] | None = None, log: TrainLog | None = None,
                        epochs: int | None = None) -> tuple[Theta, Phi]:
    """Maximize the gold-latent log-likelihood of all three models.

    ``init`` continues from existing parameters (copied, never mutated).
    """
    if not len(labeled):
        raise ConfigError("supervised training needs a nonempty labeled corpus")
    if any(not d.labeled for d in labeled):
        raise DomainError("supervised training got unlabeled dialogs")
    theta, phi = (init[0].copy(), init[1].copy()) if init else new_models(len(labeled.vocabulary), config)
    n = config.pretrain_epochs if epochs is None else epochs
    return _run(labeled, None, config, theta, phi, n, "supervised", dev, log, "pretrain")


def _semi(labeled, unlabeled, config, pretrained, dev, log, method):
    if pretrained is None:
        raise ConfigError(f"{method} training starts from pretrained parameters")
    if not len(labeled):
        raise ConfigError("semi-supervised training needs labeled dialogs")
    theta, phi = pretrained[0].copy(), pretrained[1].copy()
    unl = Corpus(tuple(d.unlabeled() for d in unlabeled), unlabeled.vocabulary) if unlabeled is not None else None
    return _run(labeled, unl, config, theta, phi, config.semi_epochs, method, dev, log, method)


def jsa_train(labeled: Corpus, unlabeled: Corpus | None, config: TrainConfig, pretrained,
              dev: Corpus | None = None, log: TrainLog | None = None) -> tuple[Theta, Phi]:
    """Semi-supervised training with MIS-sampled latents on unlabeled dialogs."""
    return _semi(labeled, unlabeled, config, pretrained, dev, log, "jsa")


def pl_train(labeled: Corpus, unlabeled: Corpus | None, config: TrainConfig, pretrained,
             dev: Corpus | None = None, log: TrainLog | None = None) -> tuple[Theta, Phi]:
    """Self-training with greedy inference-model pseudo-labels."""
    return _semi(labeled, unlabeled, config, pretrained, dev, log, "pl")


def train(method: str, labeled, unlabeled, config: TrainConfig, dev=None, log=None, pretrained=None):
    """Pretrain (unless given) and, for semi-supervised methods, continue."""
    if pretrained is None:
        pretrained = supervised_pretrain(labeled, config, dev, log=log)
    if method == "supervised":
        return pretrained
    fn = jsa_train if method == "jsa" else pl_train
    return fn(labeled, unlabeled, config, pretrained, dev, log)


# -- method comparison ---------------------------------------------------------


def score(theta: Theta, corpus: Corpus, config: TrainConfig):
    recs = run_corpus(theta, corpus, config.threshold, "greedy", max_len=config.max_len)
    return evaluate_responses(predicted_responses(recs, corpus), corpus)


def sweep(labeled: Corpus, unlabeled: Corpus, test: Corpus, config: TrainConfig,
          ratios=((1, 1), (2, 1), (4, 1), (9, 1)), pretrained=None, dev=None,
          permutations=10000, log: TrainLog | None = None) -> list[dict]:
    """JSA and PL rows per unlabeled:labeled ratio with a paired p-value on Combined.

    For ratio R:1 the first R * |labeled| unlabeled dialogs are used.
    """
    if pretrained is None:
        pretrained = supervised_pretrain(labeled, config, dev, log=log)
    rows = []
    for u, l in ratios:
        n = min(len(unlabeled), (u * len(labeled)) // l)
        pool = Corpus(unlabeled.dialogs[:n], unlabeled.vocabulary)
        cfg = replace(config, ratio=(u, l))
        reps = {}
        for method, fn in (("jsa", jsa_train), ("pl", pl_train)):
            theta, _ = fn(labeled, pool, cfg, pretrained, dev, log)
            reps[method] = score(theta, test, cfg)
        p = matched_pairs_test(reps["jsa"].per_dialog_combined(), reps["pl"].per_dialog_combined(),
                               permutations, config.seed)
        for method, rep in reps.items():
            rows.append({"method": method, "ratio": f"{u}:{l}", "unlabeled": n, "success": rep.success,
                         "bleu4": rep.bleu4, "combined": rep.combined, "p_value": p})
    return rows
