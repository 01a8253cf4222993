"""Brute-force latent enumeration, exact posteriors and marginals for tiny
instances, plus a tabular proposal that reproduces any given distribution
over latents exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .corpus import EOS, N_SPECIAL, Dialog, KnowledgeBase, Turn, Vocabulary, build_context, serialize_xi
from .errors import DegenerateDistributionError, SizeError
from .models import (
    FeatureEncoder,
    Phi,
    TabularSequenceModel,
    Theta,
    inference_condition,
    inference_target,
    init_models,
)
from .sampler import LatentCache, LatentConstraints, LatentState, joint_log_prob, mis_step

MAX_STATES = 10**6


def action_alphabet(vocab) -> tuple[int, ...]:
    """Action tokens: every non-structural id of a Vocabulary, or the ids given."""
    if isinstance(vocab, Vocabulary):
        return tuple(range(N_SPECIAL, len(vocab)))
    return tuple(sorted(set(int(t) for t in vocab)))


def space_size(n_entries: int, n_tokens: int, max_act_len: int) -> int:
    return 2**n_entries * sum(n_tokens**l for l in range(1, max_act_len + 1))


def enumerate_latents(kb: KnowledgeBase, vocab, max_act_len: int) -> list[LatentState]:
    """All (mask, action) pairs; masks in product order, actions by length then lexicographic."""
    alphabet = action_alphabet(vocab)
    size = space_size(len(kb), len(alphabet), max_act_len)
    if size > MAX_STATES:
        raise SizeError(f"latent space has {size} states (limit {MAX_STATES})")
    acts = [
        tuple(body) + (EOS,)
        for l in range(1, max_act_len + 1)
        for body in itertools.product(alphabet, repeat=l)
    ]
    return [
        LatentState(tuple(mask), act)
        for mask in itertools.product((0, 1), repeat=len(kb))
        for act in acts
    ]


def constraints_for(vocab, max_act_len: int) -> LatentConstraints:
    """Sampler support matching ``enumerate_latents``."""
    return LatentConstraints(max_act_len=max_act_len, action_tokens=frozenset(action_alphabet(vocab)))


def joint_log_probs(theta: Theta, context, user, response, kb, states) -> np.ndarray:
    return np.array([joint_log_prob(theta, context, user, response, kb, h) for h in states])


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    if not np.isfinite(m):
        return -math.inf
    return float(m + np.log(np.sum(np.exp(x - m))))


def exact_marginal(theta: Theta, context, user, response, kb, vocab, max_act_len: int) -> float:
    states = enumerate_latents(kb, vocab, max_act_len)
    lse = _logsumexp(joint_log_probs(theta, context, user, response, kb, states))
    if lse == -math.inf:
        raise DegenerateDistributionError("response has zero probability under every latent")
    return lse


def exact_posterior(theta: Theta, context, user, response, kb, vocab, max_act_len: int) -> dict:
    states = enumerate_latents(kb, vocab, max_act_len)
    lj = joint_log_probs(theta, context, user, response, kb, states)
    lse = _logsumexp(lj)
    if lse == -math.inf:
        raise DegenerateDistributionError("response has zero probability under every latent")
    p = np.exp(lj - lse)
    return dict(zip(states, p / p.sum()))


def tv_distance(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * float(sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys))


def proposal_from_distribution(dist: dict, condition, kb: KnowledgeBase, vocab_size: int,
                               leak: float = 0.0) -> Phi:
    """Tabular inference model whose sequence distribution given ``condition``
    equals ``dist`` over latent states.

    Rows are built on the prefix tree of the serialized targets, with -inf for
    unreachable continuations. ``leak`` moves that much mass to an immediate
    EOS, which parses as an invalid proposal.
    """
    targets = {inference_target(serialize_xi(h.xi_mask, kb), h.act): float(p) for h, p in dist.items()}
    order = max(len(t) for t in targets) + 1
    enc = FeatureEncoder("tabular", dim=1, seed=0, order=order)
    model = TabularSequenceModel(vocab_size, enc)

    mass: dict[tuple, np.ndarray] = {}
    for seq, p in targets.items():
        if p <= 0:
            continue
        for l in range(len(seq)):
            row = mass.setdefault(seq[:l], np.zeros(vocab_size))
            row[seq[l]] += p * (1.0 - leak)
    if leak > 0:
        mass.setdefault((), np.zeros(vocab_size))[EOS] += leak
    with np.errstate(divide="ignore"):
        for prefix, row in mass.items():
            if row.sum() <= 0:
                continue
            model.tables[enc.table_key(condition, prefix)] = np.log(row / row.sum())
    model.touch()
    return Phi(model)


# -- random tiny instances ---------------------------------------------------


@dataclass
class TinyInstance:
    theta: Theta
    dialog: Dialog
    vocab: Vocabulary
    actions: tuple[int, ...]
    max_act_len: int

    def turn_inputs(self, t: int):
        turn = self.dialog.turns[t - 1]
        return build_context(self.dialog, t), turn.user, turn.response, self.dialog.kb

    def posterior(self, t: int = 1) -> dict:
        c, u, r, kb = self.turn_inputs(t)
        return exact_posterior(self.theta, c, u, r, kb, self.actions, self.max_act_len)

    def marginal(self, t: int = 1) -> float:
        c, u, r, kb = self.turn_inputs(t)
        return exact_marginal(self.theta, c, u, r, kb, self.actions, self.max_act_len)

    def constraints(self) -> LatentConstraints:
        return constraints_for(self.actions, self.max_act_len)


def tiny_instance(rng, n_entries=2, n_actions=2, max_act_len=2, n_turns=1, order=2,
                  init_scale=1.0) -> TinyInstance:
    """Random tabular model and dialog whose latent space is small enough to enumerate."""
    words = [f"e{i}" for i in range(n_entries)] + [f"s{i}" for i in range(n_entries)]
    words += [f"v{i}" for i in range(n_entries)] + [f"a{j}" for j in range(n_actions)]
    words += ["x", "y", "z"]
    vocab = Vocabulary.from_words(words)
    kb = KnowledgeBase.from_triples([(f"e{i}", f"s{i}", f"v{i}") for i in range(n_entries)], vocab)
    pool = vocab.encode(["x", "y", "z"] + [f"v{i}" for i in range(n_entries)])
    turns = []
    for _ in range(n_turns):
        user = tuple(int(x) for x in rng.choice(pool, size=int(rng.integers(1, 3))))
        resp = tuple(int(x) for x in rng.choice(pool, size=int(rng.integers(1, 3))))
        turns.append(Turn(user, resp))
    dialog = Dialog(f"tiny{int(rng.integers(1 << 30))}", kb, tuple(turns), False)
    enc = FeatureEncoder("tabular", dim=1, seed=0, order=order)
    theta, _ = init_models(len(vocab), enc, init_scale, int(rng.integers(1 << 30)))
    actions = vocab.encode([f"a{j}" for j in range(n_actions)])
    return TinyInstance(theta, dialog, vocab, actions, max_act_len)


def mixture_proposal(post: dict, rng, weight: float = 0.5) -> dict:
    """``weight`` * posterior + (1 - weight) * a random Dirichlet draw."""
    alpha = rng.dirichlet(np.ones(len(post)))
    return {h: weight * p + (1.0 - weight) * a for (h, p), a in zip(post.items(), alpha)}


def run_chain(inst: TinyInstance, proposal: dict, steps: int, rng, t: int = 1):
    """Empirical state frequencies of ``steps`` MIS steps plus the acceptance rate.

    The first (initializing) visit is not counted.
    """
    c, u, r, kb = inst.turn_inputs(t)
    phi = proposal_from_distribution(proposal, inference_condition(c, u, r), kb, len(inst.vocab))
    cache = LatentCache()
    cons = inst.constraints()
    mis_step(inst.theta, phi, inst.dialog, t, cache, rng, cons)
    cache.reset_counters()
    counts: dict = {}
    for _ in range(steps):
        h = mis_step(inst.theta, phi, inst.dialog, t, cache, rng, cons)
        counts[h] = counts.get(h, 0) + 1
    return {h: n / steps for h, n in counts.items()}, cache.acceptance_rate


def chain_report(inst: TinyInstance, steps: int, rng, weight: float = 0.5) -> list[dict]:
    """Per turn: latent-space size, TV to the exact posterior, acceptance rates."""
    out = []
    for t in range(1, len(inst.dialog.turns) + 1):
        post = inst.posterior(t)
        emp, acc = run_chain(inst, mixture_proposal(post, rng, weight), steps, rng, t)
        _, acc_exact = run_chain(inst, post, min(steps, 1000), rng, t)
        out.append({"turn": t, "states": len(post), "steps": steps, "tv": tv_distance(emp, post),
                    "acceptance": acc, "acceptance_exact_proposal": acc_exact})
    return out
