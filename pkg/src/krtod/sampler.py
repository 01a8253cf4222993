"""Turn-level Metropolis independence sampler over latent states
h_t = (knowledge mask, action), with a persistent per-turn cache.

The inference model proposes h'; the proposal replaces the cached state
with probability min(1, w(h') / w(h_cached)), where
w(h) = p_ret(xi | c, u) p_gen(a, r | c, u, xi) / q(xi, a | c, u, r).
All arithmetic is in log space.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .corpus import EOS, N_SPECIAL, Dialog, KnowledgeBase, build_context, parse_xi, serialize_xi
from .errors import ParseError, ShapeError
from .models import (
    Phi,
    Theta,
    generator_condition,
    generator_target,
    inference_condition,
    inference_target,
    split_inference_output,
    xi_log_prob,
)


@dataclass(frozen=True)
class LatentState:
    xi_mask: tuple[int, ...]
    act: tuple[int, ...]

    def __post_init__(self):
        if not self.act or self.act[-1] != EOS:
            raise ShapeError("act must end with EOS")


@dataclass(frozen=True)
class LatentConstraints:
    """Support of the latent action.

    Actions outside it get zero target mass, so proposals landing there are
    rejected like malformed knowledge fields. ``action_tokens=None`` admits
    every non-structural token.
    """

    max_act_len: int = 8
    action_tokens: frozenset | None = None
    max_len: int = 64
    init_tries: int = 20

    def allows(self, act) -> bool:
        body = act[:-1]
        if not 1 <= len(body) <= self.max_act_len:
            return False
        if self.action_tokens is None:
            return all(t >= N_SPECIAL for t in body)
        return all(t in self.action_tokens for t in body)


class LatentCache:
    """Cached chain state per (dialog id, turn), plus acceptance counters."""

    def __init__(self):
        self._states: dict[tuple[str, int], LatentState] = {}
        self.proposals = 0
        self.accepted = 0
        self.invalid = 0
        self._weights: dict = {}
        self._stamp = None

    def __len__(self):
        return len(self._states)

    def __contains__(self, key):
        return key in self._states

    def get(self, key):
        return self._states.get(key)

    def set(self, key, state: LatentState):
        self._states[key] = state

    def items(self):
        return self._states.items()

    def for_dialog(self, dialog_id: str) -> dict[int, LatentState]:
        return {t: s for (d, t), s in self._states.items() if d == dialog_id}

    def log_weight(self, stamp, key, h, compute) -> float:
        """Memoized ``compute()`` for (key, h); dropped whenever ``stamp`` changes."""
        if stamp != self._stamp:
            self._weights.clear()
            self._stamp = stamp
        k = (key, h)
        w = self._weights.get(k)
        if w is None:
            w = self._weights[k] = compute()
        return w

    def reset_counters(self):
        self.proposals = self.accepted = self.invalid = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else float("nan")


def dialog_rng(seed: int, dialog_id: str, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(dialog_id.encode()), epoch])


def param_stamp(theta: Theta, phi: Phi) -> tuple:
    """Version tokens of every model; changes after any update."""
    return theta.retriever.version, theta.generator.version, phi.inference.version


def joint_log_prob(theta: Theta, context, user, response, kb: KnowledgeBase, h: LatentState) -> float:
    """log p_ret(xi | c, u) + log p_gen(a, r | c, u, xi)."""
    xi_toks = serialize_xi(h.xi_mask, kb)
    lp = xi_log_prob(theta, context, user, h.xi_mask, kb)
    cond = generator_condition(context, user, xi_toks)
    return lp + theta.generator.log_prob(cond, generator_target(h.act, response))


def proposal_log_prob(phi: Phi, context, user, response, kb: KnowledgeBase, h: LatentState) -> float:
    cond = inference_condition(context, user, response)
    return phi.inference.log_prob(cond, inference_target(serialize_xi(h.xi_mask, kb), h.act))


def importance_log_ratio(theta, phi, context, user, response, kb, h: LatentState) -> float:
    if len(h.xi_mask) != len(kb):
        raise ShapeError("latent mask does not match the KB")
    return joint_log_prob(theta, context, user, response, kb, h) - proposal_log_prob(
        phi, context, user, response, kb, h)


def accept(log_w_new: float, log_w_old: float, eta: float) -> bool:
    """Metropolis independence rule: eta <= min(1, w_new / w_old)."""
    if log_w_old == -math.inf:
        return True
    log_eta = math.log(eta) if eta > 0 else -math.inf
    return log_eta <= min(0.0, log_w_new - log_w_old)


def parse_proposal(tokens, kb: KnowledgeBase, constraints: LatentConstraints) -> LatentState | None:
    """Map sampled inference-model output to a latent state, or None if off-support."""
    try:
        xi_toks, act = split_inference_output(tokens)
        mask = parse_xi(xi_toks, kb)
    except ParseError:
        return None
    if not constraints.allows(act):
        return None
    return LatentState(mask, act)


def fallback_state(phi: Phi, context, user, response, kb, constraints) -> LatentState:
    """Greedy inference-model output if it is on-support, else the empty state."""
    cond = inference_condition(context, user, response)
    h = parse_proposal(phi.inference.greedy(cond, constraints.max_len), kb, constraints)
    return h if h is not None else LatentState((0,) * len(kb), (EOS,))


def mis_step(theta: Theta, phi: Phi, dialog: Dialog, t: int, cache: LatentCache, rng,
             constraints: LatentConstraints | None = None, eta: float | None = None) -> LatentState:
    """One propose/accept-reject step for turn ``t`` (1-based) of ``dialog``."""
    constraints = constraints or LatentConstraints()
    turn = dialog.turns[t - 1]
    context = build_context(dialog, t)
    kb = dialog.kb
    key = (dialog.id, t)
    cond = inference_condition(context, turn.user, turn.response)
    cached = cache.get(key)

    if cached is None:
        # first visit: accept the first on-support proposal
        for _ in range(constraints.init_tries):
            cache.proposals += 1
            h = parse_proposal(phi.inference.sample(cond, rng, constraints.max_len), kb, constraints)
            if h is not None:
                cache.accepted += 1
                cache.set(key, h)
                return h
            cache.invalid += 1
        h = fallback_state(phi, context, turn.user, turn.response, kb, constraints)
        cache.set(key, h)
        return h

    cache.proposals += 1
    h_new = parse_proposal(phi.inference.sample(cond, rng, constraints.max_len), kb, constraints)
    if eta is None:
        eta = rng.random()
    if h_new is None:
        cache.invalid += 1
        return cached
    stamp = param_stamp(theta, phi)

    def log_w(h):
        return cache.log_weight(stamp, key, h, lambda: importance_log_ratio(
            theta, phi, context, turn.user, turn.response, kb, h))

    log_w_new, log_w_old = log_w(h_new), log_w(cached)
    if accept(log_w_new, log_w_old, eta):
        cache.accepted += 1
        cache.set(key, h_new)
        return h_new
    return cached


def sample_dialog_latents(theta: Theta, phi: Phi, dialog: Dialog, cache: LatentCache, rng,
                          constraints: LatentConstraints | None = None, steps: int = 1) -> list[LatentState]:
    """Sweep t = 1..T; contexts hold observed turns only, so turns are independent chains."""
    out = []
    for t in range(1, len(dialog.turns) + 1):
        h = None
        for _ in range(max(1, steps)):
            h = mis_step(theta, phi, dialog, t, cache, rng, constraints)
        out.append(h)
    return out
