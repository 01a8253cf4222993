"""Test-time pipeline: retrieve knowledge, then generate action and response."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .corpus import NULL, Corpus, KnowledgeBase, Vocabulary, build_context, serialize_xi
from .errors import ConfigError, ParseError
from .evalmetrics import group_predictions
from .models import Theta, generator_condition, retrieve, split_generator_output
from .sampler import dialog_rng

MODES = ("greedy", "sampled")


@dataclass(frozen=True)
class TurnPrediction:
    retrieved_mask: tuple[int, ...]
    act: tuple[int, ...]
    response: tuple[int, ...]
    # no action/response boundary (or no EOS) within max_len
    truncated: bool = False


def respond(theta: Theta, context, user, kb: KnowledgeBase, threshold=0.5, mode="greedy",
            rng=None, max_len=64) -> TurnPrediction:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if mode == "sampled" and rng is None:
        raise ConfigError("sampled decoding needs an rng")
    mask = retrieve(theta, context, user, kb, threshold)
    cond = generator_condition(context, user, serialize_xi(mask, kb))
    gen = theta.generator
    out = gen.greedy(cond, max_len) if mode == "greedy" else gen.sample(cond, rng, max_len)
    act, response, truncated = split_generator_output(out)
    if not response:
        # keep the nonempty-response contract; scored as an empty answer
        response, truncated = (NULL,), True
    return TurnPrediction(mask, act, response, truncated)


def prediction_record(dialog_id, t, pred: TurnPrediction, vocab: Vocabulary) -> dict:
    return {
        "dialog_id": dialog_id,
        "turn": t,
        "mask": [i for i, bit in enumerate(pred.retrieved_mask) if bit],
        "act": " ".join(vocab.decode(pred.act)),
        "response": " ".join(vocab.decode(pred.response)),
        "truncated": pred.truncated,
    }


def run_corpus(theta: Theta, corpus: Corpus, threshold=0.5, mode="greedy", seed=0, max_len=64) -> list[dict]:
    """One record per turn; context is the gold history of earlier turns."""
    out = []
    for d in corpus:
        rng = dialog_rng(seed, d.id) if mode == "sampled" else None
        for t, turn in enumerate(d.turns, start=1):
            pred = respond(theta, build_context(d, t), turn.user, d.kb, threshold, mode, rng, max_len)
            out.append(prediction_record(d.id, t, pred, corpus.vocabulary))
    return out


def predicted_responses(records, corpus: Corpus):
    """Responses as token ids grouped per gold dialog (for direct scoring)."""
    vocab = corpus.vocabulary
    return group_predictions([dict(r, response=vocab.encode(r["response"])) for r in records], corpus)


def write_predictions(records, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_predictions(path) -> list[dict]:
    out = []
    with Path(path).open() as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["dialog_id"], rec["turn"], rec["response"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: bad prediction record ({exc})", line=i) from None
            out.append(rec)
    return out
