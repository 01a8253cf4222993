"""Success rate, BLEU-4, the combined score and a paired permutation test."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, SlotValue
from .errors import ConfigError, DomainError, ShapeError

MAX_ORDER = 4


def combined(success: float, bleu4: float) -> float:
    return success + 2.0 * bleu4


def value_tokens(sv: SlotValue) -> tuple[int, ...]:
    return sv.tokens[len(sv.tokens) - len(sv.value.split()):]


def _contains(seq, sub) -> bool:
    seq, sub = tuple(seq), tuple(sub)
    n = len(sub)
    return any(seq[i:i + n] == sub for i in range(len(seq) - n + 1))


def requested_values(dialog) -> list[list[tuple[int, ...]]]:
    """Per turn, the value token sequences the response must mention."""
    if not dialog.labeled:
        raise DomainError(f"dialog {dialog.id}: gold labels are required for scoring")
    return [
        [value_tokens(sv) for bit, sv in zip(turn.gold_xi, dialog.kb.entries) if bit]
        for turn in dialog.turns
    ]


def dialog_success(responses, dialog) -> int:
    if len(responses) != len(dialog.turns):
        raise ShapeError(f"dialog {dialog.id}: {len(responses)} predictions for {len(dialog.turns)} turns")
    for resp, values in zip(responses, requested_values(dialog)):
        if not all(_contains(resp, v) for v in values):
            return 0
    return 1


def success_rate(predicted, gold: Corpus) -> tuple[float, list[int]]:
    """``predicted[i]`` lists the response token sequences of gold dialog ``i``."""
    if len(predicted) != len(gold):
        raise ShapeError(f"{len(predicted)} predicted dialogs for {len(gold)} gold dialogs")
    flags = [dialog_success(p, d) for p, d in zip(predicted, gold)]
    return (100.0 * sum(flags) / len(flags) if flags else 0.0), flags


def _ngrams(seq, n) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def ngram_stats(hypotheses, references):
    """Clipped match counts and hypothesis n-gram totals per order, plus lengths."""
    if len(hypotheses) != len(references):
        raise ShapeError("hypothesis and reference counts differ")
    match = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            match[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    return match, total, hyp_len, ref_len


def _brevity(hyp_len, ref_len) -> float:
    return min(1.0, math.exp(1.0 - ref_len / hyp_len))


def bleu4(hypotheses, references) -> float:
    """Corpus BLEU-4 in percent.

    An order with zero matches gets precision 1/(2 * hyp_len) when every lower
    order matched something; otherwise the score is 0.
    """
    if not len(hypotheses):
        raise DomainError("no hypotheses to score")
    match, total, hyp_len, ref_len = ngram_stats(hypotheses, references)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(MAX_ORDER):
        if match[n] > 0:
            log_p += math.log(match[n] / total[n])
        elif n > 0 and all(m > 0 for m in match[:n]):
            log_p += math.log(1.0 / (2.0 * hyp_len))
        else:
            return 0.0
    return 100.0 * _brevity(hyp_len, ref_len) * math.exp(log_p / MAX_ORDER)


def smoothed_bleu(hypotheses, references) -> float:
    """BLEU-4 with add-one smoothing at every order (for short, per-dialog scoring)."""
    match, total, hyp_len, ref_len = ngram_stats(hypotheses, references)
    if hyp_len == 0:
        return 0.0
    log_p = sum(math.log((m + 1) / (t + 1)) for m, t in zip(match, total))
    return 100.0 * _brevity(hyp_len, ref_len) * math.exp(log_p / MAX_ORDER)


def matched_pairs_test(scores_a, scores_b, permutations: int = 10000, seed: int = 0) -> float:
    """Two-sided paired sign-flip test on the mean difference.

    The identity assignment counts as one resample, so p >= 1 / (permutations + 1).
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("score lists must be aligned and one-dimensional")
    if permutations < 1000:
        raise ConfigError("use at least 1000 permutations")
    d = a - b
    n = len(d)
    if n == 0:
        return 1.0
    obs = abs(d.mean())
    tol = 1e-9 * max(1.0, obs)
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = max(1, min(permutations, 2_000_000 // max(n, 1)))
    left = permutations
    while left:
        k = min(chunk, left)
        signs = rng.integers(0, 2, size=(k, n), dtype=np.int8) * 2 - 1
        hits += int((np.abs(signs @ d) / n >= obs - tol).sum())
        left -= k
    return (1 + hits) / (permutations + 1)


@dataclass
class EvalReport:
    success: float
    bleu4: float
    combined: float
    per_dialog: list = field(default_factory=list)
    p_value: float | None = None

    def per_dialog_combined(self) -> list[float]:
        return [combined(100.0 * r["success"], r["bleu"]) for r in self.per_dialog]

    def display(self) -> dict:
        """Rounded headline numbers as reported in tables."""
        out = {
            "success": f"{self.success:.1f}",
            "bleu4": f"{self.bleu4:.3f}",
            "combined": f"{self.combined:.2f}",
        }
        if self.p_value is not None:
            out["p_value"] = f"{self.p_value:.4f}"
        return out

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "bleu4": self.bleu4,
            "combined": self.combined,
            "p_value": self.p_value,
            "display": self.display(),
            "per_dialog": self.per_dialog,
        }


def group_predictions(records, gold: Corpus) -> list[list[tuple[int, ...]]]:
    """Align prediction records ``{dialog_id, turn, response}`` to gold turns.

    ``response`` must already be token ids here.
    """
    table = {(r["dialog_id"], int(r["turn"])): r for r in records}
    if len(table) != len(records) or len(records) != gold.n_turns():
        raise ShapeError(f"{len(records)} prediction records for {gold.n_turns()} gold turns")
    out = []
    for d in gold:
        row = []
        for t in range(1, len(d.turns) + 1):
            rec = table.get((d.id, t))
            if rec is None:
                raise ShapeError(f"no prediction for dialog {d.id} turn {t}")
            row.append(tuple(rec["response"]))
        out.append(row)
    return out


def evaluate_responses(predicted, gold: Corpus) -> EvalReport:
    """Score per-dialog predicted responses (token ids) against a labeled corpus."""
    succ, flags = success_rate(predicted, gold)
    hyps = [r for p in predicted for r in p]
    refs = [t.response for d in gold for t in d.turns]
    b = bleu4(hyps, refs) if hyps else 0.0
    per = [
        {"dialog_id": d.id, "success": f, "bleu": smoothed_bleu(p, [t.response for t in d.turns])}
        for d, p, f in zip(gold, predicted, flags)
    ]
    return EvalReport(succ, b, combined(succ, b), per)


def evaluate(records, gold: Corpus) -> EvalReport:
    """Score prediction records whose ``response`` is a whitespace-joined string."""
    vocab = gold.vocabulary
    ids = [dict(r, response=vocab.encode(r["response"])) for r in records]
    return evaluate_responses(group_predictions(ids, gold), gold)


def compare(records_a, records_b, gold: Corpus, permutations=10000, seed=0):
    rep_a, rep_b = evaluate(records_a, gold), evaluate(records_b, gold)
    p = matched_pairs_test(rep_a.per_dialog_combined(), rep_b.per_dialog_combined(), permutations, seed)
    rep_a.p_value = rep_b.p_value = p
    return rep_a, rep_b, p
