"""Retriever, generator and inference models.

Function-style entry points mirror the model operations; the classes in the
submodules carry the parameters.
"""

from __future__ import annotations

import numpy as np

from ..corpus import KnowledgeBase, SlotValue
from .encoder import FeatureEncoder
from .params import (
    Phi,
    Theta,
    generator_condition,
    generator_target,
    inference_condition,
    inference_target,
    init_models,
    load_checkpoint,
    save_checkpoint,
    split_generator_output,
    split_inference_output,
)
from .retriever import Retriever, RetrieverGrad, sigmoid
from .sequence import (
    HashedSequenceModel,
    RowGrad,
    SequenceModel,
    TableGrad,
    TabularSequenceModel,
    log_softmax,
    make_sequence_model,
)


def _entries(kb):
    return kb.entry_tokens if isinstance(kb, KnowledgeBase) else tuple(kb)


def retrieval_prob(theta: Theta, context, user, sv) -> float:
    tokens = sv.tokens if isinstance(sv, SlotValue) else tuple(sv)
    return float(theta.retriever.probs(context, user, [tokens])[0])


def xi_log_prob(theta: Theta, context, user, mask, kb) -> float:
    return theta.retriever.mask_log_prob(context, user, mask, _entries(kb))


def retrieve(theta: Theta, context, user, kb, threshold: float = 0.5) -> tuple[int, ...]:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    entries = _entries(kb)
    if not entries:
        return ()
    p = theta.retriever.probs(context, user, entries)
    return tuple(int(x) for x in p >= threshold)


def seq_log_prob(params: SequenceModel, condition, target) -> float:
    return params.log_prob(condition, target)


def seq_sample(params: SequenceModel, condition, rng: np.random.Generator, max_len: int):
    return params.sample(condition, rng, max_len)


def greedy_decode(params: SequenceModel, condition, max_len: int):
    return params.greedy(condition, max_len)


def retriever_grad(theta: Theta, context, user, mask, kb, grad=None, scale=1.0):
    grad = grad if grad is not None else theta.retriever.new_grad()
    theta.retriever.accumulate(context, user, mask, _entries(kb), grad, scale)
    return grad


def seq_grad(params: SequenceModel, condition, target, grad=None, scale=1.0):
    grad = grad if grad is not None else params.new_grad()
    params.accumulate(condition, target, grad, scale)
    return grad


def apply_update(params, grad, learning_rate: float) -> None:
    params.apply_update(grad, learning_rate)


__all__ = [
    "FeatureEncoder", "Retriever", "RetrieverGrad", "SequenceModel", "TabularSequenceModel",
    "HashedSequenceModel", "TableGrad", "RowGrad", "Theta", "Phi", "init_models",
    "make_sequence_model", "log_softmax", "sigmoid",
    "generator_condition", "generator_target", "inference_condition", "inference_target",
    "split_generator_output", "split_inference_output", "save_checkpoint", "load_checkpoint",
    "retrieval_prob", "xi_log_prob", "retrieve", "seq_log_prob", "seq_sample", "greedy_decode",
    "retriever_grad", "seq_grad", "apply_update",
]
