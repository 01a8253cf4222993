"""Parameter containers, sequence layouts for each model, and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..corpus import ACT, EOS, KB, RSP, USR
from ..errors import ParseError
from .encoder import FeatureEncoder
from .retriever import Retriever
from .sequence import SequenceModel, TabularSequenceModel, make_sequence_model


@dataclass
class Theta:
    retriever: Retriever
    generator: SequenceModel

    def copy(self) -> "Theta":
        return Theta(self.retriever.copy(), self.generator.copy())


@dataclass
class Phi:
    inference: SequenceModel

    def copy(self) -> "Phi":
        return Phi(self.inference.copy())


def init_models(vocab_size: int, encoder: FeatureEncoder, init_scale=0.0, seed=0) -> tuple[Theta, Phi]:
    theta = Theta(
        Retriever(encoder, init_scale, seed),
        make_sequence_model(vocab_size, encoder, init_scale, seed + 1),
    )
    phi = Phi(make_sequence_model(vocab_size, encoder, init_scale, seed + 2))
    return theta, phi


# -- sequence layouts ------------------------------------------------------


def _content(act):
    act = tuple(act)
    return act[:-1] if act and act[-1] == EOS else act


def generator_condition(context, user, xi_tokens) -> tuple[int, ...]:
    return tuple(context) + (USR,) + tuple(user) + (KB,) + tuple(xi_tokens)


def generator_target(act, response) -> tuple[int, ...]:
    return _content(act) + (RSP,) + tuple(response) + (EOS,)


def inference_condition(context, user, response) -> tuple[int, ...]:
    return tuple(context) + (USR,) + tuple(user) + (RSP,) + tuple(response)


def inference_target(xi_tokens, act) -> tuple[int, ...]:
    return tuple(xi_tokens) + (ACT,) + _content(act) + (EOS,)


def split_generator_output(tokens):
    """Split decoder output into ``(act, response, truncated)``.

    ``act`` carries no EOS. Without a boundary token the whole output is the
    response and the act is empty.
    """
    tokens = tuple(tokens)
    truncated = not tokens or tokens[-1] != EOS
    body = tokens if truncated else tokens[:-1]
    if RSP not in body:
        return (), body, True
    cut = body.index(RSP)
    return body[:cut], body[cut + 1:], truncated


def split_inference_output(tokens):
    """Split an inference-model sample into ``(xi_tokens, act)``; act ends with EOS."""
    tokens = tuple(tokens)
    if not tokens or tokens[-1] != EOS:
        raise ParseError("proposal was truncated before EOS")
    if ACT not in tokens:
        raise ParseError("proposal has no action boundary")
    cut = tokens.index(ACT)
    return tokens[:cut], tokens[cut + 1:]


# -- checkpoints -----------------------------------------------------------


def _pack_seq(prefix, model, out):
    if isinstance(model, TabularSequenceModel):
        keys = list(model.tables)
        width = 2 * model.encoder.order
        out[prefix + "keys"] = np.array(keys, dtype=np.int64).reshape(len(keys), width)
        out[prefix + "rows"] = np.array([model.tables[k] for k in keys]).reshape(len(keys), model.vocab_size)
    else:
        out[prefix + "W"] = model.W
        out[prefix + "U"] = model.U


def _unpack_seq(prefix, model, data):
    if isinstance(model, TabularSequenceModel):
        for k, r in zip(data[prefix + "keys"], data[prefix + "rows"]):
            model.tables[tuple(int(x) for x in k)] = r.copy()
    else:
        model.W = data[prefix + "W"].copy()
        model.U = data[prefix + "U"].copy()


def save_checkpoint(path, theta: Theta, phi: Phi, vocab_digest: str = "", extra: dict | None = None) -> None:
    enc = theta.generator.encoder
    header = {
        "backend": enc.backend,
        "dim": enc.dim,
        "order": enc.order,
        "seed": enc.seed,
        "vocab_size": theta.generator.vocab_size,
        "vocab_hash": vocab_digest,
        "init": [
            [m.init_scale, m.seed] for m in (theta.retriever, theta.generator, phi.inference)
        ] if enc.tabular else [],
        "extra": extra or {},
    }
    arrays = {"header": np.array(json.dumps(header)), "ret_b": np.array(theta.retriever.b)}
    if enc.tabular:
        keys = list(theta.retriever.table)
        arrays["ret_keys"] = np.array(keys, dtype=np.int64).reshape(len(keys), enc.order)
        arrays["ret_vals"] = np.array([theta.retriever.table[k] for k in keys], dtype=float)
    else:
        arrays["ret_W"] = theta.retriever.W
    _pack_seq("gen_", theta.generator, arrays)
    _pack_seq("inf_", phi.inference, arrays)
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Theta, Phi, dict]:
    with np.load(path, allow_pickle=False) as data:
        try:
            header = json.loads(str(data["header"]))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"{path}: bad checkpoint header") from exc
        enc = FeatureEncoder(header["backend"], header["dim"], header["seed"], header["order"])
        theta, phi = init_models(header["vocab_size"], enc)
        for m, (scale, seed) in zip((theta.retriever, theta.generator, phi.inference), header["init"]):
            m.init_scale, m.seed = scale, seed
        theta.retriever.b = float(data["ret_b"])
        if enc.tabular:
            for k, v in zip(data["ret_keys"], data["ret_vals"]):
                theta.retriever.table[tuple(int(x) for x in k)] = float(v)
        else:
            theta.retriever.W = data["ret_W"].copy()
        _unpack_seq("gen_", theta.generator, data)
        _unpack_seq("inf_", phi.inference, data)
    for m in (theta.retriever, theta.generator, phi.inference):
        m.touch()
    return theta, phi, header
