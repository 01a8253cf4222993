"""Per-entry knowledge retriever: an independent sigmoid head per KB entry."""

from __future__ import annotations

import copy
import zlib

import numpy as np

from ..errors import ConfigError, NumericError, ShapeError
from .encoder import FeatureEncoder
from .sequence import VERSIONS, scatter_add


def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def sigmoid(z):
    return np.exp(log_sigmoid(z))


class RetrieverGrad:
    def __init__(self):
        self.chunks: list[tuple[np.ndarray, np.ndarray]] = []
        self.table: dict[tuple, float] = {}
        self.b = 0.0

    def is_empty(self):
        return not self.chunks and not self.table and self.b == 0.0

    def is_finite(self):
        ok = np.isfinite(self.b) and all(np.isfinite(v) for v in self.table.values())
        return ok and all(np.all(np.isfinite(v)) for _, v in self.chunks)

    def clear(self):
        self.chunks.clear()
        self.table.clear()
        self.b = 0.0

    def dense_W(self, dim) -> np.ndarray:
        out = np.zeros(dim)
        for idx, vals in self.chunks:
            np.add.at(out, idx, vals)
        return out


class Retriever:
    """p(sv_i relevant | c, u) = sigmoid(W . x_i + b), x_i = encoder(c + u + sv_i).

    Tabular backend: x_i is the one-hot of the input's last ``order`` tokens,
    so ``W`` is a table keyed by that tail.
    """

    def __init__(self, encoder: FeatureEncoder, init_scale=0.0, seed=0):
        self.encoder = encoder
        self.init_scale = init_scale
        self.seed = seed
        self.version = next(VERSIONS)
        self.b = 0.0
        if encoder.tabular:
            self.table: dict[tuple, float] = {}
            self._lazy: dict[tuple, float] = {}
            self.W = None
        else:
            rng = np.random.default_rng(seed)
            self.W = init_scale * rng.standard_normal(encoder.dim) if init_scale > 0 else np.zeros(encoder.dim)

    def _weight(self, key) -> float:
        if key in self.table:
            return self.table[key]
        if self.init_scale > 0:
            w = self._lazy.get(key)
            if w is None:
                s = zlib.crc32(np.asarray(key, dtype=np.int64).tobytes(), self.seed & 0xFFFFFFFF)
                w = self._lazy[key] = float(self.init_scale * np.random.default_rng(s).standard_normal())
            return w
        return 0.0

    def logits(self, context, user, entries) -> np.ndarray:
        if self.encoder.tabular:
            keys = [self.encoder.retrieval_key(context, user, sv) for sv in entries]
            return np.array([self._weight(k) for k in keys], dtype=float) + self.b
        ent, idx, val = self.encoder.retrieval_features(context, user, entries)
        out = np.bincount(ent, weights=self.W[idx] * val, minlength=len(entries)) if len(ent) else np.zeros(len(entries))
        return out + self.b

    def probs(self, context, user, entries) -> np.ndarray:
        return sigmoid(self.logits(context, user, entries))

    def mask_log_prob(self, context, user, mask, entries) -> float:
        if len(mask) != len(entries):
            raise ShapeError(f"mask length {len(mask)} != KB size {len(entries)}")
        if not len(entries):
            return 0.0
        z = self.logits(context, user, entries)
        m = np.asarray(mask, dtype=bool)
        return float(log_sigmoid(z[m]).sum() + log_sigmoid(-z[~m]).sum())

    def accumulate(self, context, user, mask, entries, grad: RetrieverGrad, scale=1.0) -> float:
        if len(mask) != len(entries):
            raise ShapeError(f"mask length {len(mask)} != KB size {len(entries)}")
        if not len(entries):
            return 0.0
        z = self.logits(context, user, entries)
        m = np.asarray(mask, dtype=float)
        dz = (m - sigmoid(z)) * scale
        if self.encoder.tabular:
            for sv, d in zip(entries, dz):
                key = self.encoder.retrieval_key(context, user, sv)
                grad.table[key] = grad.table.get(key, 0.0) + float(d)
        else:
            ent, idx, val = self.encoder.retrieval_features(context, user, entries)
            grad.chunks.append((idx, dz[ent] * val))
        grad.b += float(dz.sum())
        mb = m.astype(bool)
        return float(log_sigmoid(z[mb]).sum() + log_sigmoid(-z[~mb]).sum())

    def new_grad(self):
        return RetrieverGrad()

    def apply_update(self, grad: RetrieverGrad, lr: float) -> None:
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not grad.is_finite():
            grad.clear()
            raise NumericError("non-finite gradient; update aborted")
        if self.encoder.tabular:
            for key, d in grad.table.items():
                self.table[key] = self._weight(key) + lr * d
        elif grad.chunks:
            idx = np.concatenate([i for i, _ in grad.chunks])
            vals = np.concatenate([v for _, v in grad.chunks])
            scatter_add(self.W, idx, vals, lr)
        self.b += lr * grad.b
        self.version = next(VERSIONS)
        grad.clear()

    def touch(self) -> None:
        """Mark parameters as changed after editing them in place."""
        self.version = next(VERSIONS)

    def copy(self):
        return copy.deepcopy(self)
