"""Autoregressive token models used for the response generator and the
inference model.

Both backends define a softmax over the full vocabulary at every state,
so the probabilities of all EOS-terminated sequences plus the mass still
running at any length cutoff sum to one.
"""

from __future__ import annotations

import copy
import itertools
import zlib

import numpy as np

from ..corpus import ACT, EOS, RSP
from ..errors import ConfigError, DomainError, NumericError
from .encoder import FeatureEncoder


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


# process-wide parameter version tokens; equal tokens imply equal parameters
VERSIONS = itertools.count(1)


def scatter_add(mat: np.ndarray, idx: np.ndarray, rows: np.ndarray, scale: float) -> None:
    """``mat[idx] += scale * rows`` with repeated indices summed (sort + reduceat)."""
    if not len(idx):
        return
    order = np.argsort(idx, kind="stable")
    idx = idx[order]
    first = np.flatnonzero(np.concatenate(([True], idx[1:] != idx[:-1])))
    mat[idx[first]] += scale * np.add.reduceat(rows[order], first, axis=0)


def _key_seed(key, seed) -> int:
    return zlib.crc32(np.asarray(key, dtype=np.int64).tobytes(), seed & 0xFFFFFFFF)


class TableGrad:
    """Gradient buffer keyed like a tabular model's rows."""

    def __init__(self):
        self.rows: dict[tuple, np.ndarray] = {}

    def add(self, key, vec):
        if key in self.rows:
            self.rows[key] += vec
        else:
            self.rows[key] = np.array(vec, dtype=float)

    def is_empty(self):
        return not self.rows

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.rows.values())

    def clear(self):
        self.rows.clear()


class RowGrad:
    """Sparse row-update buffers for the dense weight matrices of a hashed model."""

    def __init__(self):
        self.chunks: list[tuple[np.ndarray, np.ndarray]] = []
        self.copy_chunks: list[tuple[np.ndarray, np.ndarray]] = []

    def add(self, idx, rows):
        self.chunks.append((idx, rows))

    def add_copy(self, idx, rows):
        self.copy_chunks.append((idx, rows))

    def is_empty(self):
        return not self.chunks and not self.copy_chunks

    def is_finite(self):
        return all(np.all(np.isfinite(r)) for _, r in self.chunks + self.copy_chunks)

    def clear(self):
        self.chunks.clear()
        self.copy_chunks.clear()

    @staticmethod
    def _dense(chunks, shape):
        out = np.zeros(shape)
        for idx, rows in chunks:
            np.add.at(out, idx, rows)
        return out

    def dense(self, shape) -> np.ndarray:
        return self._dense(self.chunks, shape)

    def dense_copy(self, shape) -> np.ndarray:
        return self._dense(self.copy_chunks, shape)


class SequenceModel:
    """Shared scoring / sampling logic; subclasses provide logits."""

    def __init__(self, vocab_size: int, encoder: FeatureEncoder, eos: int = EOS):
        if vocab_size < 2:
            raise ConfigError("vocabulary needs at least two tokens")
        self.vocab_size = vocab_size
        self.encoder = encoder
        self.eos = eos
        # renewed on every parameter update; lets callers memoize scores
        self.version = next(VERSIONS)

    def _check(self, seq):
        if len(seq) and (min(seq) < 0 or max(seq) >= self.vocab_size):
            raise DomainError("token id out of vocabulary")

    def _check_target(self, condition, target):
        self._check(condition)
        self._check(target)
        if not len(target) or target[-1] != self.eos:
            raise DomainError("target must end with EOS")

    def log_prob(self, condition, target) -> float:
        self._check_target(condition, target)
        lp = log_softmax(self.position_logits(condition, target))
        return float(lp[np.arange(len(target)), list(target)].sum())

    def token_log_probs(self, condition, target) -> np.ndarray:
        self._check_target(condition, target)
        lp = log_softmax(self.position_logits(condition, target))
        return lp[np.arange(len(target)), list(target)]

    def accumulate(self, condition, target, grad, scale=1.0) -> float:
        """Add ``scale * d log p(target | condition)`` into ``grad``; returns log p."""
        self._check_target(condition, target)
        logits = self.position_logits(condition, target)
        lp = log_softmax(logits)
        g = -np.exp(lp)
        rows = np.arange(len(target))
        g[rows, list(target)] += 1.0
        self._scatter(condition, target, g * scale, grad)
        return float(lp[rows, list(target)].sum())

    def sample(self, condition, rng, max_len: int) -> tuple[int, ...]:
        if max_len < 1:
            raise ConfigError("max_len must be at least 1")
        self._check(condition)
        step = self.stepper(condition)
        out: list[int] = []
        while len(out) < max_len:
            z = step(out)
            c = np.exp(z - z.max()).cumsum()
            tok = min(int(c.searchsorted(rng.random() * c[-1], side="right")), self.vocab_size - 1)
            out.append(tok)
            if tok == self.eos:
                break
        return tuple(out)

    def greedy(self, condition, max_len: int) -> tuple[int, ...]:
        if max_len < 1:
            raise ConfigError("max_len must be at least 1")
        self._check(condition)
        step = self.stepper(condition)
        out: list[int] = []
        while len(out) < max_len:
            # argmax returns the lowest id among ties
            tok = int(np.argmax(step(out)))
            out.append(tok)
            if tok == self.eos:
                break
        return tuple(out)

    def apply_update(self, grad, lr: float) -> None:
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not grad.is_finite():
            grad.clear()
            raise NumericError("non-finite gradient; update aborted")
        self._apply(grad, lr)
        self.version = next(VERSIONS)
        grad.clear()

    def touch(self) -> None:
        """Mark parameters as changed after editing them in place."""
        self.version = next(VERSIONS)

    def copy(self):
        return copy.deepcopy(self)


class TabularSequenceModel(SequenceModel):
    """Softmax tables keyed on (condition tail, prefix tail).

    Unseen keys read as zeros (uniform), or as deterministic pseudo-random
    rows when ``init_scale > 0``; rows are materialized on update.
    """

    def __init__(self, vocab_size, encoder, eos=EOS, init_scale=0.0, seed=0):
        super().__init__(vocab_size, encoder, eos)
        self.tables: dict[tuple, np.ndarray] = {}
        self._lazy: dict[tuple, np.ndarray] = {}
        self.init_scale = init_scale
        self.seed = seed
        self._zeros = np.zeros(vocab_size)
        self._zeros.flags.writeable = False

    def row(self, key, create=False) -> np.ndarray:
        r = self.tables.get(key)
        if r is not None:
            return r
        if self.init_scale > 0:
            r = self._lazy.get(key)
            if r is None:
                r = self.init_scale * np.random.default_rng(_key_seed(key, self.seed)).standard_normal(self.vocab_size)
                r.flags.writeable = False
                self._lazy[key] = r
            if not create:
                return r
            r = self._lazy.pop(key).copy()
        elif create:
            r = np.zeros(self.vocab_size)
        else:
            return self._zeros
        if create:
            self.tables[key] = r
        return r

    def keys_for(self, condition, target):
        target = tuple(target)
        return [self.encoder.table_key(condition, target[:l]) for l in range(len(target))]

    def position_logits(self, condition, target):
        return np.stack([self.row(k) for k in self.keys_for(condition, target)])

    def stepper(self, condition):
        enc = self.encoder
        return lambda prefix: self.row(enc.table_key(condition, prefix))

    def new_grad(self):
        return TableGrad()

    def _scatter(self, condition, target, g, grad):
        for key, vec in zip(self.keys_for(condition, target), g):
            grad.add(key, vec)

    def _apply(self, grad, lr):
        for key, vec in grad.rows.items():
            r = self.row(key, create=True)
            r += lr * vec

    def named_arrays(self, keys=None) -> dict:
        keys = self.tables.keys() if keys is None else keys
        return {k: self.row(k, create=True) for k in keys}


# copy sources: the five condition fields, then six prefix-dependent ones
# (current segment, whole prefix, tokens one and two places after the last
# token within the condition, tokens after the second-to-last token, and the
# pointer token)
N_FIELDS = 5
N_DYNAMIC = 6
N_COPY = N_FIELDS + N_DYNAMIC


class HashedSequenceModel(SequenceModel):
    """Log-linear softmax over signed-hashed binary features.

    logit(v) = sum of ``W`` rows of the active condition and prefix features
    + a copy term: the prefix features also select weights ``U`` over copy
    sources, and token ``v`` collects the weight of every source it occurs in.
    """

    def __init__(self, vocab_size, encoder, eos=EOS, init_scale=0.0, seed=0):
        super().__init__(vocab_size, encoder, eos)
        if init_scale > 0:
            rng = np.random.default_rng(seed)
            self.W = init_scale * rng.standard_normal((encoder.dim, vocab_size))
            self.U = init_scale * rng.standard_normal((encoder.dim, N_COPY))
        else:
            self.W = np.zeros((encoder.dim, vocab_size))
            self.U = np.zeros((encoder.dim, N_COPY))

    def _cond_membership(self, condition) -> np.ndarray:
        t, fld, body = self.encoder.condition_fields(condition)
        m = np.zeros((N_FIELDS, self.vocab_size))
        m[fld[body], t[body]] = 1.0
        return m

    def _dynamic_membership(self, condition, target) -> np.ndarray:
        """(positions, N_DYNAMIC, V) indicators of the prefix-dependent sources."""
        pos, src, tok = self.encoder.copy_sources(condition, target)
        m = np.zeros((len(target), N_DYNAMIC, self.vocab_size))
        m[pos, src, tok] = 1.0
        return m

    def _features(self, condition, target):
        cidx, csign = self.encoder.condition_features(condition)
        starts, pidx, psign = self.encoder.prefix_features(target)
        return cidx, csign, starts, pidx, psign

    def position_logits(self, condition, target):
        cidx, csign, starts, pidx, psign = self._features(condition, target)
        base = csign @ self.W[cidx]
        local = np.add.reduceat(self.W[pidx] * psign[:, None], starts, axis=0)
        c = np.add.reduceat(self.U[pidx] * psign[:, None], starts, axis=0)
        copy = c[:, :N_FIELDS] @ self._cond_membership(condition)
        copy += np.einsum("lk,lkv->lv", c[:, N_FIELDS:], self._dynamic_membership(condition, target))
        return local + base + copy

    def stepper(self, condition):
        cidx, csign = self.encoder.condition_features(condition)
        base = csign @ self.W[cidx]
        mc = self._cond_membership(condition)
        enc = self.encoder

        def step(prefix):
            idx, sign = enc.step_features(prefix)
            c = sign @ self.U[idx]
            z = base + sign @ self.W[idx] + c[:N_FIELDS] @ mc
            for k, ids in enumerate(enc.step_sources(condition, prefix)):
                if len(ids):
                    z[np.unique(ids)] += c[N_FIELDS + k]
            return z

        return step

    def new_grad(self):
        return RowGrad()

    def _scatter(self, condition, target, g, grad):
        cidx, csign, starts, pidx, psign = self._features(condition, target)
        grad.add(cidx, np.outer(csign, g.sum(axis=0)))
        owner = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, len(pidx))))
        grad.add(pidx, g[owner] * psign[:, None])
        s = np.hstack((g @ self._cond_membership(condition).T,
                       np.einsum("lv,lkv->lk", g, self._dynamic_membership(condition, target))))
        grad.add_copy(pidx, s[owner] * psign[:, None])

    def _apply(self, grad, lr):
        for mat, chunks in ((self.W, grad.chunks), (self.U, grad.copy_chunks)):
            if chunks:
                idx = np.concatenate([i for i, _ in chunks])
                rows = np.concatenate([r for _, r in chunks])
                scatter_add(mat, idx, rows, lr)

    def named_arrays(self, keys=None) -> dict:
        return {"W": self.W, "U": self.U}


def make_sequence_model(vocab_size, encoder: FeatureEncoder, init_scale=0.0, seed=0, eos=EOS):
    cls = TabularSequenceModel if encoder.tabular else HashedSequenceModel
    return cls(vocab_size, encoder, eos=eos, init_scale=init_scale, seed=seed)
