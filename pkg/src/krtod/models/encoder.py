"""Feature encoders for the two model backends.

``tabular``: distributions are keyed on the last ``order`` tokens of the
condition and of the generated prefix; every probability is an explicit
table entry, so small instances can be enumerated exactly.

``hashed``: sparse binary features (field-tagged unigrams and bigrams of the
condition, local n-grams and a segment bag of the prefix) are signed-hashed
into ``dim`` buckets and read by linear heads.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from ..corpus import ACT, BOS, KB, PAD, RSP, USR
from ..errors import ConfigError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)

# namespaces
_UNI, _BI = 10, 20
P1, P2, SEGID, SEG, BIAS, PTR, PTR2 = 31, 32, 33, 34, 35, 36, 37
R_TOK, R_PAIR, R_MATCH = 41, 42, 43

# condition fields: context, user, knowledge, response, action
CTX, F_USR, F_KB, F_RSP, F_ACT = range(5)


def _mix(x):
    x = x ^ (x >> np.uint64(30))
    x = x * _C1
    x = x ^ (x >> np.uint64(27))
    x = x * _C2
    return x ^ (x >> np.uint64(31))


# memoized feature extraction; conditions and targets recur across scoring calls
_CACHE_SIZE = 1 << 18


def _readonly(out):
    for a in out:
        a.flags.writeable = False
    return out


@functools.lru_cache(maxsize=_CACHE_SIZE)
def _condition_features(enc, condition):
    return _readonly(enc._condition_features(condition))


@functools.lru_cache(maxsize=_CACHE_SIZE)
def _prefix_features(enc, target):
    return _readonly(enc._prefix_features(target))


@functools.lru_cache(maxsize=_CACHE_SIZE)
def _step_features(enc, prefix):
    return _readonly(enc._step_features(prefix))


@functools.lru_cache(maxsize=_CACHE_SIZE)
def _condition_successors(enc, condition):
    return enc._condition_successors(condition)


@functools.lru_cache(maxsize=_CACHE_SIZE)
def _retrieval_features(enc, context, user, entries):
    return _readonly(enc._retrieval_features(context, user, entries))


@functools.lru_cache(maxsize=_CACHE_SIZE)
def _copy_sources(enc, condition, target):
    return enc._copy_sources(condition, target)


def hash_keys(seed: int, ns, a, b) -> np.ndarray:
    """64-bit feature keys for (namespace, a, b) triples; vectorized."""
    with np.errstate(over="ignore"):
        ns = np.asarray(ns, dtype=np.int64).astype(np.uint64)
        a = np.asarray(a, dtype=np.int64).astype(np.uint64)
        b = np.asarray(b, dtype=np.int64).astype(np.uint64)
        h = _mix(ns * _GOLDEN + np.uint64(seed & 0xFFFFFFFF))
        h = _mix(h + a + np.uint64(1))
        h = _mix(h + b + np.uint64(1))
    return h


@dataclass(frozen=True)
class FeatureEncoder:
    backend: str = "hashed"
    dim: int = 4096
    seed: int = 0
    order: int = 2

    def __post_init__(self):
        if self.backend not in ("tabular", "hashed"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.dim < 1 or self.order < 1:
            raise ConfigError("dim and order must be positive")

    @property
    def tabular(self) -> bool:
        return self.backend == "tabular"

    # -- hashing helpers ---------------------------------------------------

    def index_sign(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = (keys % np.uint64(self.dim)).astype(np.intp)
        sign = np.where((keys >> np.uint64(63)) == 1, -1.0, 1.0)
        return idx, sign

    def features(self, ns, a, b, dedupe=False):
        keys = hash_keys(self.seed, ns, a, b)
        if dedupe:
            keys = np.unique(keys)
        return self.index_sign(keys)

    # -- tabular keys ------------------------------------------------------

    def tail(self, seq, pad) -> tuple[int, ...]:
        k = self.order
        seq = tuple(seq[-k:])
        return (pad,) * (k - len(seq)) + seq

    def table_key(self, condition, prefix) -> tuple[int, ...]:
        return self.tail(condition, PAD) + self.tail(prefix, BOS)

    # -- hashed sequence-model features -----------------------------------

    @staticmethod
    def condition_fields(condition) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Field code of every position and the mask of non-boundary positions."""
        t = np.asarray(condition, dtype=np.int64)
        n = len(t)
        is_b = (t >= USR) & (t <= ACT)
        code = np.where(is_b, t - USR + 1, CTX)
        last = np.maximum.accumulate(np.where(is_b, np.arange(n), 0)) if n else np.zeros(0, dtype=np.intp)
        return t, code[last], ~is_b

    def condition_features(self, condition) -> tuple[np.ndarray, np.ndarray]:
        """Binary field-tagged features of a condition sequence, plus bias."""
        return _condition_features(self, tuple(condition))

    def _condition_features(self, condition):
        t, fld, body = self.condition_fields(condition)
        if len(t) == 0:
            return self.features([BIAS], [0], [0])
        prev = np.concatenate(([BOS], t[:-1]))
        bi = body & (fld != CTX)
        ns = np.concatenate((_UNI + fld[body], _BI + fld[bi], [BIAS]))
        a = np.concatenate((t[body], prev[bi], [0]))
        b = np.concatenate((np.zeros(body.sum(), dtype=np.int64), t[bi], [0]))
        return self.features(ns, a, b, dedupe=True)

    @staticmethod
    def prefix_state(prefix):
        """(prev2, prev, segment label, segment tokens, pointer) after ``prefix``.

        The pointer is the token that followed, in earlier segments, the most
        recent token of the current segment found there; -1 if none.
        """
        prefix = tuple(prefix)
        prev = prefix[-1] if len(prefix) >= 1 else BOS
        prev2 = prefix[-2] if len(prefix) >= 2 else BOS
        label, start = 0, 0
        for i in range(len(prefix) - 1, -1, -1):
            if prefix[i] == RSP or prefix[i] == ACT:
                label, start = prefix[i], i + 1
                break
        seg = list(prefix[start:])
        ptr = -1
        if start > 1:
            last = {tok: j for j, tok in enumerate(prefix[:start - 1])}
            for tok in reversed(seg):
                j = last.get(tok)
                if j is not None:
                    ptr = prefix[j + 1]
                    break
        return prev2, prev, label, seg, ptr

    @staticmethod
    def _position_triples(prev2, prev, label, seg, ptr):
        ns = [P1, P2, SEGID, PTR, PTR2] + [SEG] * len(seg)
        a = [prev, prev2, label, ptr + 1, ptr + 1] + [label] * len(seg)
        b = [0, prev, 0, label, prev] + seg
        return ns, a, b

    def prefix_features(self, target):
        """Per-position prefix features for teacher-forced scoring.

        Returns ``(starts, idx, sign)`` where the features of position ``l``
        occupy ``idx[starts[l]:starts[l+1]]``.
        """
        return _prefix_features(self, tuple(target))

    def _prefix_features(self, target):
        ns, a, b, starts = [], [], [], []
        target = tuple(target)
        for l in range(len(target)):
            starts.append(len(ns))
            n_, a_, b_ = self._position_triples(*self.prefix_state(target[:l]))
            ns += n_
            a += a_
            b += b_
        idx, sign = self.features(ns, a, b)
        return np.asarray(starts, dtype=np.intp), idx, sign

    def step_features(self, prefix):
        return _step_features(self, tuple(prefix))

    def _step_features(self, prefix):
        return self.features(*self._position_triples(*self.prefix_state(prefix)))

    # -- copy sources ------------------------------------------------------

    def condition_successors(self, condition) -> tuple[dict, dict]:
        """Token -> tokens one and two positions after it within the same condition field."""
        return _condition_successors(self, tuple(condition))

    def _condition_successors(self, condition):
        t, fld, body = self.condition_fields(condition)
        out = []
        for gap in (1, 2):
            ok = body[:-gap] & body[gap:] & (fld[:-gap] == fld[gap:]) if len(t) > gap else np.zeros(0, bool)
            table: dict = {}
            for x, y in zip(t[:-gap][ok].tolist(), t[gap:][ok].tolist()):
                table.setdefault(x, set()).add(y)
            out.append({k: np.fromiter(sorted(v), dtype=np.intp) for k, v in table.items()})
        return tuple(out)

    def step_sources(self, condition, prefix) -> list[np.ndarray]:
        """Token ids of each prefix-dependent copy source after ``prefix``."""
        succ1, succ2 = self.condition_successors(condition)
        prev2, prev, _, seg, ptr = self.prefix_state(prefix)
        empty = np.zeros(0, dtype=np.intp)
        return [
            np.asarray(seg, dtype=np.intp),
            np.asarray(prefix, dtype=np.intp),
            succ1.get(prev, empty) if prefix else empty,
            succ2.get(prev, empty) if prefix else empty,
            succ1.get(prev2, empty) if len(prefix) >= 2 else empty,
            np.asarray([ptr] if ptr >= 0 else [], dtype=np.intp),
        ]

    def copy_sources(self, condition, target):
        """``(pos, src, tok)`` coordinates of the dynamic copy sources of every position."""
        return _copy_sources(self, tuple(condition), tuple(target))

    def _copy_sources(self, condition, target):
        pos, src, tok = [], [], []
        for l in range(len(target)):
            for k, ids in enumerate(self.step_sources(condition, target[:l])):
                pos.append(np.full(len(ids), l, dtype=np.intp))
                src.append(np.full(len(ids), k, dtype=np.intp))
                tok.append(ids)
        if not pos:
            empty = np.zeros(0, dtype=np.intp)
            return empty, empty, empty
        return _readonly((np.concatenate(pos), np.concatenate(src), np.concatenate(tok)))

    # -- retriever features ------------------------------------------------

    def retrieval_features(self, context, user, entries):
        return _retrieval_features(self, tuple(context), tuple(user), tuple(tuple(sv) for sv in entries))

    def _retrieval_features(self, context, user, entries):
        """Features of ``c + u + sv`` for every KB entry at once.

        Per sv token: its identity, its pairing with each distinct user token,
        and whether it literally occurs in the user turn or the context.
        Features are mean-pooled over the sv token positions.
        Returns ``(entry, idx, value)`` arrays.
        """
        u = np.unique(np.asarray(user, dtype=np.int64))
        c = np.unique(np.asarray(context, dtype=np.int64))
        ent, ns, a, b, val = [], [], [], [], []
        for i, sv in enumerate(entries):
            sv = np.asarray(sv, dtype=np.int64)
            m = len(sv)
            if m == 0:
                continue
            w = 1.0 / m
            in_u = np.isin(sv, u)
            in_c = np.isin(sv, c)
            roles = np.arange(m)
            k = m + m * len(u) + int(in_u.sum()) + int(in_c.sum())
            ent.append(np.full(k, i))
            ns.append(np.concatenate((
                np.full(m, R_TOK), np.full(m * len(u), R_PAIR),
                np.full(int(in_u.sum()) + int(in_c.sum()), R_MATCH))))
            a.append(np.concatenate((sv, np.repeat(sv, len(u)), roles[in_u], roles[in_c])))
            b.append(np.concatenate((
                np.zeros(m, dtype=np.int64), np.tile(u, m),
                np.zeros(int(in_u.sum()), dtype=np.int64), np.ones(int(in_c.sum()), dtype=np.int64))))
            val.append(np.full(k, w))
        if not ent:
            empty = np.zeros(0, dtype=np.intp)
            return empty, empty, np.zeros(0)
        idx, sign = self.features(np.concatenate(ns), np.concatenate(a), np.concatenate(b))
        return np.concatenate(ent), idx, sign * np.concatenate(val)

    def retrieval_key(self, context, user, sv) -> tuple[int, ...]:
        return self.tail(tuple(context) + (USR,) + tuple(user) + (KB,) + tuple(sv), PAD)
