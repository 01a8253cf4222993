"""Shared test oracles: finite differences and small fixtures."""

from __future__ import annotations

import numpy as np

from krtod.corpus import EOS, CorpusConfig, generate_splits
from krtod.models import HashedSequenceModel, Retriever, TabularSequenceModel

FD_STEP = 1e-5


def rel_err(a, n, floor=1e-3):
    return abs(a - n) / max(abs(a), abs(n), floor)


def central_difference(f, arr, index, h=FD_STEP):
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def seq_param_views(model, grad):
    """(array, analytic gradient) pairs covering every parameter the target touches."""
    if isinstance(model, TabularSequenceModel):
        keys = list(grad.rows)
        arrs = model.named_arrays(keys)
        return [(arrs[k], grad.rows[k]) for k in keys]
    assert isinstance(model, HashedSequenceModel)
    return [(model.W, grad.dense(model.W.shape)), (model.U, grad.dense_copy(model.U.shape))]


def worst_fd_error(f, views, rng=None, max_entries=None):
    """Largest relative error over entries with nonzero analytic gradient
    (plus a few zero entries, which must also have zero numeric gradient)."""
    worst = 0.0
    for arr, g in views:
        g = np.asarray(g)
        flat_idx = list(zip(*np.nonzero(np.abs(g) > 0)))
        zeros = list(zip(*np.nonzero(g == 0)))
        if rng is not None and zeros:
            pick = rng.choice(len(zeros), size=min(5, len(zeros)), replace=False)
            flat_idx += [zeros[i] for i in pick]
        if max_entries and len(flat_idx) > max_entries:
            pick = rng.choice(len(flat_idx), size=max_entries, replace=False)
            flat_idx = [flat_idx[i] for i in pick]
        for idx in flat_idx:
            idx = tuple(int(i) for i in idx) if arr.ndim > 1 else int(idx[0])
            n = central_difference(f, arr, idx)
            worst = max(worst, rel_err(float(g[idx]), n))
    return worst


def retriever_fd_error(ret: Retriever, grad, f):
    """Worst relative FD error over the retriever weights a gradient touches, and the bias."""

    class _Bias:
        def __getitem__(self, _):
            return ret.b

        def __setitem__(self, _, v):
            ret.b = v

    worst = rel_err(grad.b, central_difference(f, _Bias(), 0))
    if ret.encoder.tabular:
        for key, d in grad.table.items():
            ret.table[key] = ret._weight(key)
            worst = max(worst, rel_err(d, central_difference(f, ret.table, key)))
    else:
        dense = grad.dense_W(ret.encoder.dim)
        for i in np.nonzero(dense)[0]:
            worst = max(worst, rel_err(dense[i], central_difference(f, ret.W, int(i))))
    return worst


def random_seq(rng, vocab_size, lo, hi, length):
    return tuple(int(x) for x in rng.integers(lo, hi, size=length))


def random_target(rng, vocab_size, max_len, lo=5):
    n = int(rng.integers(0, max_len))
    return random_seq(rng, vocab_size, lo, vocab_size, n) + (EOS,)


def small_splits(dialogs=60, seed=0, **kw):
    cfg = CorpusConfig(dialogs=dialogs, seed=seed, dev_dialogs=20, test_dialogs=20, **kw)
    return generate_splits(cfg)
