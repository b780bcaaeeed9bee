"""Compiled inner loops: pair emission, negative sampling and SGNS updates.

Everything here mirrors the pure-numpy reference path in ``trainer`` step for
step; the reference is what the gradient tests pin down, this module is what
production training runs.  The sampling RNG is a 64-bit LCG seeded through
splitmix64 so that Python and compiled code can replay identical streams.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

# PairKind values; must match pairs.PairKind.
KIND_JI = 0
KIND_IM = 1
KIND_JM = 2
KIND_MI = 3
KIND_MM = 4
N_KINDS = 5

_LCG_MULT = np.uint64(6364136223846793005)
_LCG_INC = np.uint64(1442695040888963407)
_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)
_U53_INV = 1.0 / 9007199254740992.0  # 2**-53


@njit(cache=True, inline="always")
def _splitmix64(x):
    x = x + _SM_GAMMA
    z = x
    z = (z ^ (z >> np.uint64(30))) * _SM_M1
    z = (z ^ (z >> np.uint64(27))) * _SM_M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _lcg_next(state):
    return state * _LCG_MULT + _LCG_INC


@njit(cache=True, inline="always")
def _to_uniform(state):
    return float(state >> np.uint64(11)) * _U53_INV


@njit(cache=True)
def stream_seed(seed, epoch, idx):
    """Independent LCG start state for one (run, epoch, session) stream."""
    z = _splitmix64(np.uint64(seed))
    z = _splitmix64(z ^ np.uint64(epoch))
    z = _splitmix64(z ^ np.uint64(idx))
    return z


@njit(cache=True, inline="always")
def _bisect_right(cum, u):
    lo = 0
    hi = cum.shape[0]
    while lo < hi:
        mid = (lo + hi) >> 1
        if u < cum[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True, inline="always")
def _draw(cum, state):
    state = _lcg_next(state)
    c = _bisect_right(cum, _to_uniform(state))
    if c >= cum.shape[0]:
        c = cum.shape[0] - 1
    return c, state


@njit(cache=True, inline="always")
def _log_sigmoid(z):
    if z >= 0.0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


@njit(cache=True, inline="always")
def _sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def pair_capacity(n, n_attrs, window):
    return n * (2 * window * (1 + 3 * n_attrs) + n_attrs)


@njit(cache=True)
def emit_pairs(items, metas, window, enabled, inp, out, kind):
    """Expand one sequence into (input, output, kind) pair arrays.

    ``metas`` is (n_attrs, n) with -1 marking missing values.  Emission order:
    positions ascending, context positions ascending, kinds JI, JM, MI, MM per
    context, then one IM per position.  Returns the number of pairs written.
    """
    n = items.shape[0]
    n_attrs = metas.shape[0]
    c = 0
    for i in range(n):
        lo = i - window
        if lo < 0:
            lo = 0
        hi = i + window
        if hi > n - 1:
            hi = n - 1
        for j in range(lo, hi + 1):
            if j == i:
                continue
            if enabled[KIND_JI]:
                inp[c] = items[i]
                out[c] = items[j]
                kind[c] = KIND_JI
                c += 1
            if enabled[KIND_JM]:
                for a in range(n_attrs):
                    if metas[a, i] >= 0:
                        inp[c] = metas[a, i]
                        out[c] = items[j]
                        kind[c] = KIND_JM
                        c += 1
            if enabled[KIND_MI]:
                for a in range(n_attrs):
                    if metas[a, j] >= 0:
                        inp[c] = items[i]
                        out[c] = metas[a, j]
                        kind[c] = KIND_MI
                        c += 1
            if enabled[KIND_MM]:
                for a in range(n_attrs):
                    if metas[a, i] >= 0 and metas[a, j] >= 0:
                        inp[c] = metas[a, i]
                        out[c] = metas[a, j]
                        kind[c] = KIND_MM
                        c += 1
        if enabled[KIND_IM]:
            for a in range(n_attrs):
                if metas[a, i] >= 0:
                    inp[c] = metas[a, i]
                    out[c] = items[i]
                    kind[c] = KIND_IM
                    c += 1
    return c


@njit(cache=True)
def count_pairs(items, metas, window, enabled):
    n = items.shape[0]
    n_attrs = metas.shape[0]
    c = 0
    for i in range(n):
        lo = i - window
        if lo < 0:
            lo = 0
        hi = i + window
        if hi > n - 1:
            hi = n - 1
        ctx = hi - lo  # positions in [lo, hi] minus the target itself
        if enabled[KIND_JI]:
            c += ctx
        for a in range(n_attrs):
            has_i = metas[a, i] >= 0
            if enabled[KIND_JM] and has_i:
                c += ctx
            if enabled[KIND_MI]:
                for j in range(lo, hi + 1):
                    if j != i and metas[a, j] >= 0:
                        c += 1
            if enabled[KIND_MM] and has_i:
                for j in range(lo, hi + 1):
                    if j != i and metas[a, j] >= 0:
                        c += 1
            if enabled[KIND_IM] and has_i:
                c += 1
    return c


@njit(cache=True)
def count_kind(items, metas, window, enabled, which):
    """Pairs of one kind only; used to validate that JI pairs exist."""
    n = items.shape[0]
    n_attrs = metas.shape[0]
    mask = np.zeros(N_KINDS, dtype=np.bool_)
    mask[which] = enabled[which]
    inp = np.empty(pair_capacity(n, n_attrs, window), dtype=np.int32)
    out = np.empty(inp.shape[0], dtype=np.int32)
    kd = np.empty(inp.shape[0], dtype=np.int8)
    return emit_pairs(items, metas, window, mask, inp, out, kd)


@njit(cache=True)
def _train_session(w_in, w_out, items, metas, window, enabled, lam, k, cum,
                   base_lr, min_lr_frac, t_start, total_pairs, state,
                   loss_row, cnt_row, negs, gin, sneg):
    n = items.shape[0]
    n_attrs = metas.shape[0]
    cap = pair_capacity(n, n_attrs, window)
    inp = np.empty(cap, dtype=np.int32)
    out = np.empty(cap, dtype=np.int32)
    kd = np.empty(cap, dtype=np.int8)
    m = emit_pairs(items, metas, window, enabled, inp, out, kd)
    dim = w_in.shape[1]
    t = t_start
    for p in range(m):
        frac = 1.0 - t / total_pairs
        if frac < min_lr_frac:
            frac = min_lr_frac
        lr = base_lr * frac
        t += 1
        kind = kd[p]
        eta = lam[kind] * lr
        ii = inp[p]
        oo = out[p]
        for q in range(k):
            while True:
                c, state = _draw(cum, state)
                if c != oo:
                    break
            negs[q] = c
        # scores and gradients read pre-update rows throughout
        s_pos = 0.0
        for d in range(dim):
            s_pos += float(w_in[ii, d]) * float(w_out[oo, d])
        loss = -_log_sigmoid(s_pos)
        g_pos = _sigmoid(s_pos) - 1.0
        for q in range(k):
            s = 0.0
            for d in range(dim):
                s += float(w_in[ii, d]) * float(w_out[negs[q], d])
            loss += -_log_sigmoid(-s)
            sneg[q] = _sigmoid(s)
        for d in range(dim):
            acc = g_pos * float(w_out[oo, d])
            for q in range(k):
                acc += sneg[q] * float(w_out[negs[q], d])
            gin[d] = acc
        for d in range(dim):
            w_out[oo, d] -= eta * g_pos * float(w_in[ii, d])
        for q in range(k):
            gq = eta * sneg[q]
            for d in range(dim):
                w_out[negs[q], d] -= gq * float(w_in[ii, d])
        for d in range(dim):
            w_in[ii, d] -= eta * gin[d]
        loss_row[kind] += loss
        cnt_row[kind] += 1
    return state


@njit(cache=True)
def train_epoch_serial(w_in, w_out, items_flat, metas_flat, offsets, order,
                       pair_offsets, window, enabled, lam, k, cum, base_lr,
                       min_lr_frac, total_pairs, seed, epoch, loss_out, cnt_out):
    negs = np.empty(k, dtype=np.int64)
    gin = np.empty(w_in.shape[1], dtype=np.float64)
    sneg = np.empty(k, dtype=np.float64)
    for pos in range(order.shape[0]):
        s = order[pos]
        a = offsets[s]
        b = offsets[s + 1]
        state = stream_seed(seed, epoch, s)
        _train_session(w_in, w_out, items_flat[a:b], metas_flat[:, a:b],
                       window, enabled, lam, k, cum, base_lr, min_lr_frac,
                       pair_offsets[pos], total_pairs, state,
                       loss_out[s], cnt_out[s], negs, gin, sneg)


@njit(cache=True, parallel=True)
def train_epoch_parallel(w_in, w_out, items_flat, metas_flat, offsets, order,
                         pair_offsets, window, enabled, lam, k, cum, base_lr,
                         min_lr_frac, total_pairs, seed, epoch, loss_out, cnt_out):
    # Hogwild contract: rows are updated without locks; races are accepted.
    for pos in prange(order.shape[0]):
        s = order[pos]
        a = offsets[s]
        b = offsets[s + 1]
        state = stream_seed(seed, epoch, s)
        negs = np.empty(k, dtype=np.int64)
        gin = np.empty(w_in.shape[1], dtype=np.float64)
        sneg = np.empty(k, dtype=np.float64)
        _train_session(w_in, w_out, items_flat[a:b], metas_flat[:, a:b],
                       window, enabled, lam, k, cum, base_lr, min_lr_frac,
                       pair_offsets[pos], total_pairs, state,
                       loss_out[s], cnt_out[s], negs, gin, sneg)
