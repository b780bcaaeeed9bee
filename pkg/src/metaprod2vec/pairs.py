"""Training-pair expansion and the negative-sampling distribution.

Five pair kinds connect items (I/J denote an item and a context item) and
metadata tokens (M): the classic item-to-context kind plus four metadata
interaction kinds.  Negative outputs are drawn from one distribution over the
whole shared vocabulary, items and metadata together.
"""

from __future__ import annotations

from enum import IntEnum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import _kernel

_MASK64 = (1 << 64) - 1
_LCG_MULT = 6364136223846793005
_LCG_INC = 1442695040888963407


class PairKind(IntEnum):
    """Interaction type of a training pair.

    JI: input item, output context item (the classic sequence signal).
    IM: input metadata, output the item it belongs to (same position).
    JM: input metadata, output context item.
    MI: input item, output context item's metadata.
    MM: input metadata, output context item's metadata.
    """

    JI = 0
    IM = 1
    JM = 2
    MI = 3
    MM = 4


SIDE_KINDS = (PairKind.IM, PairKind.JM, PairKind.MI, PairKind.MM)


class TrainingPair(NamedTuple):
    input_index: int
    output_index: int
    kind: PairKind


def kinds_mask(enabled: Iterable[PairKind]) -> np.ndarray:
    mask = np.zeros(_kernel.N_KINDS, dtype=bool)
    for k in enabled:
        mask[int(k)] = True
    return mask


def generate_pairs(
    item_indices: Sequence[int] | np.ndarray,
    meta_indices: Sequence[int] | np.ndarray | None,
    window: int,
    enabled_kinds: Iterable[PairKind] = tuple(PairKind),
) -> list[TrainingPair]:
    """Expand one training sequence into its weighted pair stream.

    For each position i and each context position j with 0 < |i-j| <= window,
    emits JI and the enabled metadata kinds where the needed metadata exists,
    in the order JI, JM, MI, MM per context; one IM pair per position (not per
    context) follows its contexts.  Positions with missing metadata simply
    skip the metadata-involving kinds.

    Args:
        item_indices: vocabulary indices of the sequence items.
        meta_indices: aligned metadata indices, -1 where missing.  Either a
            flat array (one attribute) or ``(n_attrs, n)`` for several; None
            means no metadata at all.
        window: symmetric context radius, >= 1.
        enabled_kinds: kinds to emit.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    items = np.ascontiguousarray(item_indices, dtype=np.int32)
    n = items.shape[0]
    if meta_indices is None:
        metas = np.full((0, n), -1, dtype=np.int32)
    else:
        metas = np.ascontiguousarray(np.atleast_2d(np.asarray(meta_indices, dtype=np.int32)))
    if metas.shape[1] != n:
        raise ValueError(f"meta_indices length {metas.shape[1]} != sequence length {n}")
    if n == 0:
        return []
    mask = kinds_mask(enabled_kinds)
    cap = _kernel.pair_capacity(n, metas.shape[0], window)
    inp = np.empty(cap, dtype=np.int32)
    out = np.empty(cap, dtype=np.int32)
    kd = np.empty(cap, dtype=np.int8)
    m = _kernel.emit_pairs(items, metas, window, mask, inp, out, kd)
    return [
        TrainingPair(int(inp[i]), int(out[i]), PairKind(int(kd[i])))
        for i in range(m)
    ]


def splitmix64(x: int) -> int:
    """Python mirror of the compiled stream-seeding mix; must stay in sync."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_seed(seed: int, epoch: int, idx: int) -> int:
    z = splitmix64(seed & _MASK64)
    z = splitmix64(z ^ (epoch & _MASK64))
    z = splitmix64(z ^ (idx & _MASK64))
    return z


class SamplingRng:
    """64-bit LCG used for negative sampling.

    Deliberately tiny so the compiled trainer can replay the exact same
    stream; not a general-purpose RNG.
    """

    def __init__(self, seed: int):
        self.state = splitmix64(seed & _MASK64)

    @classmethod
    def from_state(cls, state: int) -> "SamplingRng":
        rng = cls.__new__(cls)
        rng.state = state & _MASK64
        return rng

    def uniform(self) -> float:
        self.state = (self.state * _LCG_MULT + _LCG_INC) & _MASK64
        return (self.state >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        state = self.state
        for i in range(n):
            state = (state * _LCG_MULT + _LCG_INC) & _MASK64
            out[i] = (state >> 11) * 2.0**-53
        self.state = state
        return out


class NegativeSampler:
    """Draws negative outputs with probability proportional to freq^power.

    The distribution covers every vocabulary index, items and metadata
    tokens alike; draws use an exact inverse-CDF lookup, so probabilities
    match the target distribution to floating-point precision.
    """

    def __init__(self, probs: np.ndarray, power: float):
        self.probs = probs
        self.power = power
        self.cum = np.cumsum(probs)

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[0]

    def draw(self, n: int, rng: SamplingRng) -> np.ndarray:
        """n i.i.d. draws from the distribution, no exclusion."""
        us = rng.uniforms(n)
        idx = np.searchsorted(self.cum, us, side="right")
        return np.minimum(idx, self.vocab_size - 1).astype(np.int64)

    def sample(self, k: int, excluded: int, rng: SamplingRng) -> np.ndarray:
        return sample_negatives(self, k, excluded, rng)


def build_negative_sampler(
    vocabulary, power: float = 0.75, table_size: int | None = None
) -> NegativeSampler:
    """Build the sampling distribution from vocabulary frequencies.

    Args:
        vocabulary: a ``corpus.Vocabulary`` (anything with ``frequencies``).
        power: distortion exponent, >= 0; 0 flattens to uniform over tokens
            with nonzero frequency.
        table_size: accepted for compatibility with table-based samplers and
            validated (must be >= V); the inverse-CDF sampler needs no table.
    """
    if power < 0:
        raise ValueError(f"power must be >= 0, got {power}")
    freqs = np.asarray(vocabulary.frequencies, dtype=np.float64)
    if table_size is not None and table_size < freqs.shape[0]:
        raise ValueError(f"table_size {table_size} smaller than vocabulary {freqs.shape[0]}")
    weights = np.zeros_like(freqs)
    nz = freqs > 0
    weights[nz] = freqs[nz] ** power
    total = weights.sum()
    if total <= 0:
        raise ValueError("cannot build sampler: all token frequencies are zero")
    return NegativeSampler(weights / total, power)


def sample_negatives(
    sampler: NegativeSampler, k: int, excluded: int, rng: SamplingRng
) -> np.ndarray:
    """k i.i.d. draws from the sampler; draws equal to ``excluded`` are redrawn."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if sampler.vocab_size < 2:
        raise ValueError("cannot sample negatives from a single-token vocabulary")
    cum = sampler.cum
    last = sampler.vocab_size - 1
    out = np.empty(k, dtype=np.int64)
    for q in range(k):
        while True:
            idx = int(np.searchsorted(cum, rng.uniform(), side="right"))
            if idx > last:
                idx = last
            if idx != excluded:
                break
        out[q] = idx
    return out
