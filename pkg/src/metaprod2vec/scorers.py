"""Top-K next-item scorers: popularity, co-occurrence CF, embeddings, blends.

Every scorer answers the same question: given a query item, rank candidate
items by a similarity score.  Metadata tokens are never candidates, the query
itself is excluded, and ties break toward the lower vocabulary index.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import Vocabulary
from .trainer import EmbeddingModel

logger = logging.getLogger(__name__)


class UnknownItemError(LookupError):
    """Query token not present in the scorer's vocabulary."""


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


class CoCountMatrix:
    """Symmetric windowed co-occurrence counts between items.

    ``counts[i, j]`` is the number of position pairs (p, q), p < q, within
    the window where items i and j occurred; the diagonal is excluded (an
    item repeated inside a window does not co-occur with itself).
    """

    def __init__(self, counts: sp.csr_matrix, occurrences: np.ndarray, window: int):
        self.counts = counts
        self.occurrences = occurrences
        self.window = window
        self.row_norms = np.sqrt(np.asarray(counts.multiply(counts).sum(axis=1)).ravel())

    def count(self, i: int, j: int) -> int:
        return int(self.counts[i, j])

    @property
    def total_pairs(self) -> int:
        """Number of windowed co-occurrence position pairs, each counted once."""
        return int(self.counts.sum()) // 2


def build_cocounts(
    sequences: Sequence[Sequence[str]], window: int, vocabulary: Vocabulary
) -> CoCountMatrix:
    """Count windowed co-occurrences over the training sequences."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    v = len(vocabulary)
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    occurrences = np.zeros(v, dtype=np.int64)
    for seq in sequences:
        idx = vocabulary.encode(seq)
        if idx.size:
            occurrences += np.bincount(idx, minlength=v)
        for d in range(1, window + 1):
            if idx.size <= d:
                break
            a, b = idx[:-d], idx[d:]
            keep = a != b
            rows.append(a[keep])
            cols.append(b[keep])
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        data = np.ones(r.shape[0], dtype=np.float64)
        m = sp.coo_matrix((data, (r, c)), shape=(v, v))
        m = (m + m.T).tocsr()
        m.sum_duplicates()
    else:
        m = sp.csr_matrix((v, v), dtype=np.float64)
    return CoCountMatrix(m, occurrences, window)


class Scorer:
    """Shared candidate masking and ranking; subclasses fill in the scores."""

    def __init__(self, vocabulary: Vocabulary):
        self.vocabulary = vocabulary

    def _query_index(self, query: str) -> int:
        if query not in self.vocabulary:
            raise UnknownItemError(f"unknown query item: {query!r}")
        return self.vocabulary.index(query)

    def _score_vector(self, query_index: int) -> np.ndarray:
        raise NotImplementedError

    def score(self, query: str, candidate: str) -> float:
        qi = self._query_index(query)
        if candidate not in self.vocabulary:
            raise UnknownItemError(f"unknown candidate item: {candidate!r}")
        return float(self._score_vector(qi)[self.vocabulary.index(candidate)])

    def top_k(self, query: str, k: int) -> list[tuple[str, float]]:
        """Best k candidate items with non-increasing scores.

        The query itself and all metadata tokens are excluded; fewer than k
        results are returned if the candidate set is smaller.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        qi = self._query_index(query)
        scores = np.asarray(self._score_vector(qi), dtype=np.float64).copy()
        scores[self.vocabulary.is_metadata] = -np.inf
        scores[qi] = -np.inf
        order = np.argsort(-scores, kind="stable")[:k]
        vocab = self.vocabulary
        return [(vocab.token(i), float(scores[i])) for i in order if scores[i] != -np.inf]


class BestOfScorer(Scorer):
    """Popularity baseline: score is normalized training frequency, query-independent."""

    def __init__(self, vocabulary: Vocabulary):
        super().__init__(vocabulary)
        freqs = vocabulary.frequencies.astype(np.float64)
        freqs = np.where(vocabulary.is_metadata, 0.0, freqs)
        peak = freqs.max()
        self._scores = freqs / peak if peak > 0 else freqs

    def _score_vector(self, query_index: int) -> np.ndarray:
        return self._scores


class EmbeddingScorer(Scorer):
    """Cosine similarity between input-vector rows."""

    def __init__(self, model: EmbeddingModel):
        super().__init__(model.vocabulary)
        table = model.w_in.astype(np.float64)
        norms = np.linalg.norm(table, axis=1)
        norms[norms == 0.0] = 1.0  # zero rows stay zero and score 0
        self._normed = table / norms[:, None]

    def _score_vector(self, query_index: int) -> np.ndarray:
        return self._normed @ self._normed[query_index]


COCOUNT_ROW_COSINE = "row_cosine"
COCOUNT_PAIR_NORM = "pair_norm"


class CoCountScorer(Scorer):
    """Collaborative-filtering scorer over the co-occurrence matrix.

    The default scores cosine similarity between full co-occurrence rows,
    which lies in [0, 1].  The ``pair_norm`` variant scores the direct pair
    count normalized by item occurrences, count(q, c) / sqrt(occ(q) * occ(c));
    it answers a different reading of co-occurrence similarity, can exceed 1
    when items repeat inside a window, and is kept behind this switch without
    any fidelity claim.
    """

    def __init__(self, cocounts: CoCountMatrix, vocabulary: Vocabulary,
                 variant: str = COCOUNT_ROW_COSINE):
        super().__init__(vocabulary)
        if variant not in (COCOUNT_ROW_COSINE, COCOUNT_PAIR_NORM):
            raise ValueError(f"unknown CoCounts variant {variant!r}")
        self.cocounts = cocounts
        self.variant = variant
        if variant == COCOUNT_ROW_COSINE:
            norms = cocounts.row_norms.copy()
            norms[norms == 0.0] = 1.0
            inv = sp.diags(1.0 / norms)
            self._normed = (inv @ cocounts.counts).tocsr()
        else:
            occ = cocounts.occurrences.astype(np.float64)
            self._inv_sqrt_occ = np.divide(
                1.0, np.sqrt(occ), out=np.zeros_like(occ), where=occ > 0
            )

    def _score_vector(self, query_index: int) -> np.ndarray:
        if self.variant == COCOUNT_ROW_COSINE:
            col = self._normed @ self._normed[query_index].T
            return col.toarray().ravel()
        row = self.cocounts.counts[query_index].toarray().ravel()
        return row * self._inv_sqrt_occ * self._inv_sqrt_occ[query_index]


class MixScorer(Scorer):
    """Linear blend alpha * A + (1 - alpha) * B over a pooled candidate set.

    Candidates are the union of each component's top ``pool`` items, which
    keeps blending linear in the pool size instead of quadratic in the
    vocabulary; a candidate unknown to one component contributes 0 from it.
    """

    def __init__(self, alpha: float, scorer_a: Scorer, scorer_b: Scorer, pool: int = 500):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        if pool < 1:
            raise ValueError(f"pool must be >= 1, got {pool}")
        super().__init__(scorer_a.vocabulary)
        self.alpha = alpha
        self.scorer_a = scorer_a
        self.scorer_b = scorer_b
        self.pool = pool

    def _component_scores(self, query: str) -> dict[str, tuple[float, float]]:
        top_a = self.scorer_a.top_k(query, self.pool)
        top_b = self.scorer_b.top_k(query, self.pool)
        av = self.scorer_a._score_vector(self.scorer_a._query_index(query))
        bv = self.scorer_b._score_vector(self.scorer_b._query_index(query))
        out: dict[str, tuple[float, float]] = {}
        for token, _ in top_a + top_b:
            if token in out:
                continue
            a_vocab, b_vocab = self.scorer_a.vocabulary, self.scorer_b.vocabulary
            sa = float(av[a_vocab.index(token)]) if token in a_vocab else 0.0
            sb = float(bv[b_vocab.index(token)]) if token in b_vocab else 0.0
            out[token] = (sa, sb)
        return out

    def score(self, query: str, candidate: str) -> float:
        sa = self.scorer_a.score(query, candidate)
        sb = self.scorer_b.score(query, candidate)
        return self.alpha * sa + (1.0 - self.alpha) * sb

    def top_k(self, query: str, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        comp = self._component_scores(query)
        vocab_a = self.scorer_a.vocabulary
        blended = [
            (-(self.alpha * sa + (1.0 - self.alpha) * sb),
             vocab_a.index(t) if t in vocab_a else len(vocab_a), t)
            for t, (sa, sb) in comp.items()
        ]
        blended.sort()
        return [(t, -neg) for neg, _, t in blended[:k]]


def top_k(scorer: Scorer, query: str, k: int) -> list[tuple[str, float]]:
    """Rank the k best candidate items for the query under the scorer."""
    return scorer.top_k(query, k)


def mix_top_k(
    alpha: float,
    embedding_scorer: Scorer,
    cocounts_scorer: Scorer,
    query: str,
    k: int,
    pool: int = 500,
) -> list[tuple[str, float]]:
    """Blend two scorers at the given alpha and rank the pooled candidates."""
    return MixScorer(alpha, embedding_scorer, cocounts_scorer, pool).top_k(query, k)
