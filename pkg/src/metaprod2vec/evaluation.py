"""Next-event-prediction evaluation: HR@K, NDCG@K, cold-start and ablations.

The protocol follows leave-last-out splits: the query is the last item of
each training sequence and the target is the held-out next item.  Note the
hit ratio here is 1/K on a hit, not 1; that makes HR@20 smaller than HR@10
for the same hits and is intentional, do not "fix" it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import MetadataMap, SplitCorpus, Vocabulary
from .pairs import PairKind
from .scorers import (
    BestOfScorer,
    CoCountMatrix,
    EmbeddingScorer,
    MixScorer,
    Scorer,
    UnknownItemError,
    build_cocounts,
)
from .trainer import HyperParams, train

logger = logging.getLogger(__name__)


def hit_ratio_at_k(ranked: Sequence[str], test_item: str, k: int) -> float:
    """1/k if the test item appears among the first k entries, else 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return 1.0 / k if test_item in list(ranked)[:k] else 0.0


def ndcg_at_k(ranked: Sequence[str], test_item: str, k: int) -> float:
    """1/log2(rank+1) for the single relevant item if within the cutoff, else 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    head = list(ranked)[:k]
    try:
        rank = head.index(test_item) + 1
    except ValueError:
        return 0.0
    return 1.0 / math.log2(rank + 1)


@dataclass
class MetricEstimate:
    est: float
    lo: float
    hi: float

    def to_dict(self) -> dict:
        return {"est": self.est, "lo": self.lo, "hi": self.hi}


@dataclass
class BucketReport:
    """Users whose (query, target) training pair frequency falls in [lo, hi)."""

    lo: int
    hi: int | None  # None = unbounded
    count: int
    metrics: dict[str, float] = field(default_factory=dict)

    @property
    def label(self) -> str:
        if self.hi is None:
            return f">={self.lo}"
        if self.hi == self.lo + 1:
            return str(self.lo)
        return f"{self.lo}-{self.hi - 1}"

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "lo": self.lo,
            "hi": self.hi,
            "count": self.count,
            "metrics": self.metrics,
        }


@dataclass
class EvalReport:
    method: str
    metrics: dict[str, MetricEstimate]
    buckets: list[BucketReport]
    evaluated: int
    skipped: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "metrics": {k: m.to_dict() for k, m in self.metrics.items()},
            "buckets": [b.to_dict() for b in self.buckets],
            "evaluated": self.evaluated,
            "skipped": self.skipped,
            "params": self.params,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def metric_names(k_list: Sequence[int]) -> list[str]:
    return [f"HR@{k}" for k in k_list] + [f"NDCG@{k}" for k in k_list]


def _per_user_metrics(
    scorer: Scorer, split: SplitCorpus, k_list: Sequence[int]
) -> tuple[np.ndarray, list[int], int]:
    """Metric matrix (users x metrics), surviving user indices, skip count.

    A user is skipped when the query item (the last item of the training
    sequence) is unknown to the scorer; an unknown target simply misses.
    """
    k_max = max(k_list)
    rows: list[list[float]] = []
    kept: list[int] = []
    skipped = 0
    targets = split.targets
    for u, train_items in enumerate(split.train_sessions):
        query = train_items[-1]
        target = targets[u]
        try:
            ranked = [t for t, _ in scorer.top_k(query, k_max)]
        except UnknownItemError:
            skipped += 1
            continue
        row = [hit_ratio_at_k(ranked, target, k) for k in k_list]
        row += [ndcg_at_k(ranked, target, k) for k in k_list]
        rows.append(row)
        kept.append(u)
    matrix = np.asarray(rows, dtype=np.float64) if rows else np.empty((0, 2 * len(k_list)))
    return matrix, kept, skipped


def _bootstrap_ci(
    matrix: np.ndarray, samples: int, level: float, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Percentile bootstrap over users; resample indices derive from the seed."""
    n = matrix.shape[0]
    point = matrix.mean(axis=0)
    if samples < 1 or n == 0:
        return point, point, point
    rng = np.random.default_rng(seed)
    means = np.empty((samples, matrix.shape[1]), dtype=np.float64)
    chunk = 200
    done = 0
    while done < samples:
        b = min(chunk, samples - done)
        idx = rng.integers(0, n, size=(b, n))
        means[done : done + b] = matrix[idx].mean(axis=1)
        done += b
    alpha = (1.0 - level) / 2.0
    lo = np.percentile(means, 100.0 * alpha, axis=0)
    hi = np.percentile(means, 100.0 * (1.0 - alpha), axis=0)
    return point, lo, hi


def _bucket_bounds(edges: Sequence[int]) -> list[tuple[int, int | None]]:
    bounds: list[tuple[int, int | None]] = []
    lo = 0
    for edge in sorted(edges):
        if edge <= lo:
            raise ValueError(f"bucket edges must be increasing and > 0, got {list(edges)}")
        bounds.append((lo, edge))
        lo = edge
    bounds.append((lo, None))
    return bounds


def pair_frequency_fn(
    cocounts: CoCountMatrix, vocabulary: Vocabulary
) -> Callable[[str, str], int]:
    """Training co-occurrence count of (query, target); unknown tokens count 0."""

    def freq(query: str, target: str) -> int:
        if query not in vocabulary or target not in vocabulary:
            return 0
        return cocounts.count(vocabulary.index(query), vocabulary.index(target))

    return freq


def evaluate(
    scorer: Scorer,
    split: SplitCorpus,
    k_list: Sequence[int] = (10, 20),
    bootstrap_samples: int = 1000,
    ci_level: float = 0.90,
    seed: int = 0,
    method: str = "",
    pair_freq: Callable[[str, str], int] | None = None,
    bucket_edges: Sequence[int] = (1, 3),
    params: dict | None = None,
) -> EvalReport:
    """Evaluate a scorer on the split's held-out targets.

    Per-user metrics are averaged over all evaluable users; confidence
    bounds come from a percentile bootstrap over users.  When ``pair_freq``
    is given, users are additionally bucketed by the training frequency of
    their (query, target) pair and per-bucket hit ratios are reported.

    Raises:
        ValueError: when no user can be evaluated.
    """
    matrix, kept, skipped = _per_user_metrics(scorer, split, k_list)
    if matrix.shape[0] == 0:
        raise ValueError("no evaluable users: every query item is out of vocabulary")
    names = metric_names(k_list)
    point, lo, hi = _bootstrap_ci(matrix, bootstrap_samples, ci_level, seed)
    metrics = {
        name: MetricEstimate(float(point[i]), float(lo[i]), float(hi[i]))
        for i, name in enumerate(names)
    }

    buckets: list[BucketReport] = []
    if pair_freq is not None:
        freqs = np.array(
            [pair_freq(split.train_sessions[u][-1], split.targets[u]) for u in kept]
        )
        for b_lo, b_hi in _bucket_bounds(bucket_edges):
            in_bucket = (freqs >= b_lo) & (freqs < (b_hi if b_hi is not None else np.inf))
            count = int(in_bucket.sum())
            bucket_metrics = {}
            if count > 0:
                sub = matrix[in_bucket]
                bucket_metrics = {
                    f"HR@{k}": float(sub[:, i].mean()) for i, k in enumerate(k_list)
                }
            buckets.append(BucketReport(b_lo, b_hi, count, bucket_metrics))

    return EvalReport(
        method=method or type(scorer).__name__,
        metrics=metrics,
        buckets=buckets,
        evaluated=int(matrix.shape[0]),
        skipped=skipped,
        params=params or {},
    )


def cold_start_report(
    scorer: Scorer,
    split: SplitCorpus,
    cocounts: CoCountMatrix,
    vocabulary: Vocabulary,
    k_list: Sequence[int] = (10, 20),
    bucket_edges: Sequence[int] = (1, 3),
) -> list[BucketReport]:
    """Hit ratios per (query, target) training-pair-frequency bucket."""
    report = evaluate(
        scorer,
        split,
        k_list,
        bootstrap_samples=0,
        pair_freq=pair_frequency_fn(cocounts, vocabulary),
        bucket_edges=bucket_edges,
    )
    return report.buckets


def tune_alpha(
    scorer_a: Scorer,
    scorer_b: Scorer,
    split: SplitCorpus,
    grid: Sequence[float],
    k: int = 20,
    pool: int = 500,
) -> tuple[float, dict[float, float]]:
    """Pick the blend weight maximizing HR@k on the split's targets.

    Component scores are computed once per user and reused across the whole
    grid.  Ties resolve toward the smaller alpha.
    """
    if not grid:
        raise ValueError("alpha grid is empty")
    sums = {alpha: 0.0 for alpha in grid}
    users = 0
    probe = MixScorer(0.0, scorer_a, scorer_b, pool)
    for u, train_items in enumerate(split.train_sessions):
        query = train_items[-1]
        target = split.targets[u]
        try:
            comp = probe._component_scores(query)
        except UnknownItemError:
            continue
        users += 1
        vocab = scorer_a.vocabulary
        entries = [
            (t, vocab.index(t) if t in vocab else len(vocab), sa, sb)
            for t, (sa, sb) in comp.items()
        ]
        for alpha in grid:
            scored = sorted(
                ((-(alpha * sa + (1 - alpha) * sb), idx, t) for t, idx, sa, sb in entries)
            )[:k]
            if any(t == target for _, _, t in scored):
                sums[alpha] += 1.0 / k
    if users == 0:
        raise ValueError("no evaluable users for alpha tuning")
    hr = {alpha: s / users for alpha, s in sums.items()}
    best = min(grid, key=lambda a: (-hr[a], a))
    logger.info("alpha tuning: best=%.3f HR@%d=%.5f", best, k, hr[best])
    return best, hr


ABLATION_CONFIGS: tuple[tuple[str, tuple[PairKind, ...]], ...] = (
    ("only_im", (PairKind.IM,)),
    ("only_mi", (PairKind.MI,)),
    ("only_jm", (PairKind.JM,)),
    ("without_mm", (PairKind.IM, PairKind.MI, PairKind.JM)),
    ("full", (PairKind.IM, PairKind.MI, PairKind.JM, PairKind.MM)),
)


@dataclass
class AblationRow:
    config: str
    hr: float
    ndcg: float
    hr_lift: float
    ndcg_lift: float


def ablation_run(
    split: SplitCorpus,
    metadata: Sequence[MetadataMap],
    params: HyperParams,
    side_lambda: float = 1.0,
    k: int = 20,
    baseline: tuple[float, float] | None = None,
    bestof_vocabulary: Vocabulary | None = None,
) -> list[AblationRow]:
    """Train each side-information configuration and report its share of lift.

    Lift fractions are (HR_config - HR_BestOf) / (HR_full - HR_BestOf) and
    likewise for NDCG, so the full configuration is 1.0 by construction.
    ``baseline`` short-circuits the popularity baseline as (hr, ndcg).
    """
    if baseline is None:
        from .corpus import build_vocabulary

        vocab = bestof_vocabulary or build_vocabulary(
            split.train_sessions, None, params.min_count
        )
        report = evaluate(BestOfScorer(vocab), split, (k,), bootstrap_samples=0)
        baseline = (report.metrics[f"HR@{k}"].est, report.metrics[f"NDCG@{k}"].est)

    results: dict[str, tuple[float, float]] = {}
    for name, kinds in ABLATION_CONFIGS:
        cfg = dataclasses.replace(params, lambdas={kd: side_lambda for kd in kinds})
        model = train(split, metadata, cfg)
        report = evaluate(EmbeddingScorer(model), split, (k,), bootstrap_samples=0)
        results[name] = (report.metrics[f"HR@{k}"].est, report.metrics[f"NDCG@{k}"].est)
        logger.info("ablation %s: HR@%d=%.5f NDCG@%d=%.5f", name, k, results[name][0],
                    k, results[name][1])

    full_hr, full_ndcg = results["full"]
    base_hr, base_ndcg = baseline
    rows = []
    for name, _ in ABLATION_CONFIGS:
        hr, ndcg = results[name]
        hr_lift = (hr - base_hr) / (full_hr - base_hr) if full_hr != base_hr else math.nan
        ndcg_lift = (
            (ndcg - base_ndcg) / (full_ndcg - base_ndcg) if full_ndcg != base_ndcg else math.nan
        )
        rows.append(AblationRow(name, hr, ndcg, hr_lift, ndcg_lift))
    return rows


class SpmiMatrix:
    """Shifted PMI over windowed co-occurrences, stored only where counts exist."""

    def __init__(self, entries: dict[tuple[int, int], float], shift_k: int, total_pairs: int):
        self.entries = entries
        self.shift_k = shift_k
        self.total_pairs = total_pairs

    def spmi(self, i: int, j: int) -> float | None:
        if i > j:
            i, j = j, i
        return self.entries.get((i, j))

    def pmi(self, i: int, j: int) -> float | None:
        value = self.spmi(i, j)
        return None if value is None else value + math.log(self.shift_k)

    def __len__(self) -> int:
        return len(self.entries)


def compute_spmi(
    sequences: Sequence[Sequence[str]],
    window: int,
    shift_k: int,
    vocabulary: Vocabulary,
) -> SpmiMatrix:
    """PMI of windowed co-occurrences shifted by log(shift_k).

    PMI(i, j) = log(X_ij * D / (X_i * X_j)) with X_i the token occurrence
    counts, X_ij the windowed co-occurrence counts and D the total number of
    windowed co-occurrence position pairs.
    """
    if shift_k < 1:
        raise ValueError(f"shift_k must be >= 1, got {shift_k}")
    cocounts = build_cocounts(sequences, window, vocabulary)
    d = cocounts.total_pairs
    occ = cocounts.occurrences
    coo = cocounts.counts.tocoo()
    shift = math.log(shift_k)
    entries: dict[tuple[int, int], float] = {}
    for i, j, x_ij in zip(coo.row, coo.col, coo.data):
        if i > j:
            continue
        pmi = math.log(x_ij * d / (occ[i] * occ[j]))
        entries[(int(i), int(j))] = pmi - shift
    return SpmiMatrix(entries, shift_k, d)
