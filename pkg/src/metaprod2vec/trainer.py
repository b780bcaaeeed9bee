"""Embedding training: SGNS over the five pair kinds with per-kind weights.

The loss for one positive pair (input i, output o) with negatives N is

    -log sigmoid(w_in[i] . w_out[o]) - sum_N log sigmoid(-w_in[i] . w_out[N])

and each side-information kind scales its gradient by its own weight; the
item-to-context kind is fixed at weight 1.  ``pair_loss`` / ``sgns_step``
are the plain-numpy reference implementation used by the gradient tests;
``train`` runs the compiled kernel, which follows the same update order.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernel
from .corpus import (
    META_SEP,
    MetadataMap,
    SplitCorpus,
    Vocabulary,
    build_vocabulary,
)
from .pairs import PairKind, SIDE_KINDS, TrainingPair, build_negative_sampler, kinds_mask

logger = logging.getLogger(__name__)

LR_FLOOR_FRACTION = 1e-4  # learning rate decays linearly to base * this


class TrainingDiverged(RuntimeError):
    """Raised when an update produces a non-finite embedding entry."""


@dataclass
class HyperParams:
    """Training configuration.

    ``lambdas`` holds the side-information weights keyed by kind; the JI kind
    is always weighted 1 and must not appear in the map.  A kind is trained
    only when its weight is positive, and metadata enters the vocabulary only
    when at least one side kind is active, so a run with all side weights at
    zero is exactly a plain item-sequence run.
    """

    dim: int = 50
    window: int = 3
    epochs: int = 10
    negatives: int = 5
    learning_rate: float = 0.025
    lambdas: dict[PairKind, float] = field(default_factory=dict)
    min_count: int = 5
    power: float = 0.75
    seed: int = 1
    threads: int = 1
    dtype: str = "float32"

    def validate(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.negatives < 1:
            raise ValueError(f"negatives must be >= 1, got {self.negatives}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.min_count < 1:
            raise ValueError(f"min_count must be >= 1, got {self.min_count}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if PairKind.JI in self.lambdas:
            raise ValueError("the JI kind has fixed weight 1; set side kinds only")
        for kind, lam in self.lambdas.items():
            if lam < 0:
                raise ValueError(f"lambda for {kind.name} must be >= 0, got {lam}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def enabled_kinds(self) -> tuple[PairKind, ...]:
        side = tuple(k for k in SIDE_KINDS if self.lambdas.get(k, 0.0) > 0.0)
        return (PairKind.JI,) + side

    def lambda_vector(self) -> np.ndarray:
        lam = np.zeros(_kernel.N_KINDS, dtype=np.float64)
        lam[int(PairKind.JI)] = 1.0
        for kind, value in self.lambdas.items():
            lam[int(kind)] = value
        return lam

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


class EmbeddingModel:
    """Input and output vector tables, one row per vocabulary token."""

    def __init__(self, vocabulary: Vocabulary, w_in: np.ndarray, w_out: np.ndarray):
        if w_in.shape != w_out.shape:
            raise ValueError(f"table shapes differ: {w_in.shape} vs {w_out.shape}")
        if w_in.shape[0] != len(vocabulary):
            raise ValueError(
                f"{w_in.shape[0]} rows for a vocabulary of {len(vocabulary)} tokens"
            )
        self.vocabulary = vocabulary
        self.w_in = w_in
        self.w_out = w_out

    @property
    def dim(self) -> int:
        return self.w_in.shape[1]

    def __len__(self) -> int:
        return self.w_in.shape[0]


def init_model(
    vocabulary: Vocabulary, dim: int, seed: int, dtype=np.float32
) -> EmbeddingModel:
    """Fresh model: input rows uniform in [-0.5/dim, 0.5/dim), output rows zero."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    bound = 0.5 / dim
    w_in = rng.uniform(-bound, bound, size=(len(vocabulary), dim)).astype(dtype)
    w_out = np.zeros((len(vocabulary), dim), dtype=dtype)
    return EmbeddingModel(vocabulary, w_in, w_out)


def _check_pair(model: EmbeddingModel, pair: TrainingPair, negatives) -> np.ndarray:
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.size == 0:
        raise ValueError("negatives must be nonempty")
    v = len(model)
    for idx in (pair.input_index, pair.output_index, *negatives.tolist()):
        if not 0 <= idx < v:
            raise IndexError(f"index {idx} out of range for vocabulary of {v}")
    if (negatives == pair.output_index).any():
        raise ValueError("negatives must not contain the positive output index")
    return negatives


def pair_loss(model: EmbeddingModel, pair: TrainingPair, negatives) -> float:
    """SGNS loss of one positive pair against its sampled negatives."""
    negatives = _check_pair(model, pair, negatives)
    x = model.w_in[pair.input_index].astype(np.float64)
    s_pos = float(model.w_out[pair.output_index].astype(np.float64) @ x)
    loss = -_log_sigmoid(s_pos)
    for n in negatives:
        s = float(model.w_out[n].astype(np.float64) @ x)
        loss += -_log_sigmoid(-s)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss for pair {pair}")
    return loss


def pair_gradients(
    model: EmbeddingModel, pair: TrainingPair, negatives
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss and analytic gradients for one pair.

    Returns ``(loss, grad_input_row, grad_output_row, grad_negative_rows)``
    in double precision, all computed from the current (pre-update) tables.
    """
    negatives = _check_pair(model, pair, negatives)
    x = model.w_in[pair.input_index].astype(np.float64)
    out_row = model.w_out[pair.output_index].astype(np.float64)
    neg_rows = model.w_out[negatives].astype(np.float64)

    s_pos = float(out_row @ x)
    g_pos = _sigmoid(s_pos) - 1.0
    loss = -_log_sigmoid(s_pos)
    s_neg = neg_rows @ x
    g_neg = np.array([_sigmoid(s) for s in s_neg])
    loss += sum(-_log_sigmoid(-s) for s in s_neg)

    grad_in = g_pos * out_row + g_neg @ neg_rows
    grad_out = g_pos * x
    grad_negs = g_neg[:, None] * x[None, :]
    return loss, grad_in, grad_out, grad_negs


def sgns_step(
    model: EmbeddingModel,
    pair: TrainingPair,
    negatives,
    learning_rate: float,
    kind_weight: float = 1.0,
) -> float:
    """One gradient step on one pair; returns the loss before the update.

    A kind weight of zero computes the loss but leaves the model untouched.
    """
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
    if kind_weight == 0.0:
        return pair_loss(model, pair, negatives)
    loss, grad_in, grad_out, grad_negs = pair_gradients(model, pair, negatives)
    eta = kind_weight * learning_rate
    negatives = np.asarray(negatives, dtype=np.int64)

    model.w_out[pair.output_index] -= (eta * grad_out).astype(model.w_out.dtype)
    for q, n in enumerate(negatives):
        model.w_out[n] -= (eta * grad_negs[q]).astype(model.w_out.dtype)
    model.w_in[pair.input_index] -= (eta * grad_in).astype(model.w_in.dtype)

    touched = np.concatenate(([pair.input_index, pair.output_index], negatives))
    if not (
        np.isfinite(model.w_in[pair.input_index]).all()
        and np.isfinite(model.w_out[touched[1:]]).all()
    ):
        raise TrainingDiverged(f"non-finite update for pair {pair}")
    return loss


def _log_sigmoid(z: float) -> float:
    if z >= 0.0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


def _sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass
class EncodedCorpus:
    """Training sequences flattened for the compiled kernel."""

    items_flat: np.ndarray     # int32, all sequences concatenated
    metas_flat: np.ndarray     # int32 (n_attrs, total), -1 = missing
    offsets: np.ndarray        # int64 (n_sessions + 1)
    pairs_per_session: np.ndarray  # int64

    @property
    def n_sessions(self) -> int:
        return self.offsets.shape[0] - 1


def encode_corpus(
    sequences: Sequence[Sequence[str]],
    vocabulary: Vocabulary,
    metadata: Sequence[MetadataMap],
    window: int,
    enabled: Sequence[PairKind],
) -> EncodedCorpus:
    """Index-encode sequences (dropping out-of-vocabulary items) and count pairs."""
    encoded = [vocabulary.encode(seq) for seq in sequences]
    offsets = np.zeros(len(encoded) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(e) for e in encoded])
    items_flat = (
        np.concatenate(encoded).astype(np.int32)
        if offsets[-1] > 0
        else np.empty(0, dtype=np.int32)
    )
    table = vocabulary.metadata_table(metadata)
    if table.shape[0] > 0 and items_flat.shape[0] > 0:
        metas_flat = np.ascontiguousarray(table[:, items_flat])
    else:
        metas_flat = np.full((table.shape[0], items_flat.shape[0]), -1, dtype=np.int32)
    mask = kinds_mask(enabled)
    counts = np.zeros(len(encoded), dtype=np.int64)
    for s in range(len(encoded)):
        a, b = offsets[s], offsets[s + 1]
        counts[s] = _kernel.count_pairs(items_flat[a:b], metas_flat[:, a:b], window, mask)
    return EncodedCorpus(items_flat, metas_flat, offsets, counts)


def train(
    split: SplitCorpus,
    metadata: Sequence[MetadataMap] | None,
    params: HyperParams,
    vocabulary: Vocabulary | None = None,
    log_path: str | None = None,
) -> EmbeddingModel:
    """Train embeddings on the split's training sequences.

    Sessions are reshuffled each epoch with the run seed; the learning rate
    decays linearly over the total pair count of the whole run.  With one
    thread the result is fully deterministic; with more threads rows are
    updated lock-free and runs are only statistically reproducible.
    """
    params.validate()
    metadata = list(metadata) if metadata else []
    enabled = params.enabled_kinds()
    side_on = len(enabled) > 1
    if side_on and not metadata:
        raise ValueError("side-information kinds enabled but no metadata given")
    used_meta = metadata if side_on else []
    if vocabulary is None:
        vocabulary = build_vocabulary(
            split.train_sessions, used_meta, min_count=params.min_count
        )

    corpus = encode_corpus(
        split.train_sessions, vocabulary, used_meta, params.window, enabled
    )
    mask = kinds_mask(enabled)
    n_ji = 0
    for s in range(corpus.n_sessions):
        a, b = corpus.offsets[s], corpus.offsets[s + 1]
        n_ji += _kernel.count_kind(
            corpus.items_flat[a:b], corpus.metas_flat[:, a:b], params.window, mask,
            int(PairKind.JI),
        )
        if n_ji:
            break
    if n_ji == 0:
        raise ValueError("no item-context pairs in the training corpus")

    sampler = build_negative_sampler(vocabulary, params.power)
    model = init_model(vocabulary, params.dim, params.seed, dtype=params.np_dtype)
    lam = params.lambda_vector()
    per_epoch = int(corpus.pairs_per_session.sum())
    total_pairs = float(params.epochs * per_epoch)
    shuffle_rng = np.random.default_rng([params.seed, 0xC0FFEE])

    if params.threads > 1:
        import numba

        numba.set_num_threads(params.threads)
        epoch_fn = _kernel.train_epoch_parallel
    else:
        epoch_fn = _kernel.train_epoch_serial

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        done = 0
        for epoch in range(params.epochs):
            order = shuffle_rng.permutation(corpus.n_sessions).astype(np.int64)
            sizes = corpus.pairs_per_session[order]
            pair_offsets = done + np.concatenate(([0], np.cumsum(sizes)[:-1]))
            loss_out = np.zeros((corpus.n_sessions, _kernel.N_KINDS), dtype=np.float64)
            cnt_out = np.zeros((corpus.n_sessions, _kernel.N_KINDS), dtype=np.int64)
            epoch_fn(
                model.w_in, model.w_out, corpus.items_flat, corpus.metas_flat,
                corpus.offsets, order, pair_offsets.astype(np.int64),
                params.window, mask, lam, params.negatives, sampler.cum,
                params.learning_rate, LR_FLOOR_FRACTION, max(total_pairs, 1.0),
                np.uint64(params.seed & (2**64 - 1)), np.uint64(epoch),
                loss_out, cnt_out,
            )
            done += int(sizes.sum())
            if not (np.isfinite(model.w_in).all() and np.isfinite(model.w_out).all()):
                raise TrainingDiverged(
                    f"non-finite embeddings after epoch {epoch}; "
                    "lower the learning rate"
                )
            kind_loss = loss_out.sum(axis=0)
            kind_cnt = cnt_out.sum(axis=0)
            record = {
                "epoch": epoch,
                "pairs": int(kind_cnt.sum()),
                "mean_loss": {
                    PairKind(k).name: kind_loss[k] / kind_cnt[k]
                    for k in range(_kernel.N_KINDS)
                    if kind_cnt[k] > 0
                },
            }
            logger.info(
                "epoch %d: %d pairs, mean loss %s", epoch, record["pairs"],
                {k: round(v, 4) for k, v in record["mean_loss"].items()},
            )
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return model


def save_embeddings(model: EmbeddingModel, path: str, which: str = "input") -> None:
    """Write vectors as text: a ``V D`` header then one ``token v1 .. vD`` line each.

    ``which`` selects the input table, the output table, or both; with
    ``both`` the output table goes to ``<path>.out``.  Tokens containing
    whitespace cannot be represented and are rejected.
    """
    if which not in ("input", "output", "both"):
        raise ValueError(f"which must be input, output or both, got {which!r}")
    for token in model.vocabulary.tokens:
        if any(ch.isspace() for ch in token):
            raise ValueError(f"token {token!r} contains whitespace; cannot save")
    fmt = "%.9g" if model.w_in.dtype == np.float32 else "%.17g"

    def _write(table: np.ndarray, target: str) -> None:
        with open(target, "w", encoding="utf-8") as fh:
            fh.write(f"{table.shape[0]} {table.shape[1]}\n")
            for i, token in enumerate(model.vocabulary.tokens):
                vals = " ".join(fmt % v for v in table[i])
                fh.write(f"{token} {vals}\n")

    if which in ("input", "both"):
        _write(model.w_in, path)
    if which == "output":
        _write(model.w_out, path)
    elif which == "both":
        _write(model.w_out, f"{path}.out")


def load_embeddings(path: str, dtype=np.float32) -> EmbeddingModel:
    """Read a model back from the text format written by ``save_embeddings``.

    Tokens containing the metadata separator are classified as metadata
    tokens (item ids cannot contain it).  If ``<path>.out`` exists it is
    loaded as the output table, otherwise the output table is zero.
    """
    tokens, table = _read_table(path, dtype)
    is_meta = [META_SEP in t for t in tokens]
    vocab = Vocabulary(tokens, [0] * len(tokens), is_meta)
    out_path = f"{path}.out"
    if os.path.exists(out_path):
        out_tokens, w_out = _read_table(out_path, dtype)
        if out_tokens != tokens or w_out.shape != table.shape:
            raise ValueError(f"{out_path}: does not match {path}")
    else:
        w_out = np.zeros_like(table)
    return EmbeddingModel(vocab, table, w_out)


def _read_table(path: str, dtype) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: header must be 'V D', got {header!r}")
        v, d = int(header[0]), int(header[1])
        tokens: list[str] = []
        table = np.empty((v, d), dtype=dtype)
        row = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            if row >= v:
                raise ValueError(f"{path}: header says {v} rows, found more")
            parts = line.rstrip("\n").split(" ")
            if len(parts) != d + 1:
                raise ValueError(
                    f"{path}:{lineno}: expected {d} values, found {len(parts) - 1}"
                )
            tokens.append(parts[0])
            table[row] = [float(x) for x in parts[1:]]
            row += 1
        if row != v:
            raise ValueError(f"{path}: header says {v} rows, found {row}")
    return tokens, table
