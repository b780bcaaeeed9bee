"""Session ingestion, vocabulary construction and train/validation/test splitting.

The input corpus is a set of user sessions, each an ordered sequence of item
tokens, plus optional per-item categorical metadata (e.g. the artist of a
track).  Items and metadata values are embedded in one shared index space, so
the vocabulary covers the union of both token kinds.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Separator between an attribute name and its value in metadata tokens.
# Item ids must not contain it; this is what keeps the two namespaces disjoint.
META_SEP = ":"


@dataclass(frozen=True)
class Session:
    """One user session: an ordered, time-ascending list of item tokens."""

    user_id: str
    items: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.items)


class MetadataMap:
    """Maps item tokens to namespaced metadata tokens for one attribute.

    Values are stored as ``"<name><sep><value>"`` so that metadata tokens can
    never collide with item ids (item ids containing the separator are
    rejected at vocabulary build time).
    """

    def __init__(self, name: str, mapping: dict[str, str] | None = None):
        if META_SEP in name:
            raise ValueError(f"attribute name must not contain {META_SEP!r}: {name!r}")
        self.name = name
        self._map: dict[str, str] = {}
        if mapping:
            for item, value in mapping.items():
                self.add(item, value)

    def add(self, item: str, value: str) -> None:
        token = f"{self.name}{META_SEP}{value}"
        existing = self._map.get(item)
        if existing is not None and existing != token:
            raise ValueError(
                f"conflicting metadata for item {item!r}: {existing!r} vs {token!r}"
            )
        self._map[item] = token

    def get(self, item: str) -> str | None:
        return self._map.get(item)

    def __contains__(self, item: str) -> bool:
        return item in self._map

    def __len__(self) -> int:
        return len(self._map)


def load_sessions(path: str) -> list[Session]:
    """Read sessions from a UTF-8 file with lines ``user_id<TAB>item1 item2 ...``.

    One line is one session; a user with several sessions contributes several
    lines.  Item order is preserved exactly as read.

    Raises:
        ValueError: on a malformed line (reported with its line number) or an
            empty file.
    """
    sessions: list[Session] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            user_id, sep, rest = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'user<TAB>items', got {line!r}")
            items = tuple(rest.split())
            if not items:
                raise ValueError(f"{path}:{lineno}: session for user {user_id!r} has no items")
            sessions.append(Session(user_id=user_id, items=items))
    if not sessions:
        raise ValueError(f"{path}: no sessions found")
    return sessions


def load_metadata(path: str, name: str) -> MetadataMap:
    """Read one attribute map from a TSV file with lines ``item_id<TAB>value``.

    Duplicate rows with the same value are accepted; conflicting values for
    the same item are an error naming the item.
    """
    meta = MetadataMap(name)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            item, sep, value = line.partition("\t")
            if not sep or not item or not value:
                raise ValueError(f"{path}:{lineno}: expected 'item<TAB>value', got {line!r}")
            try:
                meta.add(item, value)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return meta


class Vocabulary:
    """Bijective token <-> dense index map over items and metadata tokens.

    Indices run 0..V-1.  Item tokens come first, ordered by descending
    frequency (ties by token string), followed by metadata tokens in the same
    order.  Frequencies count token occurrences in the training sequences the
    vocabulary was built from; a metadata token occurs wherever one of its
    items does.
    """

    def __init__(
        self,
        tokens: Sequence[str],
        frequencies: Sequence[int],
        is_metadata: Sequence[bool],
    ):
        if len(tokens) != len(frequencies) or len(tokens) != len(is_metadata):
            raise ValueError("tokens, frequencies and is_metadata must align")
        self._tokens: list[str] = list(tokens)
        self._index: dict[str, int] = {t: i for i, t in enumerate(self._tokens)}
        if len(self._index) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.frequencies = np.asarray(frequencies, dtype=np.int64)
        self.is_metadata = np.asarray(is_metadata, dtype=bool)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index[token]

    def token(self, index: int) -> str:
        return self._tokens[index]

    @property
    def tokens(self) -> list[str]:
        return self._tokens

    @property
    def n_items(self) -> int:
        return int((~self.is_metadata).sum())

    def encode(self, items: Iterable[str]) -> np.ndarray:
        """Map item tokens to indices, dropping out-of-vocabulary positions."""
        idx = [self._index[t] for t in items if t in self._index]
        return np.asarray(idx, dtype=np.int32)

    def metadata_table(self, metadata: Sequence[MetadataMap]) -> np.ndarray:
        """Per-attribute metadata index for every vocabulary index.

        Returns an ``(n_attrs, V)`` int32 array where entry ``[a, i]`` is the
        vocabulary index of attribute a's token for item i, or -1 when item i
        has no value (metadata indices themselves map to -1).  Aligning a
        session is then a gather: ``table[:, item_indices]``.
        """
        table = np.full((len(metadata), len(self._tokens)), -1, dtype=np.int32)
        for a, meta in enumerate(metadata):
            for i, token in enumerate(self._tokens):
                if self.is_metadata[i]:
                    continue
                value = meta.get(token)
                if value is not None and value in self._index:
                    table[a, i] = self._index[value]
        return table


def build_vocabulary(
    sequences: Iterable[Sequence[str]],
    metadata: Sequence[MetadataMap] | None = None,
    min_count: int = 5,
) -> Vocabulary:
    """Build the shared vocabulary over item tokens and their metadata tokens.

    Items occurring fewer than ``min_count`` times are dropped.  Metadata
    tokens of surviving items are always kept regardless of their own
    frequency: rare attributes are precisely the cold-start signal.

    Args:
        sequences: training item sequences (typically ``SplitCorpus.train_sessions``).
        metadata: attribute maps whose tokens join the vocabulary; None or
            empty builds an items-only vocabulary.
        min_count: minimum item frequency, >= 1.

    Raises:
        ValueError: if no item survives filtering, or an item id collides
            with the metadata namespace.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    metadata = list(metadata) if metadata else []

    item_counts: Counter[str] = Counter()
    for seq in sequences:
        item_counts.update(seq)
    kept = {t: c for t, c in item_counts.items() if c >= min_count}
    if not kept:
        raise ValueError(
            f"empty vocabulary: no item reaches min_count={min_count} "
            f"({len(item_counts)} distinct items seen)"
        )

    meta_counts: Counter[str] = Counter()
    for meta in metadata:
        for item, count in kept.items():
            token = meta.get(item)
            if token is not None:
                meta_counts[token] += count

    if metadata:
        for item in kept:
            if META_SEP in item:
                raise ValueError(
                    f"item id {item!r} contains the metadata separator {META_SEP!r}; "
                    "rename the item or the attribute"
                )
    collisions = set(kept) & set(meta_counts)
    if collisions:
        raise ValueError(f"tokens are both item and metadata: {sorted(collisions)[:5]}")

    item_tokens = sorted(kept, key=lambda t: (-kept[t], t))
    meta_tokens = sorted(meta_counts, key=lambda t: (-meta_counts[t], t))
    tokens = item_tokens + meta_tokens
    freqs = [kept[t] for t in item_tokens] + [meta_counts[t] for t in meta_tokens]
    flags = [False] * len(item_tokens) + [True] * len(meta_tokens)
    vocab = Vocabulary(tokens, freqs, flags)
    logger.info(
        "vocabulary: %d items + %d metadata tokens (min_count=%d dropped %d items)",
        len(item_tokens), len(meta_tokens), min_count, len(item_counts) - len(kept),
    )
    return vocab


PHASE_TUNING = "tuning"
PHASE_FINAL = "final"


@dataclass
class SplitCorpus:
    """Leave-last-out splits of the session corpus.

    In the tuning phase each session of length n contributes its first n-2
    items as training sequence, the (n-1)-th as validation target and the
    n-th as test target.  In the final phase the validation item is appended
    to the training sequence (train = first n-1 items) and only the test
    target is predicted.  Sessions with fewer than 3 items cannot yield all
    three parts and are excluded (counted, not an error).
    """

    phase: str
    train_sessions: list[tuple[str, ...]]
    valid_targets: list[str]
    test_targets: list[str]
    excluded: int = 0
    user_ids: list[str] = field(default_factory=list)

    @property
    def targets(self) -> list[str]:
        """The prediction targets for this phase."""
        return self.valid_targets if self.phase == PHASE_TUNING else self.test_targets

    def __len__(self) -> int:
        return len(self.train_sessions)


def split_sessions(sessions: Iterable[Session], phase: str) -> SplitCorpus:
    """Produce leave-last-out splits for the given phase.

    Raises:
        ValueError: on an unknown phase.
    """
    if phase not in (PHASE_TUNING, PHASE_FINAL):
        raise ValueError(f"phase must be {PHASE_TUNING!r} or {PHASE_FINAL!r}, got {phase!r}")
    train: list[tuple[str, ...]] = []
    valid: list[str] = []
    test: list[str] = []
    users: list[str] = []
    excluded = 0
    for s in sessions:
        n = len(s.items)
        if n < 3:
            excluded += 1
            continue
        if phase == PHASE_TUNING:
            train.append(s.items[: n - 2])
        else:
            train.append(s.items[: n - 1])
        valid.append(s.items[n - 2])
        test.append(s.items[n - 1])
        users.append(s.user_id)
    if excluded:
        logger.info("split: excluded %d sessions shorter than 3 items", excluded)
    return SplitCorpus(
        phase=phase,
        train_sessions=train,
        valid_targets=valid,
        test_targets=test,
        excluded=excluded,
        user_ids=users,
    )
