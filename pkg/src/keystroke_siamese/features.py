"""Timing features, fixed-length padding, and Siamese pair sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import KeystrokeSequence, UserCollection
from .errors import ConfigurationError, DomainError, ProtocolError, TooShortError

FEATURE_NAMES = ("hl", "il", "pl", "rl", "key")
FEATURE_DIM = len(FEATURE_NAMES)
HL, IL, PL, RL, KEY = range(FEATURE_DIM)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """N x 5 matrix, columns ``FEATURE_NAMES``; latencies in seconds."""

    user_id: str
    session_id: str
    rows: np.ndarray

    def __len__(self):
        return len(self.rows)


@dataclass(frozen=True, eq=False)
class PaddedInput:
    matrix: np.ndarray
    mask: np.ndarray
    original_length: int


@dataclass(frozen=True, eq=False)
class PairBatch:
    """A balanced batch of Siamese pairs; label 0 is genuine, 1 impostor."""

    left: np.ndarray
    left_mask: np.ndarray
    right: np.ndarray
    right_mask: np.ndarray
    labels: np.ndarray
    left_users: tuple
    right_users: tuple

    def __len__(self):
        return len(self.labels)


def normalize_keycode(code) -> float:
    if not 0 <= code <= 255:
        raise DomainError(f"keycode {code} outside 0-255")
    return code / 255


def extract_features(seq: KeystrokeSequence) -> FeatureSequence:
    """Per-key hold latency plus the transition to the next key.

    Row i holds HL of key i and IL, PL, RL of the pair (i, i+1). The last
    key has no successor, so its IL, PL and RL are zero.
    """
    n = len(seq.keycodes)
    if n < 2:
        raise TooShortError(f"need >= 2 keystrokes, got {n}")
    press, release = seq.press, seq.release
    rows = np.zeros((n, FEATURE_DIM))
    # differences taken in ms, where integral timestamps are exact
    rows[:, HL] = (release - press) / 1000.0
    rows[:-1, IL] = (press[1:] - release[:-1]) / 1000.0
    rows[:-1, PL] = (press[1:] - press[:-1]) / 1000.0
    rows[:-1, RL] = (release[1:] - release[:-1]) / 1000.0
    rows[:, KEY] = seq.keycodes / 255
    rows.setflags(write=False)
    return FeatureSequence(seq.user_id, seq.session_id, rows)


def pad_truncate(features: FeatureSequence | np.ndarray, M: int) -> PaddedInput:
    if M < 1:
        raise ConfigurationError(f"M must be >= 1, got {M}")
    rows = features.rows if isinstance(features, FeatureSequence) else np.asarray(features)
    n = len(rows)
    keep = min(n, M)
    matrix = np.zeros((M, rows.shape[1]))
    matrix[:keep] = rows[:keep]
    mask = np.zeros(M)
    mask[:keep] = 1.0
    return PaddedInput(matrix, mask, n)


def stack_padded(items: Sequence[PaddedInput]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.matrix for p in items]), np.stack([p.mask for p in items])


def genuine_pair_universe(n_sequences: int) -> int:
    """Unordered same-user pairs available from one user's sequences."""
    return n_sequences * (n_sequences - 1) // 2


class PairSampler:
    """Samples balanced pair batches from pre-padded training sequences.

    Features are extracted and padded once at construction; each call to
    :meth:`sample` only draws indices from ``rng``.
    """

    def __init__(self, users: UserCollection, M: int):
        if len(users) < 2:
            raise ProtocolError(f"pair sampling needs >= 2 users, got {len(users)}")
        short = [u for u in users if len(users[u]) < 2]
        if short:
            raise ProtocolError(f"pair sampling needs >= 2 sequences per user; {len(short)} users have fewer")
        self.M = M
        self.user_ids = users.user_ids
        padded = [pad_truncate(extract_features(s), M) for s in users.sequences()]
        self.x, self.mask = stack_padded(padded)
        counts = np.array([len(users[u]) for u in self.user_ids])
        self.offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.counts = counts

    def sample_indices(self, batch_size: int, rng: np.random.Generator):
        """Return (left, right, labels, left_user, right_user) index arrays."""
        if batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        n_gen = (batch_size + 1) // 2
        n_imp = batch_size // 2
        n_users = len(self.user_ids)

        gu = rng.integers(0, n_users, size=n_gen)
        a = np.empty(n_gen, dtype=np.int64)
        b = np.empty(n_gen, dtype=np.int64)
        for k, u in enumerate(gu):
            a[k], b[k] = rng.choice(self.counts[u], size=2, replace=False)
        g_left = self.offsets[gu] + a
        g_right = self.offsets[gu] + b

        iu = np.empty(n_imp, dtype=np.int64)
        iv = np.empty(n_imp, dtype=np.int64)
        for k in range(n_imp):
            iu[k], iv[k] = rng.choice(n_users, size=2, replace=False)
        i_left = self.offsets[iu] + rng.integers(0, self.counts[iu])
        i_right = self.offsets[iv] + rng.integers(0, self.counts[iv])

        left = np.concatenate([g_left, i_left])
        right = np.concatenate([g_right, i_right])
        labels = np.concatenate([np.zeros(n_gen, dtype=np.int64), np.ones(n_imp, dtype=np.int64)])
        return left, right, labels, np.concatenate([gu, iu]), np.concatenate([gu, iv])

    def sample(self, batch_size: int, rng: np.random.Generator) -> PairBatch:
        left, right, labels, lu, ru = self.sample_indices(batch_size, rng)
        return PairBatch(
            self.x[left],
            self.mask[left],
            self.x[right],
            self.mask[right],
            labels,
            tuple(self.user_ids[i] for i in lu),
            tuple(self.user_ids[i] for i in ru),
        )


def sample_pair_batch(train_users: UserCollection, batch_size: int, M: int, rng: np.random.Generator) -> PairBatch:
    return PairSampler(train_users, M).sample(batch_size, rng)


def write_features(features: Sequence[FeatureSequence], path, delimiter: str = "\t") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["user_id", "session_id", "index", *FEATURE_NAMES])
        for fs in features:
            for i, row in enumerate(fs.rows):
                w.writerow([fs.user_id, fs.session_id, i, *(repr(float(v)) for v in row)])
