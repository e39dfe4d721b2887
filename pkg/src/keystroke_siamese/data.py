"""Keystroke logs: containers, delimited-file IO, synthetic typists, user splits."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ConfigurationError, EmptyDatasetError, SchemaError, TooShortError
from .seeding import derive_rng

log = logging.getLogger(__name__)

DEFAULT_COLUMNS = {
    "user_id": "user_id",
    "session_id": "session_id",
    "press_time": "press_time",
    "release_time": "release_time",
    "keycode": "keycode",
}

# Header names used by the Aalto free-text keystroke exports.
AALTO_COLUMNS = {
    "user_id": "PARTICIPANT_ID",
    "session_id": "TEST_SECTION_ID",
    "press_time": "PRESS_TIME",
    "release_time": "RELEASE_TIME",
    "keycode": "KEYCODE",
}


@dataclass(frozen=True)
class KeystrokeEvent:
    keycode: int
    press_time: float
    release_time: float

    def __post_init__(self):
        if not 0 <= self.keycode <= 255:
            raise ValueError(f"keycode {self.keycode} outside 0-255")
        if self.release_time < self.press_time:
            raise ValueError("release_time precedes press_time")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class KeystrokeSequence:
    """One typing session of one user, stored column-wise.

    ``keycodes``, ``press`` and ``release`` are read-only arrays of equal
    length; times are milliseconds. Use :attr:`events` for a per-key view.
    """

    user_id: str
    session_id: str
    keycodes: np.ndarray
    press: np.ndarray
    release: np.ndarray

    def __post_init__(self):
        kc = _frozen(self.keycodes, np.int64)
        pr = _frozen(self.press, np.float64)
        rl = _frozen(self.release, np.float64)
        if not (kc.ndim == pr.ndim == rl.ndim == 1 and kc.shape == pr.shape == rl.shape):
            raise ValueError("keycodes, press and release must be 1-d arrays of equal length")
        if len(kc) < 2:
            raise TooShortError(f"sequence {self.user_id}/{self.session_id} has {len(kc)} events, need >= 2")
        if kc.min() < 0 or kc.max() > 255:
            raise ValueError("keycode outside 0-255")
        if np.any(rl < pr):
            raise ValueError("release_time precedes press_time")
        if np.any(np.diff(pr) < 0):
            raise ValueError("events must be ordered by press_time")
        object.__setattr__(self, "keycodes", kc)
        object.__setattr__(self, "press", pr)
        object.__setattr__(self, "release", rl)

    @classmethod
    def from_events(cls, user_id, session_id, events: Iterable[KeystrokeEvent]) -> KeystrokeSequence:
        events = list(events)
        return cls(
            user_id,
            session_id,
            [e.keycode for e in events],
            [e.press_time for e in events],
            [e.release_time for e in events],
        )

    @property
    def events(self) -> list[KeystrokeEvent]:
        return [
            KeystrokeEvent(int(k), float(p), float(r))
            for k, p, r in zip(self.keycodes, self.press, self.release)
        ]

    def __len__(self):
        return len(self.keycodes)

    def __eq__(self, other):
        if not isinstance(other, KeystrokeSequence):
            return NotImplemented
        return (
            self.user_id == other.user_id
            and self.session_id == other.session_id
            and np.array_equal(self.keycodes, other.keycodes)
            and np.array_equal(self.press, other.press)
            and np.array_equal(self.release, other.release)
        )

    __hash__ = None


@dataclass(frozen=True)
class UserCollection:
    """Sequences grouped by user, in first-appearance order.

    ``rejected_rows`` and ``rejections`` carry the parse report and are
    ignored by equality.
    """

    users: Mapping[str, tuple[KeystrokeSequence, ...]]
    rejected_rows: int = field(default=0, compare=False)
    rejections: Mapping[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "users", {u: tuple(s) for u, s in self.users.items()})
        for u, seqs in self.users.items():
            if not seqs:
                raise ValueError(f"user {u!r} has no sequences")

    def __len__(self):
        return len(self.users)

    def __iter__(self) -> Iterator[str]:
        return iter(self.users)

    def __getitem__(self, user_id) -> tuple[KeystrokeSequence, ...]:
        return self.users[user_id]

    @property
    def user_ids(self) -> list[str]:
        return list(self.users)

    @property
    def num_sequences(self) -> int:
        return sum(len(s) for s in self.users.values())

    def subset(self, user_ids: Iterable[str]) -> UserCollection:
        return UserCollection({u: self.users[u] for u in user_ids})

    def sequences(self) -> Iterator[KeystrokeSequence]:
        for seqs in self.users.values():
            yield from seqs


# ---------------------------------------------------------------------------
# delimited text IO
# ---------------------------------------------------------------------------


def _resolve_columns(column_map):
    cols = dict(DEFAULT_COLUMNS)
    if column_map:
        unknown = set(column_map) - set(DEFAULT_COLUMNS)
        if unknown:
            raise ConfigurationError(f"unknown column roles: {sorted(unknown)}")
        cols.update(column_map)
    return cols


def _data_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix in (".txt", ".tsv", ".csv"))
        if not files:
            raise EmptyDatasetError(f"no data files in {path}")
        return files
    return [path]


def parse_dataset(path, column_map: Mapping[str, str] | None = None, delimiter: str = "\t") -> UserCollection:
    """Read keystroke rows from a delimited file (or a directory of them).

    Each row is one keystroke. Rows that fail to parse or that violate the
    event invariants are rejected individually and tallied in
    ``UserCollection.rejections``; sessions left with fewer than two
    keystrokes are dropped and tallied as ``short_sequence``.

    Raises:
        OSError: the path cannot be read.
        SchemaError: a mapped column is absent from a header.
        EmptyDatasetError: no valid sequence remains.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    cols = _resolve_columns(column_map)
    reasons: Counter = Counter()
    # user -> session -> list of (press, release, keycode, row order)
    grouped: dict[str, dict[str, list]] = {}

    for file in _data_files(path):
        with open(file, newline="", encoding="utf-8", errors="replace") as fh:
            reader = csv.reader(fh, delimiter=delimiter)
            header = next(reader, None)
            if header is None:
                continue
            header = [h.strip() for h in header]
            missing = [c for c in cols.values() if c not in header]
            if missing:
                raise SchemaError(f"{file}: missing columns {missing}")
            idx = {role: header.index(name) for role, name in cols.items()}
            width = max(idx.values())
            for n, row in enumerate(reader):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) <= width:
                    reasons["missing_field"] += 1
                    continue
                try:
                    press = float(row[idx["press_time"]])
                    release = float(row[idx["release_time"]])
                    keycode_f = float(row[idx["keycode"]])
                except ValueError:
                    reasons["bad_number"] += 1
                    continue
                if not (math.isfinite(press) and math.isfinite(release) and math.isfinite(keycode_f)):
                    reasons["bad_number"] += 1
                    continue
                if not keycode_f.is_integer():
                    reasons["bad_number"] += 1
                    continue
                keycode = int(keycode_f)
                if not 0 <= keycode <= 255:
                    reasons["keycode_range"] += 1
                    continue
                if release < press:
                    reasons["negative_hold"] += 1
                    continue
                user = row[idx["user_id"]].strip()
                session = row[idx["session_id"]].strip()
                grouped.setdefault(user, {}).setdefault(session, []).append((press, release, keycode, n))

    rejected_rows = sum(reasons.values())
    users: dict[str, list[KeystrokeSequence]] = {}
    for user, sessions in grouped.items():
        for session, rows in sessions.items():
            if len(rows) < 2:
                reasons["short_sequence"] += 1
                continue
            rows.sort(key=lambda r: (r[0], r[3]))
            arr = np.array([r[:3] for r in rows], dtype=np.float64)
            users.setdefault(user, []).append(
                KeystrokeSequence(user, session, arr[:, 2].astype(np.int64), arr[:, 0], arr[:, 1])
            )
    if not users:
        raise EmptyDatasetError(f"no valid sequences in {path}")
    if reasons:
        log.warning("%s: rejected %s", path, dict(reasons))
    return UserCollection(users, rejected_rows=rejected_rows, rejections=dict(reasons))


def format_ms(t: float) -> str:
    """Integral milliseconds print without a fractional part; others as repr."""
    t = float(t)
    if t.is_integer() and abs(t) < 2**53:
        return str(int(t))
    return repr(t)


def write_dataset(collection: UserCollection, path, column_map=None, delimiter: str = "\t") -> None:
    cols = _resolve_columns(column_map)
    order = ("user_id", "session_id", "press_time", "release_time", "keycode")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([cols[c] for c in order])
        for seq in collection.sequences():
            for k, p, r in zip(seq.keycodes, seq.press, seq.release):
                w.writerow([seq.user_id, seq.session_id, format_ms(p), format_ms(r), int(k)])


# ---------------------------------------------------------------------------
# synthetic typists
# ---------------------------------------------------------------------------

# Space plus A-Z as ASCII codes, weighted by approximate English frequency.
ALPHABET = np.array([32] + list(range(65, 91)), dtype=np.int64)
_LETTER_FREQ = np.array(
    [8.2, 1.5, 2.8, 4.3, 12.7, 2.2, 2.0, 6.1, 7.0, 0.15, 0.77, 4.0, 2.4,
     6.7, 7.5, 1.9, 0.095, 6.0, 6.3, 9.1, 2.8, 0.98, 2.4, 0.15, 2.0, 0.074]
)
KEY_PROBS = np.concatenate([[18.0], _LETTER_FREQ])
KEY_PROBS = KEY_PROBS / KEY_PROBS.sum()


@dataclass(frozen=True)
class SyntheticSpec:
    """Population parameters for :func:`generate_synthetic`.

    Every user gets a persistent profile: a hold-time mean per key and a
    press-to-press mean per digraph bucket, both log-normally scattered
    around user-level tempos. Each keystroke then adds Gaussian jitter with
    standard deviation ``noise_scale * user_jitter * mean``.
    """

    num_users: int = 100
    sequences_per_user: int = 15
    keys_per_sequence: tuple[int, int] = (50, 80)
    hold_mean_ms: float = 100.0
    interkey_mean_ms: float = 180.0
    user_spread: float = 0.3
    key_spread: float = 0.25
    jitter_spread: float = 0.3
    noise_scale: float = 0.3
    digraph_buckets: int = 8
    fixed_text: bool = False
    user_prefix: str = "u"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.keys_per_sequence
        if self.num_users < 1 or self.sequences_per_user < 1:
            raise ConfigurationError("num_users and sequences_per_user must be >= 1")
        if lo < 2 or lo > hi:
            raise ConfigurationError(f"invalid keys_per_sequence range {self.keys_per_sequence}")
        if self.hold_mean_ms <= 0 or self.interkey_mean_ms <= 0:
            raise ConfigurationError("latency means must be strictly positive")
        if min(self.user_spread, self.key_spread, self.jitter_spread, self.noise_scale) < 0:
            raise ConfigurationError("spreads and noise scale must be non-negative")
        if self.digraph_buckets < 1:
            raise ConfigurationError("digraph_buckets must be >= 1")


def digraph_bucket(prev_keys: np.ndarray, next_keys: np.ndarray, buckets: int) -> np.ndarray:
    return (prev_keys * 31 + next_keys) % buckets


def generate_synthetic(spec: SyntheticSpec) -> UserCollection:
    """Draw a reproducible population of synthetic typists.

    The number of random draws does not depend on ``noise_scale``, so two
    specs differing only in noise share profiles and texts for the same seed.
    """
    rng = derive_rng(spec.seed, "synthetic")
    lo, hi = spec.keys_per_sequence
    n_keys = len(ALPHABET)
    width = len(str(spec.num_users - 1))
    users = {}
    for ui in range(spec.num_users):
        hold_tempo = spec.hold_mean_ms * math.exp(spec.user_spread * rng.standard_normal())
        flight_tempo = spec.interkey_mean_ms * math.exp(spec.user_spread * rng.standard_normal())
        key_hold = hold_tempo * np.exp(spec.key_spread * rng.standard_normal(n_keys))
        bucket_flight = flight_tempo * np.exp(spec.key_spread * rng.standard_normal(spec.digraph_buckets))
        hold_jitter, flight_jitter = np.exp(spec.jitter_spread * rng.standard_normal(2))

        shared_len = int(rng.integers(lo, hi + 1))
        shared_text = rng.choice(n_keys, size=shared_len, p=KEY_PROBS)
        user_id = f"{spec.user_prefix}{ui:0{width}d}"
        seqs = []
        for si in range(spec.sequences_per_user):
            n = int(rng.integers(lo, hi + 1))
            text = rng.choice(n_keys, size=n, p=KEY_PROBS)
            if spec.fixed_text:
                text, n = shared_text, shared_len
            hold_noise = rng.standard_normal(n)
            flight_noise = rng.standard_normal(n - 1)

            codes = ALPHABET[text]
            hold_mu = key_hold[text]
            flight_mu = bucket_flight[digraph_bucket(codes[:-1], codes[1:], spec.digraph_buckets)]
            hold = np.maximum(1.0, np.rint(hold_mu * (1 + spec.noise_scale * hold_jitter * hold_noise)))
            flight = np.maximum(1.0, np.rint(flight_mu * (1 + spec.noise_scale * flight_jitter * flight_noise)))

            start = 1_600_000_000_000.0 + ui * 10_000_000.0 + si * 100_000.0
            press = start + np.concatenate([[0.0], np.cumsum(flight)])
            seqs.append(KeystrokeSequence(user_id, f"s{si:02d}", codes, press, press + hold))
        users[user_id] = seqs
    return UserCollection(users)


def split_users(collection: UserCollection, train_fraction: float, seed: int) -> tuple[UserCollection, UserCollection]:
    """Partition users (never sequences) into disjoint train and test sets."""
    if not 0 < train_fraction < 1:
        raise ConfigurationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(collection) == 0:
        raise EmptyDatasetError("cannot split an empty collection")
    ids = collection.user_ids
    n_train = int(round(len(ids) * train_fraction))
    perm = derive_rng(seed, "split").permutation(len(ids))
    train = set(perm[:n_train].tolist())
    train_ids = [u for i, u in enumerate(ids) if i in train]
    test_ids = [u for i, u in enumerate(ids) if i not in train]
    return collection.subset(train_ids), collection.subset(test_ids)
