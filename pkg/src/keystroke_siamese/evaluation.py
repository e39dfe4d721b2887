"""Open-set verification protocol: galleries, distance scores, per-user EER."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .data import KeystrokeSequence, UserCollection
from .errors import CheckpointIncompatibleError, ConfigurationError, KeystrokeError, ProtocolError
from .features import FEATURE_DIM, extract_features, pad_truncate, stack_padded
from .nn import embed_batch
from .seeding import derive_rng
from .training import ModelCheckpoint

log = logging.getLogger(__name__)

MAX_GALLERY = 10


@dataclass(frozen=True)
class ProtocolConfig:
    M: int = 50
    G: int = 5
    K: int = 100
    test_sequences_per_user: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.G <= MAX_GALLERY:
            raise ConfigurationError(f"G must lie in [1, {MAX_GALLERY}], got {self.G}")
        if self.K < 2:
            raise ConfigurationError(f"K must be >= 2, got {self.K}")
        if self.M < 1 or self.test_sequences_per_user < 1:
            raise ConfigurationError("M and test_sequences_per_user must be >= 1")


@dataclass(frozen=True, eq=False)
class UserScoreSet:
    user_id: str
    genuine_scores: np.ndarray
    impostor_scores: np.ndarray


@dataclass(frozen=True, eq=False)
class ProtocolAssignment:
    """Who is compared with what, for K enrolled users.

    Indices refer to positions in each user's sequence tuple.
    ``impostor_choice[u, v]`` picks which of user v's test sequences is the
    impostor query against user u; the diagonal is -1.
    """

    user_ids: tuple[str, ...]
    gallery: np.ndarray
    genuine: np.ndarray
    impostor_choice: np.ndarray

    @property
    def K(self):
        return len(self.user_ids)


@dataclass
class EvalReport:
    config: ProtocolConfig
    user_eers: dict[str, float]
    mean_eer: float
    std_eer: float
    n_genuine: int
    n_impostor: int
    roc: np.ndarray | None = None

    def summary_row(self) -> dict:
        c = self.config
        return {"M": c.M, "G": c.G, "K": c.K, "mean_EER": self.mean_eer, "std_EER": self.std_eer, "seed": c.seed}


class EmbedResult(NamedTuple):
    vectors: np.ndarray
    skipped: list[int]


# ---------------------------------------------------------------------------
# scores and error rates
# ---------------------------------------------------------------------------


def verification_scores(gallery, queries) -> np.ndarray:
    """Mean gallery-to-query Euclidean distance for each row of ``queries``."""
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if gallery.shape[0] == 0:
        raise ProtocolError("empty gallery")
    diff = gallery[:, None, :] - queries[None, :, :]
    return np.sqrt(np.einsum("gqh,gqh->gq", diff, diff)).mean(axis=0)


def verification_score(gallery, query) -> float:
    """Score of one query; lower means more likely genuine."""
    if len(gallery) == 0:
        raise ProtocolError("empty gallery")
    return float(verification_scores(gallery, np.asarray(query)[None])[0])


def _operating_points(genuine, impostor):
    """FAR/FRR at -inf and at every distinct pooled score (accept if score <= t)."""
    gen = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    thresholds = np.unique(np.concatenate([gen, imp]))
    fa = np.searchsorted(imp, thresholds, side="right")
    fr = len(gen) - np.searchsorted(gen, thresholds, side="right")
    fa = np.concatenate([[0], fa])
    fr = np.concatenate([[len(gen)], fr])
    return np.concatenate([[-np.inf], thresholds]), fa, fr


def compute_user_eer(genuine, impostor=None) -> float:
    """Equal error rate of one user's scores.

    Scores are distances: a comparison is accepted when ``score <= t``.
    Walking the thresholds upward, FAR rises and FRR falls; the EER is the
    point where they meet, linearly interpolated between the two operating
    points that bracket the crossing.
    """
    if isinstance(genuine, UserScoreSet):
        genuine, impostor = genuine.genuine_scores, genuine.impostor_scores
    n_gen, n_imp = len(genuine), len(impostor)
    if n_gen == 0 or n_imp == 0:
        raise ProtocolError("EER needs at least one genuine and one impostor score")
    _, fa, fr = _operating_points(genuine, impostor)
    # sign of FAR - FRR, exact in integers
    cross = fa * n_gen - fr * n_imp
    k = int(np.argmax(cross >= 0))
    far = fa / n_imp
    frr = fr / n_gen
    if cross[k] == 0:
        return float(far[k])
    d0 = far[k - 1] - frr[k - 1]
    d1 = far[k] - frr[k]
    s = -d0 / (d1 - d0)
    return float(far[k - 1] + s * (far[k] - far[k - 1]))


def roc_points(genuine, impostor, max_points: int = 1000) -> np.ndarray:
    """(threshold, FAR, FRR) rows, thinned to at most ``max_points``."""
    thr, fa, fr = _operating_points(genuine, impostor)
    rows = np.column_stack([thr, fa / len(impostor), fr / len(genuine)])
    if len(rows) > max_points:
        keep = np.unique(np.linspace(0, len(rows) - 1, max_points).round().astype(int))
        rows = rows[keep]
    return rows


# ---------------------------------------------------------------------------
# embedding and protocol
# ---------------------------------------------------------------------------


def embed_sequences(ckpt: ModelCheckpoint, seqs: Sequence[KeystrokeSequence], M: int | None = None) -> EmbedResult:
    """Inference-mode embeddings, row order following ``seqs``.

    ``M`` defaults to the checkpoint's training length; the recurrence is
    length-agnostic, so any ``M >= 1`` is accepted. Sequences whose features
    cannot be extracted are left out and their input positions returned in
    ``skipped``.
    """
    if ckpt.config.feature_dim != FEATURE_DIM:
        raise CheckpointIncompatibleError(
            f"checkpoint expects {ckpt.config.feature_dim} features, pipeline produces {FEATURE_DIM}"
        )
    M = ckpt.config.input_length if M is None else M
    padded, skipped = [], []
    for i, s in enumerate(seqs):
        try:
            padded.append(pad_truncate(extract_features(s), M))
        except KeystrokeError as exc:
            log.warning("skipping sequence %d: %s", i, exc)
            skipped.append(i)
    if not padded:
        return EmbedResult(np.empty((0, ckpt.config.lstm_units)), skipped)
    x, mask = stack_padded(padded)
    return EmbedResult(embed_batch(ckpt.params, ckpt.config, x, mask), skipped)


def build_protocol(test_users: UserCollection, cfg: ProtocolConfig) -> ProtocolAssignment:
    """Draw enrolled users, galleries and impostor queries for one seed.

    Each user's last ``test_sequences_per_user`` sequences are the fixed
    test set (genuine queries); the gallery is ``G`` sequences drawn without
    replacement from the rest. ``K`` users are drawn from the eligible ones
    and kept in collection order.
    """
    n_test = cfg.test_sequences_per_user
    eligible = [u for u in test_users if len(test_users[u]) >= cfg.G + n_test]
    if len(eligible) < cfg.K:
        raise ProtocolError(
            f"K={cfg.K} enrolled users requested but only {len(eligible)} users have >= {cfg.G + n_test} sequences"
        )
    rng = derive_rng(cfg.seed, "protocol")
    chosen = np.sort(rng.choice(len(eligible), size=cfg.K, replace=False))
    user_ids = tuple(eligible[i] for i in chosen)
    gallery = np.empty((cfg.K, cfg.G), dtype=np.int64)
    genuine = np.empty((cfg.K, n_test), dtype=np.int64)
    for k, u in enumerate(user_ids):
        n = len(test_users[u])
        gallery[k] = np.sort(rng.choice(n - n_test, size=cfg.G, replace=False))
        genuine[k] = np.arange(n - n_test, n)
    impostor = rng.integers(0, n_test, size=(cfg.K, cfg.K))
    np.fill_diagonal(impostor, -1)
    return ProtocolAssignment(user_ids, gallery, genuine, impostor)


def embed_users(ckpt: ModelCheckpoint, users: UserCollection, M: int, user_ids=None) -> dict[str, np.ndarray]:
    """Embeddings of every sequence of the given users, keyed by user id."""
    user_ids = list(users) if user_ids is None else list(user_ids)
    seqs = [s for u in user_ids for s in users[u]]
    vecs, skipped = embed_sequences(ckpt, seqs, M)
    if skipped:
        raise ProtocolError(f"{len(skipped)} sequences could not be embedded")
    out, pos = {}, 0
    for u in user_ids:
        n = len(users[u])
        out[u] = vecs[pos : pos + n].astype(np.float64)
        pos += n
    return out


def score_protocol(assign: ProtocolAssignment, embeddings: dict[str, np.ndarray]) -> list[UserScoreSet]:
    K = assign.K
    test = np.stack([embeddings[u][assign.genuine[k]] for k, u in enumerate(assign.user_ids)])
    out = []
    others = np.arange(K)
    for k, u in enumerate(assign.user_ids):
        gal = embeddings[u][assign.gallery[k]]
        mask = others != k
        imp_q = test[others[mask], assign.impostor_choice[k, mask]]
        scores = verification_scores(gal, np.concatenate([test[k], imp_q]))
        n_gen = test.shape[1]
        out.append(UserScoreSet(u, scores[:n_gen], scores[n_gen:]))
    return out


def evaluate(
    ckpt: ModelCheckpoint,
    test_users: UserCollection,
    cfg: ProtocolConfig,
    roc_max_points: int = 0,
    embeddings: dict[str, np.ndarray] | None = None,
) -> EvalReport:
    """Mean per-user EER of ``ckpt`` under the protocol ``cfg``.

    ``embeddings`` may supply precomputed per-user embeddings at ``cfg.M``
    (as from :func:`embed_users`); otherwise the needed users are embedded.
    """
    assign = build_protocol(test_users, cfg)
    if embeddings is None:
        embeddings = embed_users(ckpt, test_users, cfg.M, assign.user_ids)
    score_sets = score_protocol(assign, embeddings)
    eers = {s.user_id: compute_user_eer(s) for s in score_sets}
    values = np.array(list(eers.values()))
    roc = None
    if roc_max_points:
        roc = roc_points(
            np.concatenate([s.genuine_scores for s in score_sets]),
            np.concatenate([s.impostor_scores for s in score_sets]),
            roc_max_points,
        )
    return EvalReport(
        cfg,
        eers,
        float(values.mean()),
        float(values.std()),
        sum(len(s.genuine_scores) for s in score_sets),
        sum(len(s.impostor_scores) for s in score_sets),
        roc,
    )


def sweep(ckpt, test_users, M_list, G_list, K_list, seed: int = 0) -> list[EvalReport]:
    """Evaluate every (M, G, K) cell; embeddings are shared across cells of one M."""
    if max(K_list) > len(test_users):
        raise ProtocolError(f"max K={max(K_list)} exceeds {len(test_users)} available users")
    reports = []
    for M in M_list:
        cache = embed_users(ckpt, test_users, M)
        for G in G_list:
            for K in K_list:
                reports.append(evaluate(ckpt, test_users, ProtocolConfig(M=M, G=G, K=K, seed=seed), embeddings=cache))
    return reports


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ("M", "G", "K", "mean_EER", "std_EER", "seed")


def _writer(fh, delimiter):
    return csv.writer(fh, delimiter=delimiter, lineterminator="\n")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_summary(reports: Sequence[EvalReport], path, delimiter: str = "\t") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh, delimiter)
        w.writerow(SUMMARY_COLUMNS)
        for r in reports:
            row = r.summary_row()
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])


def write_user_eers(report: EvalReport, path, delimiter: str = "\t") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh, delimiter)
        w.writerow(["user_id", "EER"])
        for u, e in report.user_eers.items():
            w.writerow([u, _fmt(e)])


def write_roc(report: EvalReport, path, delimiter: str = "\t") -> None:
    if report.roc is None:
        raise ValueError("report has no ROC points")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh, delimiter)
        w.writerow(["threshold", "FAR", "FRR"])
        for t, far, frr in report.roc:
            w.writerow([_fmt(t), _fmt(far), _fmt(frr)])


def write_grid(reports: Sequence[EvalReport], path, K: int, delimiter: str = "\t") -> None:
    """M-by-G table of mean EER (percent) for one K."""
    cells = {(r.config.M, r.config.G): r.mean_eer for r in reports if r.config.K == K}
    Ms = sorted({m for m, _ in cells})
    Gs = sorted({g for _, g in cells})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh, delimiter)
        w.writerow(["M\\G", *Gs])
        for m in Ms:
            w.writerow([m, *(f"{100 * cells[(m, g)]:.2f}" for g in Gs)])


def config_dict(cfg: ProtocolConfig) -> dict:
    return asdict(cfg)
