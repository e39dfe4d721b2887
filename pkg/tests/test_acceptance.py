"""End-to-end acceptance checks, one test per criterion.

Each test records its outcome through the ``criterion`` fixture so the run
ends with one PASS/FAIL line per criterion. The desk-trained model is built
once per session and shared by the learning, gallery-size and scaling checks.
"""

import time

import numpy as np
import pytest
from oracles import contrastive, distance, eer_sweep, gallery_score

from keystroke_siamese.cli import main
from keystroke_siamese.data import KeystrokeSequence, SyntheticSpec, generate_synthetic, split_users
from keystroke_siamese.evaluation import (
    ProtocolConfig,
    build_protocol,
    compute_user_eer,
    embed_users,
    evaluate,
    score_protocol,
    sweep,
    verification_score,
)
from keystroke_siamese.features import HL, IL, PL, PairBatch, extract_features, pad_truncate
from keystroke_siamese.nn import (
    ModelConfig,
    TrainHyper,
    compute_gradients,
    contrastive_loss,
    euclidean_distance,
    init_params,
)
from keystroke_siamese.training import TrainConfig, init_checkpoint, load_checkpoint, train

# Desk schedule. Dropout is switched off and the step size lowered for this
# short run; the library defaults keep the full architecture (see README).
DESK = TrainConfig(
    epochs=50,
    batches_per_epoch=30,
    batch_size=64,
    M=50,
    seed=3,
    hyper=TrainHyper(learning_rate=0.005),
    model=ModelConfig(input_length=50, inter_layer_dropout=0.0, lstm_input_dropout=0.0, dtype="float32"),
)
DESK_PROTOCOL = ProtocolConfig(M=50, G=5, K=100, seed=1)


@pytest.fixture(scope="session")
def desk_population():
    pop = generate_synthetic(SyntheticSpec(num_users=400, sequences_per_user=15, noise_scale=0.3, seed=11))
    return split_users(pop, 0.75, seed=11)


@pytest.fixture(scope="session")
def desk_model(desk_population):
    train_users, _ = desk_population
    t0 = time.perf_counter()
    ckpt, _ = train(train_users, DESK)
    return ckpt, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------

def _padded(rng, B, M):
    lengths = rng.integers(1, M + 1, size=B)
    mask = (np.arange(M)[None] < lengths[:, None]).astype(float)
    return rng.random((B, M, 5)) * mask[:, :, None], mask


def _max_rel_error(params, cfg, batch, hyper, h=1e-5):
    _, grads = compute_gradients(params, cfg, batch, hyper)
    worst = 0.0
    for name, w in params.weights.items():
        num = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + h
            lp, _ = compute_gradients(params, cfg, batch, hyper)
            w[idx] = old - h
            lm, _ = compute_gradients(params, cfg, batch, hyper)
            w[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        rel = np.abs(grads[name] - num) / np.maximum(np.maximum(np.abs(grads[name]), np.abs(num)), 1e-8)
        worst = max(worst, float(rel.max()))
    return worst


def test_gradient_check_random_configs(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        H, M, B = int(rng.integers(1, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 5))
        cfg = ModelConfig(input_length=M, lstm_units=H, embedding_dim=H, inter_layer_dropout=0.0,
                          lstm_input_dropout=0.0)
        params = init_params(cfg, rng)
        for w in params.weights.values():
            w += 0.3 * rng.normal(size=w.shape)
        left, lm = _padded(rng, B, M)
        right, rm = _padded(rng, B, M)
        batch = PairBatch(left, lm, right, rm, rng.integers(0, 2, size=B), (), ())
        hyper = TrainHyper(margin=float(rng.uniform(0.5, 3.0)))
        worst = max(worst, _max_rel_error(params, cfg, batch, hyper))
    elapsed = time.perf_counter() - t0
    ok = criterion(1, worst < 1e-4 and elapsed < 60, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok, (worst, elapsed)


# ---------------------------------------------------------------------------
# 2. closed-form quantities against loop oracles
# ---------------------------------------------------------------------------

def test_formulas_match_oracles(criterion):
    rng = np.random.default_rng(7)
    worst = {"distance": 0.0, "loss": 0.0, "score": 0.0, "eer": 0.0}
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        a, b = rng.normal(size=n) * 10 ** rng.uniform(-3, 2), rng.normal(size=n)
        worst["distance"] = max(worst["distance"], abs(euclidean_distance(a, b) - distance(a, b)))

        d, label, margin = float(rng.exponential()), int(rng.integers(0, 2)), float(rng.uniform(0, 3))
        worst["loss"] = max(worst["loss"], abs(contrastive_loss(d, label, margin) - contrastive(d, label, margin)))

        gal, q = rng.normal(size=(int(rng.integers(1, 11)), n)), rng.normal(size=n)
        worst["score"] = max(worst["score"], abs(verification_score(gal, q) - gallery_score(gal, q)))

        gen = rng.normal(size=int(rng.integers(1, 11)))
        imp = rng.normal(loc=rng.uniform(0, 2), size=int(rng.integers(1, 200)))
        if rng.random() < 0.5:  # coarse scores force ties
            gen, imp = np.round(gen, 1), np.round(imp, 1)
        worst["eer"] = max(worst["eer"], abs(compute_user_eer(gen, imp) - eer_sweep(gen, imp)))
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    ok = criterion(2, max(worst.values()) < 1e-9, detail)
    assert ok, worst


# ---------------------------------------------------------------------------
# 3. feature identities
# ---------------------------------------------------------------------------

def test_feature_identities(criterion):
    rng = np.random.default_rng(3)
    worst_pl, worst_shift, mask_ok = 0.0, 0.0, True
    for i in range(10_000):
        n = int(rng.integers(2, 40))
        press = np.cumsum(rng.integers(0, 400, size=n)) + int(rng.integers(0, 10**6))
        release = press + rng.integers(0, 300, size=n)
        codes = rng.integers(0, 256, size=n)
        rows = extract_features(KeystrokeSequence("u", str(i), codes, press, release)).rows
        worst_pl = max(worst_pl, float(np.abs(rows[:-1, PL] - rows[:-1, IL] - rows[:-1, HL]).max()))

        shift = int(rng.integers(0, 2 * 10**12))
        moved = extract_features(KeystrokeSequence("u", str(i), codes, press + shift, release + shift)).rows
        worst_shift = max(worst_shift, float(np.abs(moved - rows).max()))

        M = int(rng.integers(1, 60))
        p = pad_truncate(rows, M)
        keep = min(n, M)
        mask_ok &= (
            p.original_length == n
            and p.matrix.shape == (M, 5)
            and int(p.mask.sum()) == keep
            and bool(np.all(p.mask[:keep] == 1))
            and bool(np.all(p.matrix[keep:] == 0))
            and np.array_equal(p.matrix[:keep], rows[:keep])
        )
    ok = criterion(3, worst_pl <= 1e-12 and worst_shift <= 1e-12 and mask_ok,
                   f"PL-IL-HL {worst_pl:.1e}, shift {worst_shift:.1e}, mask {'exact' if mask_ok else 'WRONG'}")
    assert ok


# ---------------------------------------------------------------------------
# 4. protocol accounting
# ---------------------------------------------------------------------------

def test_protocol_accounting(criterion):
    users = generate_synthetic(SyntheticSpec(num_users=120, sequences_per_user=15, keys_per_sequence=(20, 30), seed=5))
    cfg = TrainConfig(M=20, model=ModelConfig(input_length=20, lstm_units=8, embedding_dim=8))
    ckpt = init_checkpoint(cfg)
    cache = embed_users(ckpt, users, 20)
    ok, notes = True, []
    for K in (10, 100):
        for G in (1, 5):
            pc = ProtocolConfig(M=20, G=G, K=K, seed=2)
            sets = score_protocol(build_protocol(users, pc), cache)
            report = evaluate(ckpt, users, pc, embeddings=cache)
            counts = all(len(s.genuine_scores) == 5 and len(s.impostor_scores) == K - 1 for s in sets)
            cell = len(sets) == K and counts and report.n_genuine == 5 * K and report.n_impostor == K * (K - 1)
            cell = cell and 0.0 <= report.mean_eer <= 1.0
            ok &= cell
            notes.append(f"K{K}G{G} {'ok' if cell else 'BAD'}")
    assert criterion(4, ok, ", ".join(notes))


# ---------------------------------------------------------------------------
# 5-7. trained-model behaviour
# ---------------------------------------------------------------------------

def test_desk_learning_signal(criterion, desk_population, desk_model):
    _, test_users = desk_population
    ckpt, seconds = desk_model
    assert len(test_users) == 100
    trained = evaluate(ckpt, test_users, DESK_PROTOCOL).mean_eer
    untrained = evaluate(init_checkpoint(DESK), test_users, DESK_PROTOCOL).mean_eer
    gain = (untrained - trained) / untrained
    ok = criterion(5, trained <= 0.25 and gain >= 0.4 and seconds < 1800,
                   f"EER {trained:.2%} vs untrained {untrained:.2%} ({gain:.0%} better), train {seconds:.0f}s")
    assert ok


def test_larger_gallery_helps(criterion, desk_population, desk_model):
    _, test_users = desk_population
    ckpt, _ = desk_model
    g1, g10 = [], []
    for seed in range(5):
        r1, r10 = sweep(ckpt, test_users, [50], [1, 10], [100], seed=seed)
        g1.append(r1.mean_eer)
        g10.append(r10.mean_eer)
    ok = criterion(6, np.mean(g10) < np.mean(g1), f"G=1 {np.mean(g1):.2%}, G=10 {np.mean(g10):.2%} over 5 seeds")
    assert ok


def test_population_scaling(criterion, desk_model):
    ckpt, _ = desk_model
    pop = generate_synthetic(SyntheticSpec(num_users=2000, sequences_per_user=15, noise_scale=0.3, seed=97,
                                           user_prefix="t"))
    small, large = sweep(ckpt, pop, [50], [5], [200, 2000], seed=1)
    growth = (large.mean_eer - small.mean_eer) / small.mean_eer
    ok = criterion(7, growth < 0.3, f"K=200 {small.mean_eer:.2%}, K=2000 {large.mean_eer:.2%} ({growth:+.1%})")
    assert ok


# ---------------------------------------------------------------------------
# 8. CLI determinism
# ---------------------------------------------------------------------------

def _same_tree(a, b, skip=("train_timing.tsv",)):
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    return [n for n in names if n not in skip and (a / n).read_bytes() != (b / n).read_bytes()]


def test_cli_reruns_are_identical(criterion, tmp_path):
    gen = ["generate", "--users", "24", "--seqs", "12", "--min-keys", "15", "--max-keys", "25", "--seed", "5"]
    data = tmp_path / "generate_a" / "keystrokes.tsv"
    runs = {
        "generate": gen,
        "train": ["train", "--data", str(data), "--train-fraction", "0.5", "--epochs", "2", "--batches", "2",
                  "--batch-size", "8", "--M", "15", "--units", "5", "--lr", "0.01", "--seed", "3"],
    }
    ckpt = tmp_path / "train_a" / "checkpoint.ckpt"
    split = tmp_path / "train_a" / "split.tsv"
    runs["embed"] = ["embed", "--data", str(data), "--checkpoint", str(ckpt)]
    runs["evaluate"] = ["evaluate", "--data", str(data), "--checkpoint", str(ckpt), "--split", str(split),
                        "--K", "8", "--G", "2", "--seed", "4", "--roc", "20"]
    runs["sweep"] = ["sweep", "--data", str(data), "--checkpoint", str(ckpt), "--M", "10,15", "--G", "1,2",
                     "--K", "5,10", "--seed", "4"]
    diffs = {}
    for name, args in runs.items():
        for tag in ("a", "b"):
            assert main([*args, "--out", str(tmp_path / f"{name}_{tag}")]) == 0, name
        diffs[name] = _same_tree(tmp_path / f"{name}_a", tmp_path / f"{name}_b")
    fieldwise = load_checkpoint(ckpt) == load_checkpoint(tmp_path / "train_b" / "checkpoint.ckpt")
    bad = {k: v for k, v in diffs.items() if v}
    ok = criterion(8, not bad and fieldwise,
                   "all outputs byte-identical, checkpoints equal field-wise" if not bad and fieldwise else str(bad))
    assert ok
