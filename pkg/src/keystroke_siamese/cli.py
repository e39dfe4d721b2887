"""Command-line entry point: generate, train, embed, evaluate, sweep.

Every subcommand writes a ``manifest.json`` next to its outputs holding the
fully resolved configuration and seed. Exit codes: 0 success, 2 usage,
3 data or protocol problem, 4 numerical divergence, 5 checkpoint problem.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .data import AALTO_COLUMNS, SyntheticSpec, generate_synthetic, parse_dataset, split_users, write_dataset
from .errors import (
    CheckpointIncompatibleError,
    CheckpointIntegrityError,
    ConfigurationError,
    EmptyDatasetError,
    NumericalDivergenceError,
    ProtocolError,
    SchemaError,
    TooShortError,
)
from .evaluation import (
    ProtocolConfig,
    embed_sequences,
    evaluate,
    sweep,
    write_grid,
    write_roc,
    write_summary,
    write_user_eers,
)
from .nn import ModelConfig, TrainHyper
from .seeding import STREAMS
from .training import TrainConfig, load_checkpoint, save_checkpoint, train, write_train_log

log = logging.getLogger("keystroke_siamese")

OUTPUT_ENV = "KEYSTROKE_SIAMESE_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5

DATA_FILE = "keystrokes.tsv"
CHECKPOINT_FILE = "checkpoint.ckpt"
SPLIT_FILE = "split.tsv"


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _column_map(text):
    out = {}
    for item in text.split(","):
        role, sep, name = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected role=column, got {item!r}")
        out[role.strip()] = name.strip()
    return out


def _default_out(name):
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / name


def _write_manifest(out_dir: Path, command: str, config: dict) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "seed_derivation": {
            "scheme": "SeedSequence(entropy=seed, spawn_key=(crc32(stream),)) -> PCG64",
            "streams": list(STREAMS),
        },
        "config": config,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_dataset(args):
    columns = dict(AALTO_COLUMNS) if args.aalto else None
    if args.columns:
        columns = {**(columns or {}), **args.columns}
    return parse_dataset(args.data, columns, args.delimiter)


def _data_config(args):
    return {"data": str(args.data), "delimiter": args.delimiter, "aalto": args.aalto, "columns": args.columns}


def _restrict_to_split(users, split_path, role="test"):
    with open(split_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    keep = [r["user_id"] for r in rows if r["role"] == role and r["user_id"] in users.users]
    if not keep:
        raise ProtocolError(f"no {role} users from {split_path} present in the dataset")
    return users.subset(keep)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    spec = SyntheticSpec(
        num_users=args.users,
        sequences_per_user=args.seqs,
        keys_per_sequence=(args.min_keys, args.max_keys),
        hold_mean_ms=args.hold_mean,
        interkey_mean_ms=args.interkey_mean,
        user_spread=args.user_spread,
        key_spread=args.key_spread,
        noise_scale=args.noise,
        fixed_text=args.fixed_text,
        user_prefix=args.prefix,
        seed=args.seed,
    )
    out = Path(args.out or _default_out("synthetic"))
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(generate_synthetic(spec), out / DATA_FILE)
    spec_d = asdict(spec)
    spec_d["keys_per_sequence"] = list(spec.keys_per_sequence)
    _write_manifest(out, "generate", {"synthetic": spec_d, "seed": args.seed, "file": DATA_FILE})
    print(out / DATA_FILE)


def cmd_train(args):
    users = _read_dataset(args)
    train_users, test_users = split_users(users, args.train_fraction, args.seed)
    model = ModelConfig(
        input_length=args.M,
        lstm_units=args.units,
        embedding_dim=args.units,
        inter_layer_dropout=args.dropout,
        lstm_input_dropout=args.lstm_dropout,
        dtype=args.precision,
    )
    hyper = TrainHyper(learning_rate=args.lr, margin=args.alpha)
    cfg = TrainConfig(
        epochs=args.epochs,
        batches_per_epoch=args.batches,
        batch_size=args.batch_size,
        batch_unit=args.batch_unit,
        hyper=hyper,
        M=args.M,
        seed=args.seed,
        model=model,
    )
    out = Path(args.out or _default_out("train"))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / SPLIT_FILE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user_id", "role"])
        w.writerows([u, "train"] for u in train_users)
        w.writerows([u, "test"] for u in test_users)
    config = {**cfg.to_dict(), "train_fraction": args.train_fraction, **_data_config(args)}
    _write_manifest(out, "train", config)
    try:
        ckpt, records = train(train_users, cfg)
    except NumericalDivergenceError as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "last_good.ckpt")
        raise
    save_checkpoint(ckpt, out / CHECKPOINT_FILE)
    write_train_log(records, out / "train_log.tsv", timing_path=out / "train_timing.tsv")
    print(out / CHECKPOINT_FILE)


def cmd_embed(args):
    users = _read_dataset(args)
    ckpt = load_checkpoint(args.checkpoint)
    M = args.M or ckpt.config.input_length
    seqs = list(users.sequences())
    vecs, skipped = embed_sequences(ckpt, seqs, M)
    kept = [s for i, s in enumerate(seqs) if i not in set(skipped)]
    out = Path(args.out or _default_out("embed"))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "embeddings.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user_id", "session_id", *(f"e{j}" for j in range(vecs.shape[1]))])
        for s, v in zip(kept, vecs):
            w.writerow([s.user_id, s.session_id, *(repr(float(x)) for x in v)])
    _write_manifest(out, "embed", {"checkpoint": str(args.checkpoint), "M": M, "skipped": len(skipped), **_data_config(args)})
    print(out / "embeddings.tsv")


def _eval_users(args):
    users = _read_dataset(args)
    if args.split:
        users = _restrict_to_split(users, args.split)
    return users


def cmd_evaluate(args):
    users = _eval_users(args)
    ckpt = load_checkpoint(args.checkpoint)
    M = args.M or ckpt.config.input_length
    cfg = ProtocolConfig(M=M, G=args.G, K=args.K, seed=args.seed)
    report = evaluate(ckpt, users, cfg, roc_max_points=args.roc)
    out = Path(args.out or _default_out("evaluate"))
    out.mkdir(parents=True, exist_ok=True)
    write_summary([report], out / "summary.tsv")
    write_user_eers(report, out / "user_eer.tsv")
    if args.roc:
        write_roc(report, out / "roc.tsv")
    _write_manifest(out, "evaluate", {"protocol": asdict(cfg), "checkpoint": str(args.checkpoint),
                                      "split": str(args.split) if args.split else None, **_data_config(args)})
    print(f"mean EER {100 * report.mean_eer:.2f}% over K={cfg.K} users (M={M}, G={cfg.G}, seed={cfg.seed})")


def cmd_sweep(args):
    users = _eval_users(args)
    ckpt = load_checkpoint(args.checkpoint)
    reports = sweep(ckpt, users, args.M, args.G, args.K, args.seed)
    out = Path(args.out or _default_out("sweep"))
    out.mkdir(parents=True, exist_ok=True)
    write_summary(reports, out / "sweep.tsv")
    for K in args.K:
        write_grid(reports, out / f"grid_K{K}.tsv", K)
    _write_manifest(out, "sweep", {"M": args.M, "G": args.G, "K": args.K, "seed": args.seed,
                                   "checkpoint": str(args.checkpoint),
                                   "split": str(args.split) if args.split else None, **_data_config(args)})
    print(out / "sweep.tsv")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_data_args(p):
    p.add_argument("--data", type=Path, required=True, help="delimited keystroke file or directory")
    p.add_argument("--delimiter", default="\t")
    p.add_argument("--aalto", action="store_true", help="use Aalto column names")
    p.add_argument("--columns", type=_column_map, default=None, help="role=column,... overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keystroke-siamese", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic typist population")
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--seqs", type=int, default=15)
    p.add_argument("--min-keys", type=int, default=50)
    p.add_argument("--max-keys", type=int, default=80)
    p.add_argument("--hold-mean", type=float, default=100.0, help="ms")
    p.add_argument("--interkey-mean", type=float, default=180.0, help="ms, press to press")
    p.add_argument("--user-spread", type=float, default=0.3)
    p.add_argument("--key-spread", type=float, default=0.25)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--fixed-text", action="store_true", help="each user retypes one text")
    p.add_argument("--prefix", default="u")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="split users and train the Siamese embedder")
    _add_data_args(p)
    p.add_argument("--train-fraction", type=float, default=68 / 168)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batches", type=int, default=150, help="batches per epoch")
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--batch-unit", choices=("pairs", "sequences"), default="pairs")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--alpha", type=float, default=1.5, help="contrastive margin")
    p.add_argument("--M", type=int, default=50, help="keystrokes per input")
    p.add_argument("--units", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.5, help="between LSTM layers")
    p.add_argument("--lstm-dropout", type=float, default=0.2, help="on each LSTM layer's inputs")
    p.add_argument("--precision", choices=("float64", "float32"), default="float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write embeddings of every sequence")
    _add_data_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_embed)

    for name, func, helptext in (("evaluate", cmd_evaluate, "mean per-user EER for one (M, G, K)"),
                                 ("sweep", cmd_sweep, "EER grid over M, G and K")):
        p = sub.add_parser(name, help=helptext)
        _add_data_args(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--split", type=Path, default=None, help="split.tsv from train; keeps test users")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path)
        if name == "evaluate":
            p.add_argument("--M", type=int, default=None)
            p.add_argument("--G", type=int, default=5)
            p.add_argument("--K", type=int, default=100)
            p.add_argument("--roc", type=int, default=0, help="write up to N pooled ROC points")
        else:
            p.add_argument("--M", type=_int_list, default=[30, 50, 70, 100, 150])
            p.add_argument("--G", type=_int_list, default=[1, 2, 5, 7, 10])
            p.add_argument("--K", type=_int_list, default=[100])
        p.set_defaults(func=func)
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError as exc:
        raise ConfigurationError("--threads needs the optional threadpoolctl package") from exc

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with _thread_limit(args.threads):
            args.func(args)
    except ConfigurationError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, SchemaError, EmptyDatasetError, ProtocolError, TooShortError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalDivergenceError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointIncompatibleError, CheckpointIntegrityError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
