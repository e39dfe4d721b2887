"""Siamese training loop and checkpoint persistence."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import UserCollection
from .errors import (
    CheckpointIncompatibleError,
    CheckpointIntegrityError,
    ConfigurationError,
    NumericalDivergenceError,
)
from .features import PairSampler
from .nn import (
    INIT_DESCRIPTOR,
    PARAM_NAMES,
    ModelConfig,
    ModelParams,
    TrainHyper,
    adam_step,
    check_shapes,
    forward_backward,
    init_adam_state,
    init_params,
    update_running_stats,
)
from .seeding import derive_rng

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "keystroke-siamese-checkpoint"
CHECKPOINT_VERSION = 1
# fixed zip member timestamp so identical checkpoints are byte-identical
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule.

    ``batch_size`` counts pairs when ``batch_unit == "pairs"`` and input
    sequences (two per pair) when ``batch_unit == "sequences"``. ``model``
    defaults to the standard architecture at ``input_length = M``.
    """

    epochs: int = 200
    batches_per_epoch: int = 150
    batch_size: int = 512
    batch_unit: str = "pairs"
    hyper: TrainHyper = field(default_factory=TrainHyper)
    M: int = 50
    seed: int = 0
    model: ModelConfig | None = None

    def __post_init__(self):
        if min(self.epochs, self.batches_per_epoch, self.batch_size, self.M) < 1:
            raise ConfigurationError("epochs, batches_per_epoch, batch_size and M must be >= 1")
        if self.batch_unit not in ("pairs", "sequences"):
            raise ConfigurationError(f"batch_unit must be 'pairs' or 'sequences', got {self.batch_unit!r}")
        if self.model is not None and self.model.input_length != self.M:
            raise ConfigurationError("model.input_length must equal M")

    @property
    def model_config(self) -> ModelConfig:
        return self.model if self.model is not None else ModelConfig(input_length=self.M)

    @property
    def pairs_per_batch(self) -> int:
        if self.batch_unit == "pairs":
            return self.batch_size
        return max(1, self.batch_size // 2)

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model_config.to_dict()
        return d


@dataclass(frozen=True)
class TrainLogRecord:
    epoch: int
    loss: float
    genuine_distance: float
    impostor_distance: float
    duration_s: float


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: ModelParams
    metadata: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return self.config == other.config and self.params == other.params and self.metadata == other.metadata


def _checkpoint(params: ModelParams, config: TrainConfig, steps: int) -> ModelCheckpoint:
    return ModelCheckpoint(
        config.model_config,
        params.copy(),
        {"train_config": config.to_dict(), "steps": steps, "seed": config.seed},
    )


def init_checkpoint(config: TrainConfig) -> ModelCheckpoint:
    """The untrained model :func:`train` would start from."""
    params = init_params(config.model_config, derive_rng(config.seed, "init"))
    return _checkpoint(params, config, 0)


def train(
    train_users: UserCollection,
    config: TrainConfig,
    on_epoch: Callable[[TrainLogRecord], None] | None = None,
) -> tuple[ModelCheckpoint, list[TrainLogRecord]]:
    """Run ``epochs * batches_per_epoch`` Adam steps on fresh balanced pair batches.

    Pairs are drawn independently for every batch. Batch-norm running
    statistics are updated after every step and frozen into the returned
    checkpoint. On a non-finite loss, gradient or weight the run aborts with
    :class:`NumericalDivergenceError` whose ``last_good`` holds the last
    finite checkpoint.
    """
    model_cfg = config.model_config
    hyper = config.hyper
    sampler = PairSampler(train_users, config.M)
    params = init_params(model_cfg, derive_rng(config.seed, "init"))
    state = init_adam_state(params.weights)
    batch_rng = derive_rng(config.seed, "batches")
    dropout_rng = derive_rng(config.seed, "dropout")
    n_pairs = config.pairs_per_batch
    records = []
    steps = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses, gen_d, imp_d = [], [], []
        for _ in range(config.batches_per_epoch):
            batch = sampler.sample(n_pairs, batch_rng)
            try:
                r = forward_backward(params, model_cfg, batch, hyper, dropout_rng)
            except NumericalDivergenceError as exc:
                raise NumericalDivergenceError(
                    f"diverged at epoch {epoch}, step {steps}: {exc}", last_good=_checkpoint(params, config, steps)
                ) from exc
            weights, state = adam_step(params.weights, r.grads, state, hyper)
            if not all(np.all(np.isfinite(w)) for w in weights.values()):
                raise NumericalDivergenceError(
                    f"non-finite weights at epoch {epoch}, step {steps}", last_good=_checkpoint(params, config, steps)
                )
            params = update_running_stats(ModelParams(weights, params.running_mean, params.running_var),
                                          r.bn_mean, r.bn_var, model_cfg.bn_momentum)
            steps += 1
            losses.append(r.loss)
            gen_d.append(r.distances[r.labels == 0])
            imp_d.append(r.distances[r.labels == 1])
        gd = np.concatenate(gen_d)
        idd = np.concatenate(imp_d)
        rec = TrainLogRecord(
            epoch,
            float(np.mean(losses)),
            float(gd.mean()) if gd.size else 0.0,
            float(idd.mean()) if idd.size else 0.0,
            time.perf_counter() - t0,
        )
        records.append(rec)
        log.info("epoch %d loss %.5f gen %.4f imp %.4f (%.1fs)", epoch, rec.loss,
                 rec.genuine_distance, rec.impostor_distance, rec.duration_s)
        if on_epoch is not None:
            on_epoch(rec)
    return _checkpoint(params, config, steps), records


def write_train_log(records: list[TrainLogRecord], path, delimiter: str = "\t", timing_path=None) -> None:
    """Write the deterministic per-epoch columns; durations go to ``timing_path``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["epoch", "loss", "genuine_distance", "impostor_distance"])
        for r in records:
            w.writerow([r.epoch, repr(r.loss), repr(r.genuine_distance), repr(r.impostor_distance)])
    if timing_path is not None:
        with open(timing_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            w.writerow(["epoch", "duration_s"])
            for r in records:
                w.writerow([r.epoch, f"{r.duration_s:.3f}"])


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def _array_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, a, allow_pickle=False)
    return buf.getvalue()


def _checkpoint_arrays(ckpt: ModelCheckpoint) -> dict[str, np.ndarray]:
    arrays = {k: ckpt.params.weights[k] for k in PARAM_NAMES}
    arrays["running_mean"] = ckpt.params.running_mean
    arrays["running_var"] = ckpt.params.running_var
    return {k: np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")) for k, v in arrays.items()}


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Write a zip of little-endian ``.npy`` members plus ``meta.json``.

    The metadata records the format version, model config, precision, the
    initialization scheme and a SHA-256 per array; member timestamps are
    fixed so equal checkpoints produce equal files.
    """
    arrays = _checkpoint_arrays(ckpt)
    blobs = {f"{k}.npy": _array_bytes(v) for k, v in arrays.items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "precision": ckpt.config.dtype,
        "init": INIT_DESCRIPTOR,
        "arrays": {
            k: {"shape": list(arrays[k].shape), "dtype": arrays[k].dtype.str, "sha256": hashlib.sha256(b).hexdigest()}
            for k, b in zip(arrays, blobs.values())
        },
        "metadata": ckpt.metadata,
    }
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        members = {"meta.json": json.dumps(meta, indent=1, sort_keys=True).encode("utf-8"), **blobs}
        for name, data in members.items():
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint archive") from exc
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except (KeyError, ValueError) as exc:
            raise CheckpointIntegrityError(f"{path}: unreadable metadata") from exc
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointIncompatibleError(
                f"{path}: format {meta.get('format')!r} version {meta.get('version')!r}, "
                f"expected {CHECKPOINT_FORMAT!r} version {CHECKPOINT_VERSION}"
            )
        try:
            config = ModelConfig(**meta["config"])
        except (TypeError, ConfigurationError) as exc:
            raise CheckpointIncompatibleError(f"{path}: bad model config: {exc}") from exc
        arrays = {}
        for name, info in meta["arrays"].items():
            try:
                blob = zf.read(f"{name}.npy")
            except (KeyError, zipfile.BadZipFile, OSError) as exc:
                raise CheckpointIntegrityError(f"{path}: cannot read array {name}") from exc
            if hashlib.sha256(blob).hexdigest() != info["sha256"]:
                raise CheckpointIntegrityError(f"{path}: checksum mismatch for {name}")
            arrays[name] = np.lib.format.read_array(io.BytesIO(blob), allow_pickle=False)
    missing = set(PARAM_NAMES) | {"running_mean", "running_var"}
    missing -= arrays.keys()
    if missing:
        raise CheckpointIncompatibleError(f"{path}: missing arrays {sorted(missing)}")
    dt = np.dtype(config.dtype)
    params = ModelParams(
        {k: arrays[k].astype(dt) for k in PARAM_NAMES},
        arrays["running_mean"].astype(dt),
        arrays["running_var"].astype(dt),
    )
    try:
        check_shapes(params, config)
    except ConfigurationError as exc:
        raise CheckpointIncompatibleError(f"{path}: {exc}") from exc
    return ModelCheckpoint(config, params, meta.get("metadata", {}))


def with_metadata(ckpt: ModelCheckpoint, **extra) -> ModelCheckpoint:
    return replace(ckpt, metadata={**ckpt.metadata, **extra})
