"""Expansion of one integer seed into independent named random streams.

A stream is ``SeedSequence(entropy=seed, spawn_key=(crc32(name),))`` fed to
PCG64, so every component gets its own reproducible generator and adding a
new stream never perturbs existing ones.
"""

import zlib

import numpy as np

STREAMS = ("synthetic", "split", "init", "batches", "dropout", "protocol")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_rng(seed: int, name: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(stream_key(name),))
    return np.random.Generator(np.random.PCG64(ss))
