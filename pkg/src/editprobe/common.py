"""Shared plumbing: stable hashing, split assignment, seeded RNG streams,
atomic file writes, reproducibility blocks."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import zlib

import numpy as np

DIMENSIONS = ("quality", "alignment", "preservation")
ALL_DIMENSIONS = DIMENSIONS + ("overall",)

SEED_ENV_VAR = "EDITPROBE_SEED"


def stable_id_hash(sample_id: str) -> int:
    """64-bit id hash, stable across platforms and processes (not Python hash())."""
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def split_of(sample_id: str, seed: int, fractions=(0.70, 0.15, 0.15)) -> str:
    """Deterministic train/val/test assignment from the sample id and a seed."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "little") / 2.0**64
    if u < fractions[0]:
        return "train"
    if u < fractions[0] + fractions[1]:
        return "val"
    return "test"


def rng_for(seed: int, *tags: str) -> np.random.Generator:
    """Independent, reproducible RNG stream derived from a seed and string tags."""
    keys = [zlib.crc32(t.encode("utf-8")) for t in tags]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + keys))


def effective_seed(cli_seed: int) -> int:
    """CLI seed, unless the EDITPROBE_SEED environment variable overrides it."""
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        return int(env)
    return cli_seed


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def repro_block(seed: int, config: dict) -> dict:
    """Reproducibility block embedded in every CLI output JSON."""
    from editprobe import __version__

    return {
        "seed": seed,
        "config_hash": config_hash(config),
        "versions": {
            "editprobe": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }


def atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_json(path: str, document: dict) -> None:
    atomic_write_bytes(path, json.dumps(document, indent=2, sort_keys=True).encode("utf-8") + b"\n")


def load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
