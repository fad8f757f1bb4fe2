"""Writer for the editprobe interchange formats.

The binary dump layout (little-endian): magic "EPHS", version byte 0x01,
u32 n_samples, u32 n_layers, u32 dim, u32 flags; then per sample a u64 id
hash (first 8 bytes of SHA-256 of the UTF-8 id, little-endian) followed by,
for each layer, dim float32 values for the source stream then dim float32
values for the edited stream. The manifest is a JSON document binding dump
records positionally to sample ids, MOS labels, and split labels; splits
derive from SHA-256 of "{seed}:{id}".

This module deliberately reimplements the format from its specification
rather than importing the consumer package; the byte layout is the contract.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"EPHS"
VERSION = 1
MANIFEST_VERSION = 1


def stable_id_hash(sample_id: str) -> int:
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def split_of(sample_id: str, seed: int, fractions=(0.70, 0.15, 0.15)) -> str:
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "little") / 2.0**64
    if u < fractions[0]:
        return "train"
    if u < fractions[0] + fractions[1]:
        return "val"
    return "test"


def expected_size(n_samples: int, n_layers: int, dim: int) -> int:
    return 21 + n_samples * (8 + n_layers * 2 * dim * 4)


def write_dump(path: str, ids: list[str], features: np.ndarray, flags: int = 0) -> None:
    """features: (n, L, 2, d) float32; raises on duplicate ids or bad shape."""
    feats = np.ascontiguousarray(features, dtype=np.float32)
    if feats.ndim != 4 or feats.shape[2] != 2 or feats.shape[0] != len(ids):
        raise ValueError(f"need (n, L, 2, d) features aligned with {len(ids)} ids, got {feats.shape}")
    hashes = [stable_id_hash(s) for s in ids]
    if len(set(hashes)) != len(hashes):
        raise ValueError("duplicate sample ids")
    n, layers, _, dim = feats.shape
    out = bytearray()
    out += struct.pack("<4sBIIII", MAGIC, VERSION, n, layers, dim, flags)
    for i, h in enumerate(hashes):
        out += struct.pack("<Q", h)
        out += feats[i].tobytes(order="C")
    assert len(out) == expected_size(n, layers, dim)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(bytes(out))
    os.replace(tmp, path)


def write_manifest(
    path: str,
    ids: list[str],
    backbone_name: str,
    config_echo: dict,
    mos: dict[str, dict] | None = None,
    split_seed: int = 0,
) -> None:
    document = {
        "manifest_version": MANIFEST_VERSION,
        "ids": list(ids),
        "mos": mos or {},
        "splits": {sid: split_of(sid, split_seed) for sid in ids},
        "provenance": {"kind": "exported", "backbone": backbone_name},
        "config": config_echo,
    }
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
