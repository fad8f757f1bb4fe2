"""Binary interchange format for pooled per-layer feature pairs, plus the
JSON manifest binding dump records to sample ids, MOS labels, and splits.

Layout (little-endian): magic "EPHS", version byte 0x01, then u32 n_samples,
u32 n_layers, u32 dim, u32 flags; per sample a u64 id hash followed by, for
each layer, dim float32 values for the source stream then dim float32 values
for the edited stream. Total size is exactly
HEADER_SIZE + n_samples * (8 + n_layers * 2 * dim * 4) bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from editprobe.common import atomic_write_bytes, load_json, stable_id_hash
from editprobe.errors import DataError

MAGIC = b"EPHS"
VERSION = 1
HEADER_SIZE = 4 + 1 + 4 * 4  # magic, version byte, four u32 fields
_HEADER_STRUCT = struct.Struct("<4sBIIII")


@dataclass
class HiddenDump:
    ids: list[str]
    features: np.ndarray  # (n, L, 2, d) float32
    flags: int = 0

    @property
    def n_samples(self) -> int:
        return len(self.ids)

    @property
    def n_layers(self) -> int:
        return int(self.features.shape[1])

    @property
    def dim(self) -> int:
        return int(self.features.shape[3])

    def pair(self, index: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Source/edited vectors for a sample at a 1-indexed layer."""
        return self.features[index, layer - 1, 0], self.features[index, layer - 1, 1]


def expected_size(n_samples: int, n_layers: int, dim: int) -> int:
    return HEADER_SIZE + n_samples * (8 + n_layers * 2 * dim * 4)


def write_dump(path: str, dump: HiddenDump) -> None:
    feats = np.ascontiguousarray(dump.features, dtype=np.float32)
    if feats.ndim != 4 or feats.shape[2] != 2:
        raise DataError(f"features must have shape (n, L, 2, d), got {feats.shape}")
    if feats.shape[0] != len(dump.ids):
        raise DataError(f"{len(dump.ids)} ids vs {feats.shape[0]} feature records")
    hashes = [stable_id_hash(s) for s in dump.ids]
    if len(set(hashes)) != len(hashes):
        raise DataError("duplicate sample id hashes; ids must be unique")

    n, layers, _, dim = feats.shape
    out = bytearray()
    out += _HEADER_STRUCT.pack(MAGIC, VERSION, n, layers, dim, dump.flags)
    for i in range(n):
        out += struct.pack("<Q", hashes[i])
        out += feats[i].tobytes(order="C")
    assert len(out) == expected_size(n, layers, dim)
    atomic_write_bytes(path, bytes(out))


def read_dump(path: str) -> HiddenDump:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_SIZE:
        raise DataError(f"file too short for header: {len(blob)} bytes at offset 0")
    magic, version, n, layers, dim, flags = _HEADER_STRUCT.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r} at byte offset 0 (expected {MAGIC!r})")
    if version != VERSION:
        raise DataError(f"unsupported version {version} at byte offset 4 (expected {VERSION})")
    expected = expected_size(n, layers, dim)
    if len(blob) != expected:
        raise DataError(
            f"length mismatch: expected {expected} bytes for n={n} L={layers} d={dim}, "
            f"got {len(blob)}"
        )

    record = 8 + layers * 2 * dim * 4
    hashes = []
    features = np.empty((n, layers, 2, dim), dtype=np.float32)
    offset = HEADER_SIZE
    for i in range(n):
        (h,) = struct.unpack_from("<Q", blob, offset)
        hashes.append(h)
        vec = np.frombuffer(blob, dtype="<f4", count=layers * 2 * dim, offset=offset + 8)
        features[i] = vec.reshape(layers, 2, dim)
        offset += record
    if len(set(hashes)) != len(hashes):
        raise DataError("duplicate id hashes in dump")

    # ids are not stored in the binary; carry hashes until a manifest aligns them
    dump = HiddenDump(ids=[f"#{h:016x}" for h in hashes], features=features, flags=flags)
    dump.id_hashes = hashes  # type: ignore[attr-defined]
    return dump


def dump_id_hashes(dump: HiddenDump) -> list[int]:
    stored = getattr(dump, "id_hashes", None)
    if stored is not None:
        return stored
    return [stable_id_hash(s) for s in dump.ids]


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1


def build_manifest(
    ids: list[str],
    mos: dict[str, dict] | None,
    splits: dict[str, str] | None,
    provenance: dict,
    config_echo: dict,
    repro: dict | None = None,
) -> dict:
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "ids": list(ids),
        "mos": mos or {},
        "splits": splits or {},
        "provenance": provenance,
        "config": config_echo,
    }
    if repro is not None:
        doc["repro"] = repro
    return doc


def load_manifest(path: str) -> dict:
    doc = load_json(path)
    if doc.get("manifest_version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {doc.get('manifest_version')!r}")
    if not isinstance(doc.get("ids"), list) or not doc["ids"]:
        raise DataError("manifest has no sample ids")
    return doc


def align_manifest(dump: HiddenDump, manifest: dict) -> list[str]:
    """Positionally align manifest ids with dump records via id-hash cross-check.

    Returns the id list; raises with a diff when they disagree.
    """
    ids = manifest["ids"]
    hashes = dump_id_hashes(dump)
    if len(ids) != len(hashes):
        raise DataError(f"manifest lists {len(ids)} ids but dump holds {len(hashes)} records")
    mismatches = [
        (i, ids[i], f"{hashes[i]:016x}")
        for i in range(len(ids))
        if stable_id_hash(ids[i]) != hashes[i]
    ]
    if mismatches:
        preview = ", ".join(f"record {i}: id {s!r} != hash {h}" for i, s, h in mismatches[:5])
        raise DataError(
            f"{len(mismatches)} id/hash mismatches between manifest and dump: {preview}"
        )
    return list(ids)


def mos_vector(manifest_or_mos: dict, ids: list[str], dimension: str) -> np.ndarray:
    """Per-sample MOS values for a dimension, in id order.

    Accepts either a manifest (with a "mos" table) or a MOS-report document
    (with a "samples" table).
    """
    key = {"quality": "mos_q", "alignment": "mos_e", "preservation": "mos_p", "overall": "mos_o"}[
        dimension
    ]
    table = manifest_or_mos.get("samples", manifest_or_mos.get("mos", {}))
    values = []
    missing = []
    for sid in ids:
        entry = table.get(sid)
        if entry is None or entry.get(key) is None:
            missing.append(sid)
        else:
            values.append(float(entry[key]))
    if missing:
        raise DataError(
            f"{len(missing)} samples missing {dimension} MOS (first: {missing[:5]})"
        )
    return np.array(values, dtype=np.float64)


def validate_dump(path: str, manifest_path: str | None = None) -> dict:
    """Format validation; returns a summary dict or raises DataError."""
    dump = read_dump(path)
    summary = {
        "n_samples": dump.n_samples,
        "n_layers": dump.n_layers,
        "dim": dump.dim,
        "flags": dump.flags,
        "bytes": expected_size(dump.n_samples, dump.n_layers, dump.dim),
    }
    if not np.isfinite(dump.features).all():
        raise DataError("dump contains non-finite feature values")
    if manifest_path is not None:
        manifest = load_manifest(manifest_path)
        align_manifest(dump, manifest)
        summary["manifest_ids"] = len(manifest["ids"])
    return summary
