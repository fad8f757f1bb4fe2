"""Export pipeline: walk a sample directory, run the driver over every
triplet, and write the dump plus its manifest.

Sample directory layout:
    instructions.csv   header sample_id,instruction
    source/<id>.png
    edited/<id>.png

Samples with missing image files are skipped and listed; the caller decides
whether that is fatal (the CLI exits nonzero when anything was skipped).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from editprobe_exporter import dumpfmt
from editprobe_exporter.preprocess import load_rgb


@dataclass
class ExportResult:
    ids: list[str]
    skipped: list[str]
    n_layers: int
    dim: int
    dump_path: str
    manifest_path: str
    stats: dict = field(default_factory=dict)


def read_instructions(samples_dir: str) -> dict[str, str]:
    path = os.path.join(samples_dir, "instructions.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {path}")
    instructions = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            instructions[row["sample_id"]] = row["instruction"]
    if not instructions:
        raise ValueError(f"{path} lists no samples")
    return instructions


def load_mos_table(path: str | None) -> dict[str, dict] | None:
    if path is None:
        return None
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return doc.get("samples", doc.get("mos", doc))


def export_samples(
    samples_dir: str,
    driver,
    dump_path: str,
    manifest_path: str,
    mos_path: str | None = None,
    split_seed: int = 0,
    max_samples: int | None = None,
) -> ExportResult:
    instructions = read_instructions(samples_dir)
    ordered = sorted(instructions)
    if max_samples is not None:
        ordered = ordered[:max_samples]

    ids, rows, skipped = [], [], []
    for sid in ordered:
        src_path = os.path.join(samples_dir, "source", f"{sid}.png")
        edit_path = os.path.join(samples_dir, "edited", f"{sid}.png")
        if not (os.path.exists(src_path) and os.path.exists(edit_path)):
            skipped.append(sid)
            continue
        pairs = driver.hidden_pairs(load_rgb(src_path), load_rgb(edit_path), instructions[sid])
        expected = (driver.layer_count, 2, driver.hidden_size)
        if pairs.shape != expected:
            raise ValueError(
                f"driver returned shape {pairs.shape} for {sid}, expected {expected}"
            )
        ids.append(sid)
        rows.append(pairs)
    if not ids:
        raise ValueError("no exportable samples found")

    features = np.stack(rows).astype(np.float32)
    dumpfmt.write_dump(dump_path, ids, features)

    mos_table = load_mos_table(mos_path)
    mos = None
    if mos_table is not None:
        mos = {sid: mos_table[sid] for sid in ids if sid in mos_table}
    dumpfmt.write_manifest(
        manifest_path,
        ids,
        backbone_name=getattr(driver, "model_name", driver.name),
        config_echo={
            "driver": driver.name,
            "layer_count": driver.layer_count,
            "hidden_size": driver.hidden_size,
            "image_size": driver.image_size,
            "split_seed": split_seed,
        },
        mos=mos,
        split_seed=split_seed,
    )
    return ExportResult(
        ids=ids,
        skipped=skipped,
        n_layers=driver.layer_count,
        dim=driver.hidden_size,
        dump_path=dump_path,
        manifest_path=manifest_path,
        stats={"n_exported": len(ids), "n_skipped": len(skipped)},
    )
