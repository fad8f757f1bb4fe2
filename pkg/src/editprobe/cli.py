"""Command-line surface for the two-stage pipeline.

Subcommands compose via files:
  synth          seeded benchmark: ratings CSV, feature dump, manifest
                 (optionally an image-pair sample directory)
  mos            ratings CSV -> MOS report JSON
  layers         dump + labels -> per-layer statistics and the selected layer
  train          dump + labels -> one probe model per dimension
  eval           models + dump + labels -> SRCC/PLCC/KRCC report
  baseline       image pairs + MOS -> classical metric correlations
  finetune       raw sample directory -> adapter-tuned model
  validate-dump  format check for a feature dump

Exit codes: 0 success, 1 usage error, 2 data/format error. Every output JSON
embeds a reproducibility block (seed, config hash, versions). The
EDITPROBE_SEED environment variable overrides --seed everywhere.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from editprobe import hiddendump as hd
from editprobe import mos as mos_mod
from editprobe.adapters import AdapterConfig, AdapterSet
from editprobe.backbone import Backbone, BackboneConfig, EditSample
from editprobe.baselines import baseline_report
from editprobe.common import (
    ALL_DIMENSIONS,
    atomic_write_json,
    effective_seed,
    load_json,
    repro_block,
    split_of,
)
from editprobe.correlations import correlation_cell
from editprobe.errors import DataError, EditProbeError
from editprobe.layer_select import SaliencyConfig, analyze_layers
from editprobe.probe import ProbeConfig, ProbeModel, finetune_probe, train_probe
from editprobe.synthetic import ImageSynthConfig, SynthConfig, gen_cohort, gen_image_pairs


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_labels(manifest_path: str | None, mos_path: str | None) -> tuple[dict, dict | None]:
    manifest = hd.load_manifest(manifest_path) if manifest_path else None
    mos_doc = load_json(mos_path) if mos_path else None
    return manifest, mos_doc


def _mos_source(manifest: dict, mos_doc: dict | None) -> dict:
    """MOS labels come from the explicit MOS report when given, else the manifest."""
    return mos_doc if mos_doc is not None else manifest


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _write_images(out_dir: str, config: ImageSynthConfig, planted_mos=None) -> None:
    from PIL import Image

    ids, sources, editeds, instructions, mos_overall = gen_image_pairs(config, planted_mos)
    os.makedirs(os.path.join(out_dir, "source"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "edited"), exist_ok=True)

    def save(image, path):
        Image.fromarray(np.round(image * 255.0).astype(np.uint8)).save(path)

    pairs = []
    for i, sid in enumerate(ids):
        src_rel = os.path.join("source", f"{sid}.png")
        edit_rel = os.path.join("edited", f"{sid}.png")
        save(sources[i], os.path.join(out_dir, src_rel))
        save(editeds[i], os.path.join(out_dir, edit_rel))
        pairs.append({"id": sid, "source": src_rel, "edited": edit_rel})
    with open(os.path.join(out_dir, "instructions.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "instruction"])
        writer.writerows(zip(ids, instructions))
    atomic_write_json(os.path.join(out_dir, "pairs.json"), {"pairs": pairs})
    atomic_write_json(
        os.path.join(out_dir, "mos.json"),
        {
            "samples": {
                sid: {"mos_q": m, "mos_e": m, "mos_p": m, "mos_o": m}
                for sid, m in zip(ids, mos_overall.tolist())
            }
        },
    )


def cmd_synth(args) -> int:
    seed = effective_seed(args.seed)
    config = SynthConfig(
        n_samples=args.n_samples,
        n_subjects=args.n_subjects,
        n_layers=args.layers,
        dim=args.dim,
        planted_layer=args.planted_layer,
        signal=args.signal,
        feature_noise=args.feature_noise,
        rating_noise=args.rating_noise,
        nonlinear=args.nonlinear,
        seed=seed,
    )
    if args.zero_noise:
        config = config.zero_noise()
    cohort = gen_cohort(config)
    os.makedirs(args.out, exist_ok=True)

    mos_mod.write_ratings_csv(os.path.join(args.out, "ratings.csv"), cohort.records)
    hd.write_dump(
        os.path.join(args.out, "features.ephs"),
        hd.HiddenDump(ids=cohort.sample_ids, features=cohort.features),
    )
    semantic = {k: v for k, v in config.__dict__.items()}
    manifest = hd.build_manifest(
        ids=cohort.sample_ids,
        mos=cohort.planted_mos,
        splits={sid: split_of(sid, seed) for sid in cohort.sample_ids},
        provenance={"kind": "toy", "backbone": "synthetic-benchmark"},
        config_echo=semantic,
        repro=repro_block(seed, semantic),
    )
    atomic_write_json(os.path.join(args.out, "manifest.json"), manifest)

    if args.images:
        _write_images(
            os.path.join(args.out, "samples"),
            ImageSynthConfig(n_samples=args.n_samples, side=args.image_side, seed=seed),
        )
    print(f"wrote {args.n_samples} samples to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# mos
# ---------------------------------------------------------------------------


def cmd_mos(args) -> int:
    records = mos_mod.read_ratings_csv(args.ratings)
    result = mos_mod.process_ratings(records, threshold=args.threshold)
    semantic = {"threshold": args.threshold, "n_records": len(records)}
    document = {
        "repro": repro_block(effective_seed(args.seed), semantic),
        "samples": result.per_sample,
        "screening": {
            "rejected_subjects": result.rejected_subjects,
            "outlier_fraction": result.outlier_fraction,
            "excluded_samples": result.excluded_samples,
        },
    }
    atomic_write_json(args.out, document)
    print(
        f"{len(result.per_sample)} samples scored; rejected subjects: "
        f"{result.rejected_subjects or 'none'}; outlier fraction {result.outlier_fraction:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def cmd_layers(args) -> int:
    dump = hd.read_dump(args.dump)
    manifest, mos_doc = _load_labels(args.manifest, args.mos)
    ids = hd.align_manifest(dump, manifest)
    labels = hd.mos_vector(_mos_source(manifest, mos_doc), ids, args.dimension)
    config = SaliencyConfig(
        alpha=args.alpha,
        beta=args.beta,
        gamma=args.gamma,
        histogram_bins=args.bins,
        quality_bins=args.quality_bins,
        split_quantile=args.quantile,
    )
    stats = analyze_layers(dump.features, labels, ids, config)
    semantic = {
        "alpha": args.alpha,
        "beta": args.beta,
        "gamma": args.gamma,
        "bins": args.bins,
        "quality_bins": args.quality_bins,
        "quantile": args.quantile,
        "dimension": args.dimension,
    }
    document = {"repro": repro_block(effective_seed(args.seed), semantic)}
    document.update(stats.to_json(config))
    document["label_dimension"] = args.dimension
    atomic_write_json(args.out, document)
    print(f"selected layer {stats.selected_layer} of {stats.n_layers}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _resolve_layer(args, dump, ids, labels) -> int:
    if args.layer != "auto":
        layer = int(args.layer)
        if not 1 <= layer <= dump.n_layers:
            raise DataError(f"layer {layer} outside 1..{dump.n_layers}")
        return layer
    if args.layer_stats:
        stats_doc = load_json(args.layer_stats)
        return int(stats_doc["selected_layer"])
    return analyze_layers(dump.features, labels, ids).selected_layer


def cmd_train(args) -> int:
    seed = effective_seed(args.seed)
    dump = hd.read_dump(args.dump)
    manifest, mos_doc = _load_labels(args.manifest, args.mos)
    ids = hd.align_manifest(dump, manifest)
    source = _mos_source(manifest, mos_doc)
    dimensions = list(ALL_DIMENSIONS) if args.dimension == "all" else [args.dimension]

    os.makedirs(args.out, exist_ok=True)
    pooled = dump.features.astype(np.float32).mean(axis=2)  # (n, L, d)
    reports = {}
    for dimension in dimensions:
        labels = hd.mos_vector(source, ids, dimension)
        layer = _resolve_layer(args, dump, ids, labels)
        feats = pooled[:, layer - 1, :]
        config = ProbeConfig(
            epochs=args.epochs,
            batch_size=args.batch,
            lr=args.lr,
            seed=seed,
            head=args.head,
            dimension=dimension,
        )
        model, report = train_probe(feats, labels, ids, layer, config)
        model.save(os.path.join(args.out, f"{dimension}.epm"))
        reports[dimension] = {"layer": layer, **report.to_json()}
        print(
            f"{dimension}: layer {layer}, best epoch {report.best_epoch}, "
            f"val SRCC {report.val_srcc[report.best_epoch]}"
        )
    semantic = {
        "epochs": args.epochs,
        "batch": args.batch,
        "lr": args.lr,
        "head": args.head,
        "layer": args.layer,
        "dimensions": dimensions,
    }
    atomic_write_json(
        os.path.join(args.out, "train_report.json"),
        {"repro": repro_block(seed, semantic), "dimensions": reports},
    )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _model_paths(models_arg: str) -> dict[str, str]:
    if os.path.isdir(models_arg):
        found = {}
        for dimension in ALL_DIMENSIONS:
            path = os.path.join(models_arg, f"{dimension}.epm")
            if os.path.exists(path):
                found[dimension] = path
        if not found:
            raise DataError(f"no .epm model files found in {models_arg}")
        return found
    model = ProbeModel.load(models_arg)
    return {model.dimension: models_arg}


def cmd_eval(args) -> int:
    dump = hd.read_dump(args.dump)
    manifest, mos_doc = _load_labels(args.manifest, args.mos)
    ids = hd.align_manifest(dump, manifest)
    source = _mos_source(manifest, mos_doc)
    pooled = dump.features.astype(np.float32).mean(axis=2)

    per_dimension = {}
    model_files = _model_paths(args.models)
    for dimension in ALL_DIMENSIONS:
        if dimension not in model_files:
            per_dimension[dimension] = None
            continue
        model = ProbeModel.load(model_files[dimension])
        labels = hd.mos_vector(source, ids, dimension)
        if args.split == "all":
            keep = np.arange(len(ids))
        else:
            keep = np.array(
                [i for i, sid in enumerate(ids) if split_of(sid, model.split_seed) == args.split],
                dtype=np.intp,
            )
        if keep.size < 3:
            raise DataError(f"split {args.split!r} holds {keep.size} samples; need >= 3")
        feats = pooled[keep, model.layer_index - 1, :]
        preds = model.predict(feats)
        per_dimension[dimension] = correlation_cell(preds, labels[keep])
    semantic = {"split": args.split, "dimensions": sorted(model_files)}
    document = {
        "repro": repro_block(effective_seed(args.seed), semantic),
        "split": args.split,
        "per_dimension": per_dimension,
    }
    atomic_write_json(args.out, document)
    for dimension, cell in per_dimension.items():
        if cell:
            print(
                f"{dimension}: SRCC {cell['srcc']:.4f} PLCC {cell['plcc']:.4f} "
                f"KRCC {cell['krcc']:.4f} (n={cell['n']})"
            )
    return 0


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


def _read_image(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def cmd_baseline(args) -> int:
    pairs_doc = load_json(args.pairs)
    base_dir = os.path.dirname(os.path.abspath(args.pairs))
    pairs = {}
    for entry in pairs_doc["pairs"]:
        pairs[entry["id"]] = (
            _read_image(os.path.join(base_dir, entry["source"])),
            _read_image(os.path.join(base_dir, entry["edited"])),
        )
    mos_doc = load_json(args.mos)
    mos_table = mos_doc.get("samples", mos_doc.get("mos", {}))
    metrics = tuple(args.metrics.split(","))
    report = baseline_report(pairs, mos_table, metrics)
    semantic = {"metrics": list(metrics), "n_pairs": report["n_pairs"]}
    document = {"repro": repro_block(effective_seed(args.seed), semantic), **report}
    atomic_write_json(args.out, document)
    for metric, block in report["metrics"].items():
        cell = block["correlations"]["overall"]
        print(f"{metric}: overall SRCC {cell['srcc']}")
    return 0


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------


def _load_samples(samples_dir: str, config: BackboneConfig) -> tuple[list[str], list[EditSample]]:
    instructions_path = os.path.join(samples_dir, "instructions.csv")
    if not os.path.exists(instructions_path):
        raise DataError(f"missing {instructions_path}")
    instructions = {}
    with open(instructions_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            instructions[row["sample_id"]] = row["instruction"]
    from PIL import Image

    ids, samples = [], []
    missing = []
    for sid in sorted(instructions):
        src = os.path.join(samples_dir, "source", f"{sid}.png")
        edit = os.path.join(samples_dir, "edited", f"{sid}.png")
        if not (os.path.exists(src) and os.path.exists(edit)):
            missing.append(sid)
            continue

        def load(path):
            with Image.open(path) as img:
                img = img.convert("RGB").resize((config.image_side, config.image_side))
                return np.asarray(img, dtype=np.float32) / 255.0

        ids.append(sid)
        samples.append(EditSample(load(src), load(edit), instructions[sid]))
    if missing:
        raise DataError(f"{len(missing)} samples missing image files (first: {missing[:5]})")
    return ids, samples


def cmd_finetune(args) -> int:
    seed = effective_seed(args.seed)
    bb_config = BackboneConfig(seed=args.backbone_seed)
    ids, samples = _load_samples(args.samples, bb_config)
    mos_doc = load_json(args.mos)
    labels = hd.mos_vector(mos_doc, ids, args.dimension)

    backbone = Backbone(bb_config)
    layer = args.layer
    if layer == "auto":
        from editprobe.backbone import dump_pairs_for_samples

        pairs = dump_pairs_for_samples(backbone, samples)
        layer = analyze_layers(pairs, labels, ids).selected_layer
    else:
        layer = int(layer)
        if not 1 <= layer <= bb_config.lm_depth:
            raise DataError(f"layer {layer} outside 1..{bb_config.lm_depth}")

    adapters = None
    if args.adapt != "none":
        adapters = AdapterSet.attach(
            backbone,
            AdapterConfig(
                rank=args.rank,
                scaling=args.scaling,
                dropout=args.dropout,
                targets=args.adapt,
                target_rank=args.target_rank,
                plain_lora=args.plain_lora,
                seed=seed,
            ),
        )
    config = ProbeConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=seed,
        dimension=args.dimension,
    )
    model, adapters, report = finetune_probe(samples, labels, ids, backbone, adapters, layer, config)
    os.makedirs(args.out, exist_ok=True)
    model.save(os.path.join(args.out, f"{args.dimension}.epm"))
    semantic = {
        "epochs": args.epochs,
        "batch": args.batch,
        "lr": args.lr,
        "layer": layer,
        "adapt": args.adapt,
        "rank": args.rank,
        "dimension": args.dimension,
        "plain_lora": args.plain_lora,
        "backbone_seed": args.backbone_seed,
    }
    doc = {
        "repro": repro_block(seed, semantic),
        "layer": layer,
        "average_active_rank": adapters.average_active_rank() if adapters else None,
        **report.to_json(),
    }
    atomic_write_json(os.path.join(args.out, "finetune_report.json"), doc)
    print(
        f"{args.dimension}: layer {layer}, best epoch {report.best_epoch}, "
        f"val SRCC {report.val_srcc[report.best_epoch]}"
    )
    return 0


# ---------------------------------------------------------------------------
# validate-dump
# ---------------------------------------------------------------------------


def cmd_validate_dump(args) -> int:
    summary = hd.validate_dump(args.dump, args.manifest)
    print(
        f"ok: {summary['n_samples']} samples x {summary['n_layers']} layers x "
        f"{summary['dim']} dims ({summary['bytes']} bytes)"
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="editprobe", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the seeded synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=512)
    p.add_argument("--n-subjects", type=int, default=20)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--planted-layer", type=int, default=4)
    p.add_argument("--signal", type=float, default=4.0)
    p.add_argument("--feature-noise", type=float, default=1.0)
    p.add_argument("--rating-noise", type=float, default=0.25)
    p.add_argument("--nonlinear", action="store_true")
    p.add_argument("--zero-noise", action="store_true")
    p.add_argument("--images", action="store_true", help="also write an image-pair sample directory")
    p.add_argument("--image-side", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mos", help="process ratings into MOS")
    p.add_argument("--ratings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mos)

    p = sub.add_parser("layers", help="per-layer statistics and layer selection")
    p.add_argument("--dump", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mos", default=None, help="MOS report overriding manifest labels")
    p.add_argument("--dimension", default="overall", choices=ALL_DIMENSIONS)
    p.add_argument("--alpha", type=float, default=1.0 / 3.0)
    p.add_argument("--beta", type=float, default=1.0 / 3.0)
    p.add_argument("--gamma", type=float, default=1.0 / 3.0)
    p.add_argument("--bins", type=int, default=64, help="histogram bins for the entropy statistic")
    p.add_argument("--quality-bins", type=int, default=5)
    p.add_argument("--quantile", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_layers)

    p = sub.add_parser("train", help="train probe models on dump features")
    p.add_argument("--dump", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mos", default=None)
    p.add_argument("--layer", default="auto", help="'auto' or a 1-indexed layer")
    p.add_argument("--layer-stats", default=None, help="layer-stats JSON for --layer auto")
    p.add_argument("--dimension", default="all", choices=("all",) + ALL_DIMENSIONS)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--head", default="mlp", choices=("mlp", "linear"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="correlation report for trained models")
    p.add_argument("--models", required=True, help="model directory or single .epm file")
    p.add_argument("--dump", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mos", default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="classical full-reference metric report")
    p.add_argument("--pairs", required=True, help="pairs.json inside the sample directory")
    p.add_argument("--mos", required=True)
    p.add_argument("--metrics", default="mse,psnr,ssim")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("finetune", help="end-to-end adapter training on raw samples")
    p.add_argument("--samples", required=True, help="directory with source/, edited/, instructions.csv")
    p.add_argument("--mos", required=True)
    p.add_argument("--layer", default="auto")
    p.add_argument("--dimension", default="overall", choices=ALL_DIMENSIONS)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--adapt", default="both", choices=("both", "llm", "vision", "none"))
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--scaling", type=float, default=32.0)
    p.add_argument("--dropout", type=float, default=0.05)
    p.add_argument("--target-rank", type=int, default=None, help="defaults to min(8, rank)")
    p.add_argument("--plain-lora", action="store_true")
    p.add_argument("--backbone-seed", type=int, default=42)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("validate-dump", help="check a dump file's format")
    p.add_argument("--dump", required=True)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_validate_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except EditProbeError as exc:
        print(f"editprobe: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"editprobe: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
