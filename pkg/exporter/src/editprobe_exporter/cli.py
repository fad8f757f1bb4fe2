"""Command-line exporter.

    editprobe-export --samples DIR --driver tiny --out dump.ephs \
        --manifest-out manifest.json [--mos mos.json]

Writes a feature dump plus manifest consumable by the editprobe toolkit
(`validate-dump`, `layers`, `train`, `eval`) with no extra flags. Exit codes:
0 success, 1 usage error, 2 failure or any skipped sample.
"""

from __future__ import annotations

import argparse
import sys

from editprobe_exporter.drivers import DEFAULT_PROMPT, get_driver
from editprobe_exporter.export import export_samples


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="editprobe-export", description=__doc__)
    parser.add_argument("--samples", required=True, help="directory with source/, edited/, instructions.csv")
    parser.add_argument("--driver", default="hf-causal", choices=("tiny", "hf-causal"))
    parser.add_argument("--model", default="", help="checkpoint name or path (driver-specific)")
    parser.add_argument("--out", required=True, help="dump output path")
    parser.add_argument("--manifest-out", required=True)
    parser.add_argument("--mos", default=None, help="MOS report JSON to embed into the manifest")
    parser.add_argument("--prompt", default=DEFAULT_PROMPT)
    parser.add_argument("--split-seed", type=int, default=0)
    parser.add_argument("--max-samples", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        driver = get_driver(args.driver, args.model, prompt=args.prompt)
        result = export_samples(
            args.samples,
            driver,
            dump_path=args.out,
            manifest_path=args.manifest_out,
            mos_path=args.mos,
            split_seed=args.split_seed,
            max_samples=args.max_samples,
        )
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"editprobe-export: {exc}", file=sys.stderr)
        return 2
    print(
        f"exported {len(result.ids)} samples "
        f"({result.n_layers} layers x {result.dim} dims) to {result.dump_path}"
    )
    if result.skipped:
        print(
            f"skipped {len(result.skipped)} samples missing images: {result.skipped[:10]}",
            file=sys.stderr,
        )
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
