"""Command-line entry points.

Subcommands: ``gen-stream`` (write a stream audit manifest), ``run`` (one
configured run, report out), ``ablate`` (method sweep) and ``report``
(tables/plots from stored metrics).  Configuration files are JSON with
the same keys as RunConfig; relative output paths resolve under
``$NOISYCRE_OUTPUT_ROOT`` (default: current directory).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import datastream, harness, reporting
from .errors import NoisyCREError, PhaseError


def _load_config(path) -> harness.RunConfig:
    with open(path) as fh:
        return harness.RunConfig.from_dict(json.load(fh))


def _resolve(path) -> Path:
    root = Path(os.environ.get("NOISYCRE_OUTPUT_ROOT", "."))
    path = Path(path)
    return path if path.is_absolute() else root / path


def _cmd_gen_stream(args) -> int:
    config = _load_config(args.config)
    stream = harness.build_stream_from_config(config)
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    datastream.write_stream_manifest(stream, out)
    print(f"wrote stream manifest: {out}")
    return 0


def _cmd_run(args) -> int:
    config = _load_config(args.config)
    out = _resolve(args.out)
    report = harness.run_stream(config, out_dir=out)
    paths = reporting.emit_report(report, out, plots=args.plots)
    print(reporting.human_table(report), end="")
    print(f"metrics: {paths['metrics']}")
    return 0


def _cmd_ablate(args) -> int:
    config = _load_config(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    result = harness.ablate(config, methods, seeds)
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for method, reports in result["reports"].items():
        for report in reports:
            reporting.emit_report(report, out / f"{method}_seed{report.seed}")
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(result["summary"], sort_keys=True, indent=1) + "\n")
    print(reporting.ablation_table(result["summary"]), end="")
    print(f"summary: {summary_path}")
    return 0


def _cmd_report(args) -> int:
    report = reporting.load_report(args.metrics)
    out = _resolve(args.out)
    paths = reporting.emit_report(report, out, plots=args.plots)
    print(reporting.human_table(report), end="")
    print(f"artifacts: {', '.join(str(p) for p in paths.values())}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisycre",
        description="Continual relation learning under label noise, at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-stream", help="build a task stream and write its audit manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="stream_manifest.json")
    p.set_defaults(fn=_cmd_gen_stream)

    p = sub.add_parser("run", help="run one configured stream and emit its report")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="run_out")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("ablate", help="sweep methods over seeds and summarize")
    p.add_argument("--config", required=True)
    p.add_argument("--methods", default="nacl,noise-retain,discard,finetune")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out", default="ablation_out")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("report", help="regenerate tables/plots from stored metrics")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", default="report_out")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NoisyCREError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
