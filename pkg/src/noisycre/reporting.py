"""Report emission: metrics files, human tables and diagnostic plots.

The metrics file is canonical JSON (sorted keys, no timing data) so two
runs with identical configuration and seeds write byte-identical files;
wall-clock numbers go to a sidecar.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .errors import ConfigurationError
from .harness import RunReport


def report_to_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"


def parse_report(text: str) -> RunReport:
    return RunReport.from_dict(json.loads(text))


def load_report(path) -> RunReport:
    return parse_report(Path(path).read_text())


def _fmt(value, width=8):
    if value is None:
        return "-".rjust(width)
    return f"{value:.4f}".rjust(width)


def human_table(report: RunReport) -> str:
    """Per-task metric table plus the run summary."""
    lines = [
        f"method={report.method}  seed={report.seed}",
        f"last accuracy        : {report.last_accuracy:.4f}",
        "normalized forgetting: "
        + ("undefined (first-task accuracy is zero)"
           if report.normalized_forgetting is None
           else f"{report.normalized_forgetting:.4f}"),
        "",
        "task     acc     asr  purity  selP    selR",
    ]
    for rec in report.tasks:
        k = rec.task_index
        acc = report.accuracy_matrix[k][k] if k < len(report.accuracy_matrix) else None
        lines.append(
            f"{k:4d}"
            + _fmt(acc)
            + _fmt(rec.asr)
            + _fmt(rec.buffer_purity)
            + _fmt(rec.selection_precision)
            + _fmt(rec.selection_recall)
        )
    return "\n".join(lines) + "\n"


def emit_report(report: RunReport, out_dir, plots: bool = False) -> dict:
    """Write metrics.json, timing.json, report.txt and optional plots.

    Returns a mapping of artifact names to paths.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output dir {out}: {exc}") from exc

    paths = {}
    metrics = out / "metrics.json"
    metrics.write_text(report_to_json(report))
    paths["metrics"] = metrics

    timing = out / "timing.json"
    timing.write_text(
        json.dumps(
            {"per_task_seconds": [rec.wall_clock for rec in report.tasks]}, indent=1
        )
        + "\n"
    )
    paths["timing"] = timing

    table = out / "report.txt"
    table.write_text(human_table(report))
    paths["table"] = table

    if report.embedding_2d is not None:
        dump = out / "embedding_2d.csv"
        with open(dump, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "gold_label", "x", "y"])
            writer.writerows(report.embedding_2d)
        paths["embedding_2d"] = dump

    if plots:
        paths.update(_write_plots(report, out))
    return paths


def _write_plots(report: RunReport, out: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {}

    # Accuracy over seen tasks at each stage.
    fig, ax = plt.subplots(figsize=(5, 3.5))
    stages = range(1, len(report.accuracy_matrix) + 1)
    seen_acc = [
        sum(a * n for a, n in zip(row, report.test_sizes)) / sum(report.test_sizes[: len(row)])
        for row in report.accuracy_matrix
    ]
    ax.plot(list(stages), seen_acc, marker="o", label=report.method)
    ax.set_xlabel("task")
    ax.set_ylabel("accuracy on seen tasks")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    path = out / "accuracy_curve.png"
    fig.savefig(path)
    plt.close(fig)
    paths["accuracy_curve"] = path

    # Confidence histograms of the last task with both populations.
    last = None
    for rec in reversed(report.tasks):
        if rec.confidences_true_clean or rec.confidences_true_noisy:
            last = rec
            break
    if last is not None:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        bins = [i / 20 for i in range(21)]
        ax.hist(last.confidences_true_clean, bins=bins, alpha=0.6, label="clean")
        ax.hist(last.confidences_true_noisy, bins=bins, alpha=0.6, label="noisy")
        ax.set_xlabel("confidence")
        ax.set_ylabel("count")
        ax.legend()
        fig.tight_layout()
        path = out / "confidence_hist.png"
        fig.savefig(path)
        plt.close(fig)
        paths["confidence_hist"] = path

    # Training loss per task.
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rec in report.tasks:
        xs = [rec.task_index + (e + 1) / max(len(rec.train_losses), 1) for e, _, _ in rec.train_losses]
        ys = [loss for _, loss, _ in rec.train_losses if loss is not None]
        if ys:
            ax.plot(xs[: len(ys)], ys, marker=".")
    ax.set_xlabel("task")
    ax.set_ylabel("mean training loss")
    fig.tight_layout()
    path = out / "loss_curve.png"
    fig.savefig(path)
    plt.close(fig)
    paths["loss_curve"] = path

    # Attack success rate per task.
    asr_tasks = [(rec.task_index, rec.asr) for rec in report.tasks if rec.asr is not None]
    if asr_tasks:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar([t for t, _ in asr_tasks], [a for _, a in asr_tasks])
        ax.set_xlabel("task")
        ax.set_ylabel("attack success rate")
        ax.set_ylim(0, 1)
        fig.tight_layout()
        path = out / "asr_bars.png"
        fig.savefig(path)
        plt.close(fig)
        paths["asr_bars"] = path
    return paths


def ablation_table(summary: dict) -> str:
    lines = ["method          last_acc   forgetting"]
    for method, row in summary.items():
        forget = row["median_forgetting"]
        lines.append(
            f"{method:<14}{row['median_last_accuracy']:>10.4f}"
            + ("   undefined" if forget is None else f"{forget:>13.4f}")
        )
    return "\n".join(lines) + "\n"
