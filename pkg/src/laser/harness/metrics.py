"""Writing run metrics to disk: JSON, CSV traces, a text summary, plot data."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from ..tracker import write_event_log
from .config import dump_config
from .runner import ExperimentResult, RunMetrics

TRACE_FIELDS = ("step", "site", "fidelity", "rank", "event")
SHADOW_FIELDS = ("step", "site", "rank", "laser", "oracle", "static", "random")


def _write_csv(path: Path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def emit_metrics(metrics: RunMetrics, directory) -> Path:
    """Write one seed's ``metrics.json``, ``traces.csv``, ``summary.txt``, ``plotdata/``."""
    d = Path(directory)
    (d / "plotdata").mkdir(parents=True, exist_ok=True)
    _dump_json(metrics.to_dict(), d / "metrics.json")
    _write_csv(d / "traces.csv", TRACE_FIELDS, metrics.traces)
    write_event_log(metrics.events, d / "events.jsonl")
    _write_csv(d / "plotdata" / "loss.csv", ("step", "epoch", "loss", "token_acc", "lr", "skipped"), metrics.steps)
    _write_csv(d / "plotdata" / "val.csv", ("epoch", "step", "token_accuracy", "solve_rate"), metrics.evals)
    _write_csv(d / "plotdata" / "shadow.csv", SHADOW_FIELDS, metrics.shadow)
    lines = [f"mode {metrics.mode}  seed {metrics.seed}"]
    if metrics.failed:
        lines.append(f"FAILED: {metrics.failed}")
    if metrics.final:
        lines.append(f"val acc {metrics.final['val_acc']:.2f}%  solved {metrics.final['solve_rate']:.2f}%")
    mem = metrics.memory
    if mem:
        lines.append(f"activation memory {mem['total_full']} -> {mem['total_compressed']} bytes ({mem['total_savings_pct']:.1f}% saved)")
        for s in mem["sites"]:
            rank = s["rank"] if s["rank"] is not None else "full"
            lines.append(f"  {s['site']:<14} dim {s['dim']:>5}  rank {rank!s:>5}  savings {s['savings_pct']:6.1f}%")
    lines.append(f"counts {metrics.counts}")
    (d / "summary.txt").write_text("\n".join(lines) + "\n")
    return d


def summary_table(results: dict[str, ExperimentResult]) -> str:
    """Mean +- std table with one row per mode."""
    lines = [f"{'Method':<20}{'Val Acc (%)':>18}{'Val Solved (%)':>20}{'Act. Mem. (bytes)':>20}"]
    for name, res in results.items():
        a = res.aggregate
        lines.append(
            f"{name:<20}{a['val_acc']['mean']:>10.2f} +- {a['val_acc']['std']:<5.2f}"
            f"{a['solve_rate']['mean']:>12.2f} +- {a['solve_rate']['std']:<5.2f}"
            f"{a['total_bytes_compressed']['mean']:>20.0f}"
        )
    lines.append("(mean +- sample std over seeds)")
    return "\n".join(lines) + "\n"


def write_experiment(result: ExperimentResult, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.toml").write_text(dump_config(result.config))
    payload = {
        "config": result.config.to_dict(),
        "aggregate": result.aggregate,
        "runs": {str(s): r.to_dict() for s, r in sorted(result.runs.items())},
    }
    _dump_json(payload, d / "metrics.json")
    _dump_json({str(s): r.wall_seconds for s, r in sorted(result.runs.items())}, d / "timing.json")
    (d / "summary.txt").write_text(summary_table({result.config.mode.value: result}))
    for s, r in sorted(result.runs.items()):
        emit_metrics(r, d / f"seed_{s}")
    return d
