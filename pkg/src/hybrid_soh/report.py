"""Report rendering: metric files (csv/json) and static SVG plots.

Rendering is deterministic: the SVG writer gets a fixed hash salt and no
date stamp, so regenerating from a persisted report gives identical bytes.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .params import NOMINAL_CAPACITY_AH  # noqa: E402
from .pipeline import ExperimentReport, summary_rows  # noqa: E402

FORMATS = ("csv", "json", "svg")
BAND_PCT = 2.0
SUMMARY_FIELDS = ("scenario", "mae_before_pct", "mae_after_pct", "rmse_before_ah", "rmse_after_ah", "within2_after")


class ReportError(OSError):
    pass


def _check_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ReportError(f"{out} is not writable")
    return out


def _save_svg(fig, path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "hybrid-soh", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _curve_figure(curve: dict, title: str):
    cyc = np.asarray(curve["cycles"])
    true = np.asarray(curve["true"])
    band = BAND_PCT / 100.0 * NOMINAL_CAPACITY_AH
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.fill_between(cyc, true - band, true + band, color="0.85", lw=0, label=f"true ±{BAND_PCT:g}%")
    ax.plot(cyc, true, "k-", lw=1.2, label="true")
    ax.plot(cyc, curve["before"], "o", ms=3, mfc="none", color="tab:orange", label="pre-trained")
    ax.plot(cyc, curve["after"], "s", ms=3, color="tab:blue", label="transfer")
    ax.set_xlabel("cycle")
    ax.set_ylabel("capacity (Ah)")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return fig


def _histogram_figure(report: ExperimentReport):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    eb = np.asarray(report.extra.get("errors_before_pct", []), dtype=float)
    ea = np.asarray(report.extra.get("errors_after_pct", []), dtype=float)
    allv = np.concatenate([eb, ea]) if eb.size + ea.size else np.zeros(1)
    lim = max(1.0, float(np.ceil(np.abs(allv).max())))
    bins = np.linspace(-lim, lim, 41)
    ax.hist(eb, bins=bins, alpha=0.6, color="tab:orange", label="pre-trained")
    ax.hist(ea, bins=bins, alpha=0.6, color="tab:blue", label="transfer")
    ax.set_xlabel("SOH error (%)")
    ax.set_ylabel("segments")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return fig


def metric_rows(report: ExperimentReport) -> list[dict]:
    rows = []
    cells = sorted(report.metrics_before["per_cell"], key=int)
    for key in ["all", *cells]:
        if key == "all":
            b, a = report.metrics_before, report.metrics_after
        else:
            b, a = report.metrics_before["per_cell"][key], report.metrics_after["per_cell"][key]
        rows.append({"scenario": report.scenario, "cell": key, "n": b["n"],
                     "mae_before_pct": b["mae_soh_pct"], "mae_after_pct": a["mae_soh_pct"],
                     "rmse_before_ah": b["rmse_ah"], "rmse_after_ah": a["rmse_ah"]})
    return rows


def emit_report(report: ExperimentReport, out_dir, formats=FORMATS) -> list[Path]:
    """Write the report in the requested formats; returns the files written.

    svg: one capacity-vs-cycle plot per cell and one error histogram.
    csv: per-cell metric table.  json: the full report.
    """
    bad = set(formats) - set(FORMATS)
    if bad:
        raise ValueError(f"unknown formats {sorted(bad)}")
    out = _check_dir(out_dir)
    stem = report.scenario
    files = []
    if "svg" in formats:
        figures = []
        for cell in sorted(report.curves, key=int):
            curve = report.curves[cell]
            path = out / f"{stem}-cell{cell}.svg"
            _save_svg(_curve_figure(curve, f"{stem}: {curve.get('name', cell)}"), path)
            figures.append(path.name)
        path = out / f"{stem}-errors.svg"
        _save_svg(_histogram_figure(report), path)
        figures.append(path.name)
        report.figures = figures
        files += [out / f for f in figures]
    if "csv" in formats:
        path = out / f"{stem}-metrics.csv"
        rows = metric_rows(report)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        files.append(path)
    if "json" in formats:
        path = out / f"{stem}.json"
        path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1))
        files.append(path)
    return files


def load_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


def emit_summary(reports, path) -> Path:
    """Sweep comparison table; an empty sweep gives a header-only file."""
    path = Path(path)
    _check_dir(path.parent)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(summary_rows(reports))
    return path
