"""Report emission: machine-parsable text, plot-ready CSV, and figures.

Text reports (``arcplan-report v1``) hold one ``<structure>.<metric> =
<value>`` line per metric under ``case <id>`` markers, so multi-case batches
are plain concatenations.  The CSV carries ``structure,metric,value`` rows
for plotting.  Figures are rendered with the Agg backend next to the
delimited output.
"""

from __future__ import annotations

import csv
from collections import OrderedDict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .analytics import DVHCurve, MetricReport

REPORT_MAGIC = "arcplan-report v1"

STRUCTURE_COLORS = {"PTV": "tab:blue", "Bladder": "tab:green", "Rectum": "tab:orange"}


def write_report_text(report: MetricReport, path, case_id: str = "case0") -> None:
    lines = [REPORT_MAGIC, f"case {case_id}"]
    for structure, metric, value in report.rows():
        lines.append(f"{structure}.{metric} = {float(value)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_report_text(path) -> "OrderedDict[str, dict[tuple[str, str], float]]":
    """Parse one or more concatenated report documents into
    ``{case_id: {(structure, metric): value}}`` preserving case order."""
    cases: OrderedDict[str, dict[tuple[str, str], float]] = OrderedDict()
    current: dict[tuple[str, str], float] | None = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line == REPORT_MAGIC:
                continue
            if line.startswith("case "):
                case_id = line.split(None, 1)[1]
                current = cases.setdefault(case_id, {})
                continue
            if current is None:
                raise ValueError(f"{path}: metric line before any 'case' marker: {line!r}")
            key, _, value = line.partition("=")
            structure, _, metric = key.strip().partition(".")
            current[(structure, metric)] = float(value.strip())
    if not cases:
        raise ValueError(f"{path}: no cases found")
    return cases


def write_report_csv(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["structure", "metric", "value"])
        for structure, metric, value in report.rows():
            writer.writerow([structure, metric, repr(float(value))])


def dvh_figure(curves: dict[str, DVHCurve], rx: float, path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name, curve in curves.items():
        ax.plot(curve.edges, 100.0 * curve.volume_fraction,
                color=STRUCTURE_COLORS.get(name), label=name)
    ax.axvline(rx, color="gray", lw=0.8, ls=":")
    ax.set_xlabel("Dose (Gy)")
    ax.set_ylabel("Volume (%)")
    ax.set_xlim(0.0, max(c.edges[-1] for c in curves.values()))
    ax.set_ylim(0.0, 102.0)
    ax.legend(frameon=False)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def trace_figure(trace, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(np.arange(len(trace)), trace, marker="o", ms=2.5)
    ax.set_xlabel("Iteration")
    ax.set_ylabel("Composite objective")
    ax.set_yscale("log")
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def fluence_figure(fluence_values: np.ndarray, cp_index: int, path,
                   plan=None) -> None:
    """Heatmap of one control point's fluence, optionally with the aperture."""
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    fmap = fluence_values[cp_index]
    n_rows, n_cols = fmap.shape
    im = ax.imshow(fmap, origin="lower", cmap="inferno",
                   extent=(0, n_cols, 0, n_rows), interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.85, label="fluence")
    if plan is not None:
        ap = plan.apertures[cp_index]
        fov = plan.fov
        left_px = (ap.left + fov / 2.0) / plan.spacing
        right_px = (ap.right + fov / 2.0) / plan.spacing
        rows = np.arange(ap.n_rows)
        open_rows = ~ap.is_closed()
        for r in rows[open_rows]:
            ax.plot([left_px[r], left_px[r]], [r, r + 1], color="cyan", lw=1.0)
            ax.plot([right_px[r], right_px[r]], [r, r + 1], color="cyan", lw=1.0)
    ax.set_title(f"control point {cp_index}")
    ax.set_xlabel("leaf travel (px)")
    ax.set_ylabel("leaf row")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def write_timing_table(timings, path) -> None:
    with open(path, "w") as fh:
        fh.write(timings.table() + "\n")
