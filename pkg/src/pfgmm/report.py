"""Static figure emission for study outputs.

Renders active-set-size bar charts (estimator comparison across
endogeneity strengths, one panel per endogenous set) from the delimited
cell tables the runner emits, writing PNG files next to the CSVs.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .data import DataError  # noqa: E402


def read_table(path):
    """Read a delimited table into a list of dicts (numbers parsed)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError("empty table")
        rows = []
        for row in reader:
            parsed = {}
            for key, val in row.items():
                if val is None or val == "":
                    parsed[key] = math.nan
                    continue
                try:
                    parsed[key] = float(val)
                except ValueError:
                    parsed[key] = val
            rows.append(parsed)
    return rows


def active_set_bars(rows, out_path, title=None):
    """Grouped bars of mean active-set size by strength, one group per estimator.

    rows carry columns estimator / strength / stat / S_size as written by
    the sweep table; SD rows become error bars when present.
    """
    means = {}
    sds = {}
    for row in rows:
        key = (row["estimator"], float(row.get("strength", 0.0)))
        if row.get("stat") == "mean":
            means[key] = float(row["S_size"])
        elif row.get("stat") == "sd":
            sds[key] = float(row["S_size"])
    if not means:
        raise DataError("no mean rows found for the bar chart")
    estimators = sorted({k[0] for k in means})
    strengths = sorted({k[1] for k in means})
    width = 0.8 / len(estimators)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for i, est in enumerate(estimators):
        xs = [j + (i - (len(estimators) - 1) / 2.0) * width
              for j in range(len(strengths))]
        ys = [means.get((est, s), math.nan) for s in strengths]
        errs = [sds.get((est, s), 0.0) for s in strengths]
        ax.bar(xs, ys, width=width, label=est, yerr=errs, capsize=2)
    ax.set_xticks(range(len(strengths)))
    ax.set_xticklabels([f"{s:g}" for s in strengths])
    ax.set_xlabel("endogeneity strength")
    ax.set_ylabel("mean active-set size")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def estimator_bars(rows, out_path, title=None):
    """Single-cell comparison: one bar of mean |S| (with SD) per estimator."""
    means, sds = {}, {}
    for row in rows:
        if row.get("stat") == "mean":
            means[row["estimator"]] = float(row["S_size"])
        elif row.get("stat") == "sd":
            sds[row["estimator"]] = float(row["S_size"])
    if not means:
        raise DataError("no mean rows found for the bar chart")
    names = sorted(means)
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.bar(range(len(names)), [means[n] for n in names],
           yerr=[sds.get(n, 0.0) for n in names], capsize=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20)
    ax.set_ylabel("mean active-set size")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def render_report(input_csv, out_dir, prefix="figure"):
    """Figures + a tidy summary CSV from a cells table or an aggregate table.

    Sweep tables (with a strength column) get one panel per endogenous set;
    plain aggregate tables get a single estimator comparison.  Returns the
    list of files written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_table(input_csv)
    written = []
    if rows and "strength" in rows[0]:
        by_set = defaultdict(list)
        for row in rows:
            by_set[row.get("endo_set", "all")].append(row)
        for tag, cell_rows in sorted(by_set.items()):
            path = out_dir / f"{prefix}_{tag}.png"
            active_set_bars(cell_rows, path, title=f"endogenous covariates: {tag}")
            written.append(path)
    else:
        path = out_dir / f"{prefix}.png"
        estimator_bars(rows, path)
        written.append(path)

    summary = out_dir / f"{prefix}_summary.csv"
    keep = [r for r in rows if r.get("stat") in ("mean", "sd")]
    cols = list(rows[0].keys()) if rows else []
    with open(summary, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in keep:
            writer.writerow(
                {k: (format(v, ".10g") if isinstance(v, float) and not math.isnan(v)
                     else ("" if isinstance(v, float) else v))
                 for k, v in row.items()}
            )
    written.append(summary)
    return written
