"""CSV tables and SVG plots for study reports."""

from __future__ import annotations

import csv
import io
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import ReportRow, StudyReport  # noqa: E402
from .volume import atomic_write_text  # noqa: E402

CSV_FIELDS = ["method", "class", "dice_mean", "dice_std", "assd_mean", "assd_std", "n_cases"]
FORMATS = ("csv", "scatter", "trend")
_ITER_RE = re.compile(r"(?:^|[_\s-])(?:st|iter)[_\s-]?(\d+)$", re.IGNORECASE)


def _flatten(rows) -> list[ReportRow]:
    out: list[ReportRow] = []
    for r in rows:
        out.extend(r.rows if isinstance(r, StudyReport) else [r])
    return out


def rows_to_csv(rows) -> str:
    """Rows as CSV text. Standard deviations are population std."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in _flatten(rows):
        w.writerow([r.method, r.cls, f"{r.dice_mean:.6f}", f"{r.dice_std:.6f}",
                    f"{r.assd_mean:.6f}", f"{r.assd_std:.6f}", r.n_cases])
    return buf.getvalue()


def read_csv(path) -> list[ReportRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"{path}: expected columns {CSV_FIELDS}, got {reader.fieldnames}")
        return [ReportRow(d["method"], d["class"], float(d["dice_mean"]), float(d["dice_std"]),
                          float(d["assd_mean"]), float(d["assd_std"]), int(d["n_cases"])) for d in reader]


def iteration_of(method: str) -> int | None:
    """Self-training iteration encoded in a method name (``st3``, ``ST iter 2``), else None."""
    m = _ITER_RE.search(method.strip())
    return int(m.group(1)) if m else None


def scatter_plot(rows, path) -> dict[str, tuple[float, float]]:
    """Mean Dice against mean ASSD, one point per method. Returns the plotted points."""
    points = {r.method: (r.dice_mean, r.assd_mean) for r in _flatten(rows) if r.cls == "Mean"}
    fig, ax = plt.subplots(figsize=(5, 4))
    for method, (d, a) in points.items():
        ax.scatter([d], [a], label=method)
        ax.annotate(method, (d, a), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("mean Dice")
    ax.set_ylabel("mean ASSD (mm)")
    ax.grid(alpha=0.3)
    _save(fig, path)
    return points


def trend_plot(rows, path) -> dict[str, list[tuple[int, float]]]:
    """Dice per self-training iteration, one line per class.

    Only rows whose method names an iteration are used. Returns
    ``{class: [(iteration, dice_mean), ...]}`` sorted by iteration.
    """
    series: dict[str, list[tuple[int, float]]] = {}
    for r in _flatten(rows):
        k = iteration_of(r.method)
        if k is not None:
            series.setdefault(r.cls, []).append((k, r.dice_mean))
    if not series:
        raise ValueError("no rows name a self-training iteration (expected methods like 'st1')")
    fig, ax = plt.subplots(figsize=(5, 4))
    for cls, pts in series.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=cls)
    ax.set_xlabel("self-training iteration")
    ax.set_ylabel("Dice")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)
    return series


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    # fixed metadata and id salt keep the SVG bytes reproducible
    with matplotlib.rc_context({"svg.hashsalt": "cosmos"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())


def emit_report(rows, out_dir, formats=("csv", "scatter"), stem: str = "report") -> dict[str, Path]:
    """Write the requested artefacts under ``out_dir``; returns ``{format: path}``.

    ``csv`` → ``<stem>.csv``, ``scatter`` → ``<stem>_scatter.svg``,
    ``trend`` → ``<stem>_trend.svg``.
    """
    if isinstance(formats, str):
        formats = (formats,)
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ValueError(f"unknown report format(s) {bad}; choose from {list(FORMATS)}")
    flat = _flatten(rows)
    if not flat:
        raise ValueError("emit_report needs at least one row")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for f in formats:
        if f == "csv":
            written[f] = out_dir / f"{stem}.csv"
            atomic_write_text(written[f], rows_to_csv(flat))
        elif f == "scatter":
            written[f] = out_dir / f"{stem}_scatter.svg"
            scatter_plot(flat, written[f])
        else:
            written[f] = out_dir / f"{stem}_trend.svg"
            trend_plot(flat, written[f])
    return written
