"""SVG plots and a markdown summary from the CSV files written by the command line tool."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import reference  # noqa: E402
from .errors import IoFailure  # noqa: E402

plt.rcParams["svg.hashsalt"] = "stereopose"
plt.rcParams["svg.fonttype"] = "none"


def read_csv(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def csv_kind(rows) -> str:
    cols = set(rows[0]) if rows else set()
    if {"config", "mpvpe_mm"} <= cols:
        return "ablation"
    if {"method", "error_mm", "poses_per_sec"} <= cols:
        return "compare"
    if {"epoch", "step", "loss"} <= cols:
        return "loss"
    if {"frame", "track_id", "loss_px"} <= cols:
        return "fit"
    if {"class_id", "count"} <= cols:
        return "metric"
    return "unknown"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_ablation(rows, path):
    names = [r["config"] for r in rows]
    ours = [float(r["mpvpe_mm"]) for r in rows]
    ref = [reference.ABLATION_MPVPE_MM.get(n, float("nan")) for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = range(len(names))
    ax.bar([i - 0.2 for i in x], ours, 0.4, label="measured (synthetic)")
    ax.bar([i + 0.2 for i in x], ref, 0.4, label="published reference", alpha=0.6)
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=15, fontsize=8)
    ax.set_ylabel("MPVPE (mm)")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_loss(rows, path):
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("loss", "pose_term", "vertex_term", "kp3d_term"):
        if key in rows[0]:
            ax.plot(steps, [float(r[key]) for r in rows], label=key, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_compare(rows, path):
    fig, (a, b) = plt.subplots(1, 2, figsize=(7, 3.2))
    names = [r["method"] for r in rows]
    a.bar(names, [float(r["error_mm"]) for r in rows])
    a.set_ylabel("error (mm)")
    b.bar(names, [float(r["poses_per_sec"]) for r in rows])
    b.set_yscale("log")
    b.set_ylabel("poses / s")
    _save(fig, path)


def plot_fit(rows, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    tracks = sorted({r["track_id"] for r in rows}, key=int)
    for t in tracks:
        sel = [r for r in rows if r["track_id"] == t]
        ax.plot([int(r["frame"]) for r in sel], [float(r["loss_px"]) for r in sel],
                label=f"track {t}", lw=1)
    ax.set_xlabel("frame")
    ax.set_ylabel("reprojection error (px)")
    ax.legend(fontsize=8)
    _save(fig, path)


PLOTTERS = {"ablation": plot_ablation, "loss": plot_loss, "compare": plot_compare,
            "fit": plot_fit}


def _table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def summary(inputs) -> str:
    parts = ["# Results summary", ""]
    for path, rows in inputs:
        kind = csv_kind(rows)
        parts.append(f"## {Path(path).name} ({kind})")
        parts.append("")
        if kind == "ablation":
            body = [[r["config"], r["mpvpe_mm"], reference.ABLATION_MPVPE_MM.get(r["config"], "")]
                    for r in rows]
            parts.append(_table(["config", "measured MPVPE (mm)", "published reference (mm)"], body))
        elif kind == "compare":
            parts.append(_table(["method", "error (mm)", "poses/s"],
                                [[r["method"], r["error_mm"], r["poses_per_sec"]] for r in rows]))
        elif kind == "loss":
            last = rows[-1]
            parts.append(f"final step {last['step']}: loss {last['loss']}")
        elif kind == "fit":
            vals = [float(r["loss_px"]) for r in rows]
            parts.append(f"{len(rows)} fits, mean reprojection error {sum(vals) / len(vals):.3f} px")
        elif kind == "metric":
            parts.append(_table(list(rows[0]), [list(r.values()) for r in rows]))
        parts.append("")
    parts += ["## Published reference fixtures (not reproduced here)", ""]
    parts.append(_table(["configuration", "MPVPE (mm)"],
                        [[k, v] for k, v in reference.ABLATION_MPVPE_MM.items()]))
    parts.append("")
    parts.append(_table(["object classes", "method", "error (mm)", "FPS"],
                        [[c, m, e, f] for (c, m), (e, f) in reference.FIT_COMPARISON.items()]))
    parts.append("")
    parts.append(_table(["model", "drill ADD (mm)"], [[k, v] for k, v in reference.DRILL_ADD_MM.items()]))
    parts.append("")
    parts.append(_table(["model", "average ADD-S accuracy (%)"],
                        [[k, v] for k, v in reference.STEREO_BENCHMARK_ADDS_ACC.items()]))
    parts.append("")
    return "\n".join(parts)


def render_report(paths, out_dir) -> list[Path]:
    """Plot every recognised CSV and write ``summary.md``; returns the files written."""
    out_dir = Path(out_dir)
    inputs = [(p, read_csv(p)) for p in paths]
    written = []
    for p, rows in inputs:
        plot = PLOTTERS.get(csv_kind(rows))
        if plot is not None and rows:
            target = out_dir / (Path(p).stem + ".svg")
            plot(rows, target)
            written.append(target)
    target = out_dir / "summary.md"
    target.write_text(summary(inputs))
    written.append(target)
    return written
