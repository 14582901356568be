"""Run artifacts: metrics JSON, CSV tables, predicted maps and figures."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from thermofuse import fileio  # noqa: E402

METRICS_NAME = "metrics.json"
CURVES_NAME = "curves.csv"
ABLATION_NAME = "ablation.csv"
METHOD_NAMES = {
    ("eafg_aedb", "fused"): "PT-Fusion",
    ("concat_baseline", "fused"): "PCA-TSR concatenated",
}
MODALITY_NAMES = {"pca_only": "PCA only", "tsr_only": "TSR only"}
ABLATION_COLUMNS = ("run", "method", "head", "miou", "recall", "precision", "iou", "mae_mm")


def method_name(report) -> str:
    cfg = report.config.get("model", {})
    modality = cfg.get("modality", "fused")
    if modality in MODALITY_NAMES:
        return MODALITY_NAMES[modality]
    return METHOD_NAMES.get((cfg.get("fusion", "eafg_aedb"), modality), report.variant)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def curves_rows(report) -> list[tuple]:
    tr = report.curves.get("train_loss", [])
    va = report.curves.get("val_loss", [])
    return [(e + 1, repr(float(t)), repr(float(v))) for e, (t, v) in enumerate(zip(tr, va))]


def plot_curves(curves: dict[str, dict], path) -> None:
    """``curves`` maps a label to {'train_loss': [...], 'val_loss': [...]}."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, c in curves.items():
        epochs = np.arange(1, len(c.get("train_loss", [])) + 1)
        ax.plot(epochs, c.get("train_loss", []), label=f"{label} train")
        ax.plot(epochs, c.get("val_loss", []), "--", label=f"{label} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_prediction(gt_mask, labels, depth, gt_depth, path, title: str = "") -> None:
    panels = [("ground truth", gt_mask), ("predicted", labels)]
    if depth is not None:
        panels += [("true depth (mm)", gt_depth), ("predicted depth (mm)", depth)]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (name, img) in zip(np.atleast_1d(axes), panels):
        im = ax.imshow(img, cmap="viridis")
        ax.set_title(name, fontsize=8)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def write_run(outdir, report, predictions: dict | None = None, samples=None, figures: bool = True) -> Path:
    """metrics.json, curves.csv, predicted PGM/PFM maps and figures for one run."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    fileio.atomic_write_text(outdir / METRICS_NAME, report.to_json())
    fileio.atomic_write_text(outdir / CURVES_NAME, _csv_text(("epoch", "train_loss", "val_loss"), curves_rows(report)))
    pred_dir = outdir / "predictions"
    if predictions:
        pred_dir.mkdir(exist_ok=True)
        for name, p in sorted(predictions.items()):
            fileio.save_pgm(np.asarray(p["labels"]).astype(np.int64), pred_dir / f"{name}_mask.pgm")
            if "depth" in p:
                fileio.save_pfm(np.asarray(p["depth"], dtype=np.float32), pred_dir / f"{name}_depth.pfm")
    if figures:
        if report.curves.get("train_loss"):
            plot_curves({report.variant: report.curves}, outdir / "curves.png")
        if predictions and samples:
            s = next((s for s in samples if s.name in predictions), None)
            if s is not None:
                p = predictions[s.name]
                gt = (s.mask > 0).astype(int) if report.head == "binary_depth" else s.mask
                plot_prediction(gt, p["labels"], p.get("depth"), s.depth, outdir / "prediction.png", s.name)
    return outdir / METRICS_NAME


def write_sweep_csv(path, grid: Sequence[float], reports) -> None:
    rows = [(repr(float(lam)), repr(r.metrics["iou"]), repr(r.metrics["mae_mm"])) for lam, r in zip(grid, reports)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fileio.atomic_write_text(path, _csv_text(("lambda", "iou", "mae_mm"), rows))
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    ax1.plot(grid, [r.metrics["iou"] for r in reports], "o-", color="tab:blue")
    ax1.set_xlabel("lambda")
    ax1.set_ylabel("IoU", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(grid, [r.metrics["mae_mm"] for r in reports], "s--", color="tab:red")
    ax2.set_ylabel("MAE (mm)", color="tab:red")
    fig.tight_layout()
    fig.savefig(path.with_suffix(".png"), dpi=100)
    plt.close(fig)


def collect_runs(runs_dir, exclude=None) -> dict[str, object]:
    """Every metrics.json below ``runs_dir``, keyed by its directory relative to it.

    Files inside ``exclude`` (typically an earlier report written under
    ``runs_dir``) are skipped.
    """
    from thermofuse.training import MetricsReport
    runs_dir = Path(runs_dir)
    skip = Path(exclude).resolve() if exclude is not None else None
    found = {}
    for path in sorted(runs_dir.rglob(METRICS_NAME)):
        if skip is not None and path.resolve().is_relative_to(skip):
            continue
        key = path.parent.relative_to(runs_dir).as_posix() or "."
        found[key] = MetricsReport.from_json(path.read_text())
    return found


def ablation_rows(reports: dict) -> list[tuple]:
    rows = []
    for run, r in reports.items():
        m = r.metrics
        cells = [m.get(k) for k in ("miou", "recall", "precision", "iou", "mae_mm")]
        rows.append((run, method_name(r), r.head, *("" if v is None else repr(float(v)) for v in cells)))
    return rows


def build_report(runs_dir, outdir) -> dict:
    """Combine run directories into one metrics.json, curves.csv, ablation.csv and figures."""
    reports = collect_runs(runs_dir, exclude=outdir)
    if not reports:
        raise FileNotFoundError(f"no {METRICS_NAME} found under {runs_dir}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    payload = {run: json.loads(r.to_json()) for run, r in reports.items()}
    fileio.atomic_write_text(outdir / METRICS_NAME, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    curve_rows = [(run, *row) for run, r in reports.items() for row in curves_rows(r)]
    fileio.atomic_write_text(outdir / CURVES_NAME, _csv_text(("run", "epoch", "train_loss", "val_loss"), curve_rows))
    fileio.atomic_write_text(outdir / ABLATION_NAME, _csv_text(ABLATION_COLUMNS, ablation_rows(reports)))
    plot_curves({run: r.curves for run, r in reports.items() if r.curves.get("train_loss")}, outdir / "curves.png")
    _plot_ablation(reports, outdir / "ablation.png")
    return payload


def _plot_ablation(reports: dict, path) -> None:
    keys = [("iou", "IoU"), ("miou", "mIoU"), ("mae_mm", "MAE (mm)")]
    keys = [(k, lab) for k, lab in keys if any(k in r.metrics for r in reports.values())]
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.5), squeeze=False)
    for ax, (k, lab) in zip(axes[0], keys):
        runs = [(run, r) for run, r in reports.items() if k in r.metrics]
        ax.bar(range(len(runs)), [r.metrics[k] for _, r in runs])
        ax.set_xticks(range(len(runs)), [method_name(r) for _, r in runs], rotation=30, ha="right", fontsize=7)
        ax.set_ylabel(lab)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
