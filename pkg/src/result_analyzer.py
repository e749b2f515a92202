"""
Result Analyzer
===============

Consolidates the `report.json` files of several run directories into a
table of MPSNR, MSSIM and A-Dice (mean ± std over repeats), and draws
dice-curve and loss plots.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from .errors import InvalidInputError
from .evaluation import DiceCurve, MetricReport

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
SUMMARY_COLUMNS = ["run", "mpsnr", "mssim", "adice_mean", "adice_std", "n_repeats", "flagged", "note"]


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Sample mean and standard deviation (ddof=1; 0 for a single value)."""
    series = pd.Series(list(values), dtype=float)
    if series.empty:
        return float("nan"), float("nan")
    std = float(series.std(ddof=1)) if len(series) > 1 else 0.0
    return float(series.mean()), std


def load_report(run_dir: str) -> MetricReport:
    with open(os.path.join(run_dir, REPORT_FILE), "r") as f:
        return MetricReport.model_validate(json.load(f))


def summarize_report(name: str, report: MetricReport) -> Dict[str, Any]:
    repeats = report.adice_repeats or ([report.adice] if report.adice is not None else [])
    adice_mean, adice_std = mean_std(repeats) if repeats else (None, None)
    return {
        "run": name,
        "mpsnr": report.mpsnr,
        "mssim": report.mssim,
        "adice_mean": adice_mean,
        "adice_std": adice_std,
        "n_repeats": len(repeats),
        "flagged": False,
        "note": f"{len(report.failed_repeats)} repeat(s) aborted" if report.failed_repeats else "",
    }


def build_summary(run_dirs: Sequence[str]) -> pd.DataFrame:
    """One row per run directory; unreadable or missing reports are flagged."""
    if not run_dirs:
        raise InvalidInputError("report needs at least one run directory")

    rows = []
    for run_dir in run_dirs:
        name = Path(run_dir).name or run_dir
        try:
            rows.append(summarize_report(name, load_report(run_dir)))
        except FileNotFoundError:
            logger.warning(f"⚠️  No {REPORT_FILE} in {run_dir}")
            rows.append({"run": name, "n_repeats": 0, "flagged": True, "note": f"missing {REPORT_FILE}"})
        except Exception as e:
            logger.warning(f"⚠️  Unreadable report in {run_dir}: {e}")
            rows.append({"run": name, "n_repeats": 0, "flagged": True, "note": f"unreadable: {e}"})
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def _cell(value: Any, std: Any = None) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "n/a"
    if std is not None and not (isinstance(std, float) and np.isnan(std)):
        return f"{value:.3f} (±{std:.3f})"
    return f"{value:.3f}" if isinstance(value, float) else str(value)


def summary_markdown(frame: pd.DataFrame) -> str:
    lines = [
        "| Run | MPSNR ↑ | MSSIM ↑ | A-Dice ↓ | Repeats | Note |",
        "|---|---|---|---|---|---|",
    ]
    for row in frame.to_dict("records"):
        flag = "⚠️ " if row.get("flagged") else ""
        lines.append(
            f"| {flag}{row['run']} | {_cell(row.get('mpsnr'))} | {_cell(row.get('mssim'))} | "
            f"{_cell(row.get('adice_mean'), row.get('adice_std'))} | {row.get('n_repeats', 0)} | {row.get('note') or ''} |"
        )
    return "\n".join(lines) + "\n"


def plot_dice_curves(curves: Dict[str, List[DiceCurve]], output_path: str, title: str = "Training dice of the evaluation segmentor") -> str:
    """One line per repeat, one color per run."""
    sns.set_theme(style="whitegrid")
    plt.figure(figsize=(8, 5))
    palette = sns.color_palette("tab10", n_colors=max(1, len(curves)))
    for color, (label, run_curves) in zip(palette, curves.items()):
        for i, curve in enumerate(run_curves):
            epochs = np.arange(1, len(curve.values) + 1)
            plt.plot(epochs, curve.values, color=color, alpha=0.8,
                     label=f"{label} (A-Dice {np.mean([c.adice for c in run_curves]):.3f})" if i == 0 else None)
    plt.xlabel("Epoch")
    plt.ylabel("Dice on training data")
    plt.ylim(0.0, 1.0)
    plt.title(title)
    plt.legend()
    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches="tight")
    plt.close()
    logger.info(f"📊 Saved {output_path}")
    return output_path


def plot_losses(loss_csv: str, output_path: str) -> str:
    frame = pd.read_csv(loss_csv)
    per_epoch = frame.groupby("epoch")[["L_seg", "L_s2", "L_R", "L_G"]].mean()
    sns.set_theme(style="whitegrid")
    fig, axes = plt.subplots(1, 2, figsize=(12, 4))
    per_epoch[["L_seg", "L_s2"]].plot(ax=axes[0], marker="o")
    axes[0].set_title("Segmentor / adversarial losses")
    per_epoch[["L_R"]].plot(ax=axes[1], marker="o", logy=True)
    axes[1].set_title("Residual loss")
    for ax in axes:
        ax.set_xlabel("Epoch")
    fig.tight_layout()
    fig.savefig(output_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return output_path


def plot_sweep(sweep: pd.DataFrame, output_path: str) -> str:
    """MPSNR and A-Dice against lambda on twin axes."""
    ok = sweep[sweep["status"] == "ok"].sort_values("lambda")
    sns.set_theme(style="whitegrid")
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(ok["lambda"], ok["mpsnr"], marker="o", color="tab:blue", label="MPSNR")
    ax1.set_xscale("log")
    ax1.set_xlabel("λ")
    ax1.set_ylabel("MPSNR (dB)", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(ok["lambda"], ok["adice"], marker="s", color="tab:red", label="A-Dice")
    ax2.set_ylabel("A-Dice", color="tab:red")
    fig.tight_layout()
    fig.savefig(output_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return output_path


def report(run_dirs: Sequence[str], out_dir: str, plot: bool = False) -> pd.DataFrame:
    """Write summary.csv and summary.md (and curves.png with plot=True) under out_dir."""
    frame = build_summary(run_dirs)
    os.makedirs(out_dir, exist_ok=True)
    frame.to_csv(os.path.join(out_dir, "summary.csv"), index=False)
    with open(os.path.join(out_dir, "summary.md"), "w") as f:
        f.write(summary_markdown(frame))

    if plot:
        curves = {}
        for run_dir, row in zip(run_dirs, frame.to_dict("records")):
            if not row["flagged"]:
                run_curves = load_report(run_dir).dice_curves
                if run_curves:
                    curves[row["run"]] = run_curves
        if curves:
            plot_dice_curves(curves, os.path.join(out_dir, "curves.png"))

    flagged = int(frame["flagged"].sum())
    logger.info(f"✅ Report over {len(frame)} runs ({flagged} flagged) -> {out_dir}")
    return frame
