"""PNG figures written next to the CSV outputs."""

from __future__ import annotations

import io
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .synthdata import atomic_write_bytes  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    atomic_write_bytes(Path(path), buf.getvalue())


def loss_curve(rows, refinements: int, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    its = [r.iteration for r in rows]
    ax.plot(its, [r.loss_total for r in rows], label="total", lw=2)
    ax.plot(its, [r.loss_base for r in rows], label="base")
    for k in range(refinements):
        ax.plot(its, [r.loss_refine[k] for r in rows], label=f"refine {k + 1}", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss (window mean)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def ap_bars(report, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    idx = list(range(1, len(report.ap) + 1))
    ax.bar([i - 0.2 for i in idx], [a or 0.0 for a in report.ap], width=0.4, label="AP")
    ax.bar([i + 0.2 for i in idx], [c or 0.0 for c in report.corloc], width=0.4, label="CorLoc")
    ax.set_xticks(idx)
    ax.set_xlabel("class")
    ax.set_ylim(0, 1)
    ax.set_title(f"mAP {report.mean_ap:.3f}  CorLoc {report.mean_corloc:.3f}")
    ax.legend(fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def ablation_plot(results, path) -> None:
    """mAP against the threshold, one line per (K, weighted) pair, seeds averaged."""
    groups = defaultdict(lambda: defaultdict(list))
    for r in results:
        groups[(r.cell.refinements, r.cell.weighted)][r.cell.iou_threshold].append(r.mean_ap)
    fig, ax = plt.subplots(figsize=(6, 4))
    thresholds = sorted({r.cell.iou_threshold for r in results})
    for (k, w), by_t in sorted(groups.items()):
        xs = sorted(by_t)
        ys = [sum(by_t[t]) / len(by_t[t]) for t in xs]
        label = f"K={k}" + ("" if w else " unweighted")
        if len(xs) == 1:
            ax.bar(label, ys[0])
        else:
            ax.plot(xs, ys, marker="o", label=label)
    if len(thresholds) > 1:
        ax.set_xlabel("IoU threshold")
        ax.legend(fontsize="small")
    ax.set_ylabel("mAP")
    fig.tight_layout()
    _save(fig, path)
