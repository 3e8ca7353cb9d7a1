"""Ablation grid over refinement count, loss weighting and the IoU threshold."""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from .evaluate import DetectConfig, evaluate
from .oicr import OicrConfig
from .trainer import TrainConfig, train_run

K_VALUES = (0, 1, 2, 3)
WEIGHTED_VALUES = (True, False)
IT_VALUES = (0.3, 0.4, 0.5, 0.6, 0.7)
AXES = ("K", "weighted", "I_t")
HEADER = ["K", "weighted", "I_t", "seed", "mAP", "CorLoc"]


@dataclass(frozen=True)
class Cell:
    refinements: int = 3
    weighted: bool = True
    iou_threshold: float = 0.5


@dataclass(frozen=True)
class CellResult:
    cell: Cell
    seed: int
    mean_ap: float
    mean_corloc: float
    loss_finite: bool = True


def grid(axes, base: Cell = Cell()) -> list[Cell]:
    """Cartesian product over the toggled axes; the others stay at ``base``."""
    unknown = set(axes) - set(AXES)
    if unknown:
        raise ValueError(f"unknown ablation axis {sorted(unknown)}; choose from {AXES}")
    ks = K_VALUES if "K" in axes else (base.refinements,)
    ws = WEIGHTED_VALUES if "weighted" in axes else (base.weighted,)
    its = IT_VALUES if "I_t" in axes else (base.iou_threshold,)
    return [Cell(k, w, t) for k, w, t in itertools.product(ks, ws, its)]


def run_cell(train, test, cell: Cell, seed: int, base: TrainConfig | None = None,
             corloc_data=None) -> CellResult:
    """Train one model and score it: mAP on ``test``, CorLoc on ``corloc_data`` (train by default)."""
    base = base or TrainConfig()
    cfg = replace(base, seed=seed,
                  oicr=OicrConfig(cell.refinements, cell.iou_threshold, cell.weighted))
    params, rows = train_run(train, cfg)
    # K=0 trains on the MIDN loss alone and scores with its output
    det = DetectConfig(refinements=cell.refinements, use_midn=cell.refinements == 0)
    report = evaluate(test, params, det, corloc_dataset=train if corloc_data is None else corloc_data)
    finite = all(math.isfinite(v) for r in rows for v in (r.loss_total, r.loss_base, *r.loss_refine))
    return CellResult(cell, seed, report.mean_ap, report.mean_corloc, finite)


_WORKER: dict = {}


def _init_worker(train, test, base):
    _WORKER.update(train=train, test=test, base=base)


def _run_job(job):
    cell, seed = job
    return run_cell(_WORKER["train"], _WORKER["test"], cell, seed, _WORKER["base"])


def run_grid(train, test, cells: list[Cell], seeds: list[int], base: TrainConfig | None = None,
             workers: int = 1) -> list[CellResult]:
    jobs = [(c, s) for c in cells for s in seeds]
    if workers <= 1:
        return [run_cell(train, test, c, s, base) for c, s in jobs]
    # each cell is deterministic given its seed, so order of completion is irrelevant
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(train, test, base)) as ex:
        return list(ex.map(_run_job, jobs))


def results_csv(results: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in results:
        w.writerow([r.cell.refinements, int(r.cell.weighted), r.cell.iou_threshold, r.seed,
                    repr(r.mean_ap), repr(r.mean_corloc)])
    return buf.getvalue()
