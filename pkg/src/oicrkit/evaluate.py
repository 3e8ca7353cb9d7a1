"""Inference, VOC-style average precision, CorLoc and pseudo ground truth export."""

from __future__ import annotations

import csv
import io
import math
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box, Detection, iou_matrix, nms_indices
from .oicr import forward

NMS_THRESHOLD = 0.3
SCORE_FLOOR = 1e-4
POSITIVE_IOU = 0.5


@dataclass
class DetectConfig:
    refinements: int = 3
    nms_threshold: float = NMS_THRESHOLD
    score_floor: float = SCORE_FLOOR
    # K=0 ablation cells score with the MIDN output instead
    use_midn: bool = False


@dataclass(frozen=True)
class RankedDetection:
    image_id: int
    proposal_index: int
    detection: Detection


@dataclass
class EvalReport:
    ap: list[float | None]
    corloc: list[float | None]
    mean_ap: float
    mean_corloc: float
    images: int = 0
    ground_truths: int = 0
    detections: int = 0
    extra: dict = field(default_factory=dict)


def proposal_scores(bag, params, cfg: DetectConfig) -> np.ndarray:
    """(C, R) test-time scores: mean of refined stages with background dropped."""
    if cfg.use_midn:
        return forward(bag.features, params, 0).midn.x_r0
    if cfg.refinements < 1:
        raise ValueError("detection averages refined stages; refinements must be >= 1")
    state = forward(bag.features, params, cfg.refinements)
    return np.mean([r[:-1] for r in state.refined], axis=0)


def detections_from_scores(bag, scores: np.ndarray, cfg: DetectConfig) -> list[RankedDetection]:
    boxes = bag.proposal_array()
    out = []
    for ci in range(scores.shape[0]):
        row = scores[ci]
        for j in nms_indices(boxes, row, cfg.nms_threshold):
            if row[j] < cfg.score_floor:
                continue
            out.append(RankedDetection(bag.image_id, j, Detection(bag.proposals[j], ci + 1, float(row[j]))))
    return out


def detect(bag, params, cfg: DetectConfig) -> list[RankedDetection]:
    return detections_from_scores(bag, proposal_scores(bag, params, cfg), cfg)


def _rank(dets: list[RankedDetection]) -> list[RankedDetection]:
    return sorted(dets, key=lambda d: (-d.detection.score, d.image_id, d.proposal_index))


def precision_recall(dets: list[RankedDetection], gts: dict[int, list[Box]],
                     iou_threshold: float = POSITIVE_IOU) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy matching over a ranked list; returns (recall, precision, #gt)."""
    npos = sum(len(v) for v in gts.values())
    gt_arrays = {k: np.array([b.as_tuple() for b in v]).reshape(-1, 4) for k, v in gts.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(dets))
    for i, d in enumerate(dets):
        g = gt_arrays.get(d.image_id)
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(np.array([d.detection.box.as_tuple()]), g)[0]
        ov = np.where(used[d.image_id], -1.0, ov)
        best = int(np.argmax(ov))
        if ov[best] > iou_threshold:
            tp[i] = 1.0
            used[d.image_id][best] = True
    ctp = np.cumsum(tp)
    rec = ctp / npos if npos else np.zeros_like(ctp)
    prec = ctp / np.arange(1, len(dets) + 1)
    return rec, prec, npos


def ap_from_curve(rec: np.ndarray, prec: np.ndarray, mode: str = "voc07") -> float:
    if mode == "voc07":
        points = []
        for i in range(11):
            mask = rec >= i / 10
            points.append(float(prec[mask].max()) if mask.any() else 0.0)
        # exact summation so hand-computed fractions round-trip
        return math.fsum(points) / 11.0
    if mode == "area":
        mrec = np.concatenate(([0.0], rec, [1.0]))
        mpre = np.concatenate(([0.0], prec, [0.0]))
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        idx = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    raise ValueError(f"unknown AP mode {mode!r}")


def voc_ap(dets: list[RankedDetection], gts: dict[int, list[Box]],
           iou_threshold: float = POSITIVE_IOU, mode: str = "voc07") -> float | None:
    """AP for one class; ``None`` when the class has no ground truth."""
    rec, prec, npos = precision_recall(_rank(dets), gts, iou_threshold)
    if npos == 0:
        return None
    return ap_from_curve(rec, prec, mode)


def class_ground_truth(dataset, class_index: int) -> dict[int, list[Box]]:
    return {bag.image_id: [o.box for o in bag.ground_truth if o.class_index == class_index]
            for bag in dataset}


def map_from_detections(dataset, dets: list[RankedDetection], num_classes: int,
                        mode: str = "voc07") -> tuple[list[float | None], float]:
    per_class = [[] for _ in range(num_classes)]
    for d in dets:
        per_class[d.detection.class_index - 1].append(d)
    aps = [voc_ap(per_class[c], class_ground_truth(dataset, c + 1), mode=mode)
           for c in range(num_classes)]
    present = [a for a in aps if a is not None]
    return aps, float(np.mean(present)) if present else 0.0


def corloc_from_scores(dataset, scores: list[np.ndarray]) -> tuple[list[float | None], float]:
    num_classes = scores[0].shape[0]
    hits = np.zeros(num_classes)
    totals = np.zeros(num_classes)
    for bag, s in zip(dataset, scores):
        boxes = bag.proposal_array()
        for c in bag.positive_classes:
            totals[c - 1] += 1
            j = int(np.argmax(s[c - 1]))
            gt = [o.box.as_tuple() for o in bag.ground_truth if o.class_index == c]
            if gt and iou_matrix(boxes[j:j + 1], np.array(gt)).max() > POSITIVE_IOU:
                hits[c - 1] += 1
    per = [float(h / t) if t else None for h, t in zip(hits, totals)]
    present = [v for v in per if v is not None]
    return per, float(np.mean(present)) if present else 0.0


def evaluate(dataset, params, cfg: DetectConfig, mode: str = "voc07",
             corloc_dataset=None) -> EvalReport:
    """mAP on ``dataset``; CorLoc on ``corloc_dataset`` (defaults to the same bags)."""
    scores = [proposal_scores(bag, params, cfg) for bag in dataset]
    return evaluate_scores(dataset, scores, cfg, mode, corloc_dataset,
                           None if corloc_dataset is None else
                           [proposal_scores(b, params, cfg) for b in corloc_dataset])


def evaluate_scores(dataset, scores, cfg: DetectConfig, mode="voc07",
                    corloc_dataset=None, corloc_scores=None) -> EvalReport:
    num_classes = scores[0].shape[0]
    dets = [d for bag, s in zip(dataset, scores) for d in detections_from_scores(bag, s, cfg)]
    aps, mean_ap = map_from_detections(dataset, dets, num_classes, mode)
    if corloc_dataset is None:
        corloc_dataset, corloc_scores = dataset, scores
    per_cl, mean_cl = corloc_from_scores(corloc_dataset, corloc_scores)
    return EvalReport(aps, per_cl, mean_ap, mean_cl, images=len(dataset),
                      ground_truths=sum(len(b.ground_truth) for b in dataset), detections=len(dets))


def evaluate_map(dataset, params, cfg: DetectConfig, mode: str = "voc07") -> EvalReport:
    return evaluate(dataset, params, cfg, mode)


def evaluate_corloc(dataset, params, cfg: DetectConfig) -> tuple[list[float | None], float]:
    return corloc_from_scores(dataset, [proposal_scores(b, params, cfg) for b in dataset])


def metrics_csv(report: EvalReport) -> str:
    def fmt(v):
        return "" if v is None else repr(float(v))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_index", "ap", "corloc"])
    for c, (a, cl) in enumerate(zip(report.ap, report.corloc), start=1):
        w.writerow([c, fmt(a), fmt(cl)])
    w.writerow(["mean", fmt(report.mean_ap), fmt(report.mean_corloc)])
    return buf.getvalue()


def pseudo_ground_truth(dataset, params, cfg: DetectConfig) -> list[dict]:
    out = []
    for bag in dataset:
        s = proposal_scores(bag, params, cfg)
        for c in bag.positive_classes:
            j = int(np.argmax(s[c - 1]))
            out.append({"image_id": bag.image_id, "class_index": c,
                        "box": list(bag.proposals[j].as_tuple()), "score": float(s[c - 1, j])})
    return out


def export_pseudo_gt(dataset, params, cfg: DetectConfig, path) -> list[dict]:
    from .synthdata import atomic_write_bytes
    records = pseudo_ground_truth(dataset, params, cfg)
    try:
        atomic_write_bytes(Path(path), json.dumps(records, indent=1).encode("utf-8"))
    except OSError as exc:
        raise OSError(f"cannot write pseudo ground truth to {path}: {exc}") from exc
    return records
