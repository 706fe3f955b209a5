"""Detection metrics: greedy matching, 101-point AP, mAP50 and mAP50-95."""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .geometry import boxes_array

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0

CURVE_COLUMNS = (
    "epoch",
    "lr",
    "loss_total",
    "loss_obj",
    "loss_cls",
    "loss_loc_sup",
    "loss_loc_kd",
    "val_precision",
    "val_recall",
    "val_map50",
    "val_map50_95",
)


@dataclass
class EvalReport:
    ap: dict = field(default_factory=dict)  # class -> {iou_thr: AP}; classes without GT or detections absent
    precision: float = 0.0
    recall: float = 0.0
    map50: float = 0.0
    map50_95: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def to_dict(self):
        d = asdict(self)
        d["ap"] = {str(c): {f"{t:.2f}": v for t, v in per.items()} for c, per in self.ap.items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _match_from_iou(ious, order, iou_thr):
    """Greedy matching given the IoU matrix of score-sorted detections."""
    n_det, n_gt = ious.shape
    used = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_det, dtype=bool)
    for d in order:
        if n_gt == 0:
            break
        cand = np.where(used, -1.0, ious[d])
        g = int(np.argmax(cand))
        if cand[g] >= iou_thr:
            used[g] = True
            tp[d] = True
    return tp, int(n_gt - used.sum())


def _score_order(scores):
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def match_detections(dets, gts, iou_thr=0.5):
    """Flag each detection TP/FP; returns ``(tp_flags, fn_count)``.

    Detections are visited by descending score (ties: lower index). Each takes
    the highest-IoU unmatched ground truth of its class when that IoU reaches
    ``iou_thr``.
    """
    dets = list(dets)
    tp = np.zeros(len(dets), dtype=bool)
    fn = 0
    classes = {d.class_index for d in dets} | {c for _, c in gts}
    for c in classes:
        di = [i for i, d in enumerate(dets) if d.class_index == c]
        g = [b for b, gc in gts if gc == c]
        if not di:
            fn += len(g)
            continue
        ious = kernels.iou_matrix(boxes_array([dets[i].box for i in di]), boxes_array(g))
        flags, missed = _match_from_iou(ious, _score_order([dets[i].score for i in di]), iou_thr)
        tp[di] = flags
        fn += missed
    return tp, fn


def average_precision(tp_flags, scores, n_gt):
    """101-point interpolated AP. Returns ``None`` when there is nothing to
    score (no ground truth and no detections)."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if n_gt == 0:
        return None if tp_flags.size == 0 else 0.0
    if tp_flags.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tp_flags[order])
    fp = np.cumsum(~tp_flags[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def evaluate(predictions, ground_truth, num_classes, thresholds=IOU_THRESHOLDS, score_threshold=0.0):
    """Metrics over a set of images.

    ``predictions[i]`` is the detection list of image ``i``; ``ground_truth[i]``
    its ``(BoundingBox, class)`` list. Precision and recall are computed at IoU
    0.5 over detections scoring at least ``score_threshold``.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} prediction lists for {len(ground_truth)} images")
    per_class = {c: {t: ([], []) for t in thresholds} for c in range(num_classes)}
    n_gt = np.zeros(num_classes, dtype=np.int64)
    tp50 = fp50 = fn50 = 0
    for dets, gts in zip(predictions, ground_truth):
        for c in range(num_classes):
            di = [i for i, d in enumerate(dets) if d.class_index == c]
            g = [b for b, gc in gts if gc == c]
            n_gt[c] += len(g)
            scores = [dets[i].score for i in di]
            if di:
                ious = kernels.iou_matrix(boxes_array([dets[i].box for i in di]), boxes_array(g))
                order = _score_order(scores)
            for t in thresholds:
                if not di:
                    if t == 0.5:
                        fn50 += len(g)
                    continue
                flags, missed = _match_from_iou(ious, order, t)
                per_class[c][t][0].extend(flags.tolist())
                per_class[c][t][1].extend(scores)
                if t == 0.5:
                    keep = np.asarray(scores) >= score_threshold
                    # P/R subset is re-matched so high-score detections are not shadowed
                    if keep.all():
                        ftp, fmiss = flags, missed
                    else:
                        sub = np.nonzero(keep)[0]
                        ftp, fmiss = _match_from_iou(ious[sub], _score_order([scores[i] for i in sub]), t)
                    tp50 += int(ftp.sum())
                    fp50 += int(len(ftp) - ftp.sum())
                    fn50 += fmiss
    report = EvalReport(tp=tp50, fp=fp50, fn=fn50)
    for c in range(num_classes):
        per = {}
        for t in thresholds:
            flags, scores = per_class[c][t]
            ap = average_precision(flags, scores, int(n_gt[c]))
            if ap is not None:
                per[t] = ap
        if per:
            report.ap[c] = per
    if report.ap:
        report.map50 = float(np.mean([per[0.5] for per in report.ap.values()])) if 0.5 in thresholds else 0.0
        report.map50_95 = float(np.mean([np.mean([per[t] for t in thresholds]) for per in report.ap.values()]))
    report.precision = tp50 / (tp50 + fp50) if tp50 + fp50 else 0.0
    report.recall = tp50 / (tp50 + fn50) if tp50 + fn50 else 0.0
    return report


def emit_curves(history, path):
    """CSV of per-epoch values, one row per record, 6 decimals."""
    records = history.records if hasattr(history, "records") else list(history)
    if not records:
        raise ValueError("empty history")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_COLUMNS)
            for r in records:
                row = [r.epoch] + [f"{getattr(r, col):.6f}" for col in CURVE_COLUMNS[1:]]
                w.writerow(row)
    except OSError as exc:
        raise ValueError(f"cannot write curves to {path}: {exc}") from exc


def read_curves(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rows]
