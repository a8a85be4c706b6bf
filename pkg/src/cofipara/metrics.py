"""Evaluation metrics for textual targets, visual targets and detection labels.

All percentages are on a 0-100 scale.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .boxes import iou
from .errors import ContractViolation
from .sample import Stance, normalize_span, span_tokens

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _target_set(targets: Sequence[str]) -> set[str]:
    return {t for t in (normalize_span(x) for x in targets) if t}


def split_prediction(pred: str) -> list[str]:
    return pred.split(";")


def exact_match(pred: str, gold_targets: Sequence[str]) -> int:
    return int(_target_set(split_prediction(pred)) == _target_set(gold_targets))


def token_f1(pred: str, gold_targets: Sequence[str]) -> float:
    p = Counter(tok for t in split_prediction(pred) for tok in span_tokens(t))
    g = Counter(tok for t in gold_targets for tok in span_tokens(t))
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    common = sum((p & g).values())
    if common == 0:
        return 0.0
    precision = common / sum(p.values())
    recall = common / sum(g.values())
    return 2 * precision * recall / (precision + recall)


def _ranked_detections(predictions):
    """(image index, det index within image, box, conf) in descending confidence.

    Detections are sorted stably within each image first and then across
    images, so equal scores keep image order, then within-image order.
    """
    flat = []
    for img, dets in enumerate(predictions):
        order = sorted(range(len(dets)), key=lambda j: -dets[j][1])
        flat.extend((img, j, dets[j][0], dets[j][1]) for j in order)
    flat.sort(key=lambda d: -d[3])
    return flat


def _match_flags(ranked, gts, threshold):
    """True/False per ranked detection: did it claim a ground truth?

    Each detection, in ranked order, takes the unclaimed ground truth with
    the highest IoU, provided that IoU reaches the threshold.
    """
    claimed = [[False] * len(g) for g in gts]
    flags = []
    for img, _, box, _ in ranked:
        best, best_iou = -1, min(threshold, 1 - 1e-10)
        for k, gt in enumerate(gts[img]):
            if claimed[img][k]:
                continue
            v = iou(box, gt)
            if v < best_iou:
                continue
            best, best_iou = k, v
        if best >= 0:
            claimed[img][best] = True
        flags.append(best >= 0)
    return flags


def average_precision(flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP (as a fraction) from ranked match flags."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    if len(tp) == 0:
        return 0.0
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # make precision non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = [float(precision[i]) if i < len(precision) else 0.0 for i in idx]
    return math.fsum(sampled) / len(RECALL_POINTS)


def coco_ap(predictions, gts, iou_thresholds=IOU_THRESHOLDS):
    """COCO-style single-category AP.

    ``predictions``: per image, a list of (BoundingBox, confidence).
    ``gts``: per image, a list of BoundingBox.
    Returns (ap, ap50, ap75) as percentages; ap averages all thresholds.
    With no ground truth anywhere every value is 0.
    """
    if len(predictions) != len(gts):
        raise ContractViolation(f"{len(predictions)} prediction lists for {len(gts)} images")
    for dets in predictions:
        for _, c in dets:
            if not 0.0 <= c <= 1.0:
                raise ContractViolation(f"confidence {c} outside [0, 1]")
    ranked = _ranked_detections(predictions)
    n_gt = sum(len(g) for g in gts)
    per = {t: average_precision(_match_flags(ranked, gts, t), n_gt) for t in iou_thresholds}
    ap = math.fsum(per.values()) / len(per)
    return 100 * ap, 100 * per.get(0.5, float("nan")), 100 * per.get(0.75, float("nan"))


def msd_metrics(preds: Sequence, golds: Sequence):
    """(accuracy, precision, recall, f1) with "sarcastic" as the positive class.

    Unparseable predictions count as wrong; precision is 0 when nothing is
    predicted positive.
    """
    if len(preds) != len(golds):
        raise ContractViolation(f"{len(preds)} predictions for {len(golds)} labels")
    if not golds:
        raise ContractViolation("no labels to score")

    def pos(x):
        return x is not None and Stance(x) is Stance.SARCASTIC

    def norm(x):
        try:
            return None if x is None else Stance(x)
        except ValueError:
            return None

    preds = [norm(p) for p in preds]
    golds = [Stance(g) for g in golds]
    correct = sum(p == g for p, g in zip(preds, golds))
    tp = sum(pos(p) and pos(g) for p, g in zip(preds, golds))
    pp = sum(pos(p) for p in preds)
    gp = sum(pos(g) for g in golds)
    precision = tp / pp if pp else 0.0
    recall = tp / gp if gp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return 100 * correct / len(golds), 100 * precision, 100 * recall, 100 * f1


@dataclass
class MetricReport:
    em: Optional[float] = None
    f1: Optional[float] = None
    ap: Optional[float] = None
    ap50: Optional[float] = None
    ap75: Optional[float] = None
    msd_accuracy: Optional[float] = None
    msd_precision: Optional[float] = None
    msd_recall: Optional[float] = None
    msd_f1: Optional[float] = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self):
        rows = self.to_dict()
        width = max(len(k) for k in rows) if rows else 0
        return "\n".join(f"{k:<{width}}  {v:7.2f}" for k, v in rows.items())


def msti_report(pred_texts, gold_targets, pred_boxes, gold_boxes) -> MetricReport:
    n = len(pred_texts)
    em = 100 * sum(exact_match(p, g) for p, g in zip(pred_texts, gold_targets)) / n
    f1 = 100 * sum(token_f1(p, g) for p, g in zip(pred_texts, gold_targets)) / n
    ap, ap50, ap75 = coco_ap(pred_boxes, gold_boxes)
    return MetricReport(em=em, f1=f1, ap=ap, ap50=ap50, ap75=ap75)


def msd_report(preds, golds) -> MetricReport:
    acc, p, r, f = msd_metrics(preds, golds)
    return MetricReport(msd_accuracy=acc, msd_precision=p, msd_recall=r, msd_f1=f)
