import math
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import roc_curve
from tqdm.autonotebook import tqdm

from . import constants
from .exceptions import StructuralError
from .geometry import BBox, Detection, iou, sort_detections


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise StructuralError(f"{name} must be nonnegative, got {getattr(self, name)}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


@dataclass(frozen=True)
class ScoredLabel:
    score: float
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise StructuralError(f"label must be 0 or 1, got {self.label}")
        if not 0.0 <= self.score <= 1.0:
            raise StructuralError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    class_id: int
    box: BBox


@dataclass(frozen=True)
class PredictionMatch:
    score: float
    tp: bool
    gt_index: int = -1


@dataclass(frozen=True)
class MatchResult:
    image_id: str
    class_id: int
    iou_threshold: float
    matches: tuple
    num_gt: int

    @property
    def tp(self) -> int:
        return sum(1 for m in self.matches if m.tp)

    @property
    def fp(self) -> int:
        return sum(1 for m in self.matches if not m.tp)

    @property
    def fn(self) -> int:
        return self.num_gt - self.tp


# Classification metrics. A zero denominator yields 0.0, the caller records it with zero_denominator_flags.

def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def accuracy(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp + counts.tn, counts.tp + counts.tn + counts.fp + counts.fn)


def precision(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fp)


def sensitivity(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fn)


def specificity(counts: ConfusionCounts) -> float:
    return _ratio(counts.tn, counts.tn + counts.fp)


def f1(precision_value: float, recall_value: float) -> float:
    return _ratio(2 * precision_value * recall_value, precision_value + recall_value)


def zero_denominator_flags(counts: ConfusionCounts, names=("accuracy", "precision", "sensitivity", "specificity")) -> list[str]:
    denominators = {
        "accuracy": counts.tp + counts.tn + counts.fp + counts.fn,
        "precision": counts.tp + counts.fp,
        "sensitivity": counts.tp + counts.fn,
        "specificity": counts.tn + counts.fp,
    }
    return [f"{name}:zero_denominator" for name in names if denominators[name] == 0]


def _check_both_classes(data: list[ScoredLabel]):
    labels = {d.label for d in data}
    if labels != {0, 1}:
        missing = "positive" if 1 not in labels else "negative"
        present = "no samples" if not labels else f"only label {labels.pop()}"
        raise StructuralError(f"ROC needs both classes, the {missing} class is absent ({present})")


def roc_points(data: list[ScoredLabel]) -> list[tuple[float, float]]:
    """(FPR, TPR) at every distinct score threshold, from (0, 0) to (1, 1)."""
    _check_both_classes(data)
    y_true = np.array([d.label for d in data])
    y_score = np.array([d.score for d in data], dtype=np.float64)
    fpr, tpr, _ = roc_curve(y_true, y_score, drop_intermediate=False)
    return [(float(x), float(y)) for x, y in zip(fpr, tpr)]


def auroc(data: list[ScoredLabel]) -> float:
    """
    Mann-Whitney statistic: the share of (positive, negative) pairs ranked correctly,
    ties counting one half.
    """
    _check_both_classes(data)
    labels = np.array([d.label for d in data])
    ranks = rankdata(np.array([d.score for d in data], dtype=np.float64))
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bce(p: float, label: int, eps: float = constants.BCE_EPSILON) -> float:
    p = min(max(p, eps), 1.0 - eps)
    return -(label * math.log(p) + (1 - label) * math.log(1.0 - p))


def mean_bce(ps, labels, eps: float = constants.BCE_EPSILON) -> float:
    """Mean BCE over samples, the multi-label loss averaged over C entries."""
    ps, labels = list(ps), list(labels)
    if len(ps) != len(labels):
        raise StructuralError(f"{len(ps)} probabilities but {len(labels)} labels")
    if not ps:
        return 0.0
    return sum(bce(p, l, eps) for p, l in zip(ps, labels)) / len(ps)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def confusion_from_scores(data: list[ScoredLabel], theta: float) -> ConfusionCounts:
    """Predicted positive iff score >= theta."""
    tp = sum(1 for d in data if d.label == 1 and d.score >= theta)
    fn = sum(1 for d in data if d.label == 1 and d.score < theta)
    fp = sum(1 for d in data if d.label == 0 and d.score >= theta)
    tn = sum(1 for d in data if d.label == 0 and d.score < theta)
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def classification_summary(data: list[ScoredLabel], theta: float = constants.GUIDANCE_THETA) -> dict:
    counts = confusion_from_scores(data, theta)
    p, r = precision(counts), sensitivity(counts)
    flags = zero_denominator_flags(counts)
    try:
        auc = auroc(data)
    except StructuralError as e:
        logging.warning(f"auroc undefined: {e}")
        auc = None
        flags.append("auroc:single_class")
    return {
        "theta": theta,
        "counts": counts.as_dict(),
        "accuracy": accuracy(counts),
        "precision": p,
        "sensitivity": r,
        "specificity": specificity(counts),
        "f1": f1(p, r),
        "auroc": auc,
        "bce": mean_bce([d.score for d in data], [d.label for d in data]),
        "flags": flags,
    }


# Detection metrics

def match_detections(preds: list[Detection], gts: list[GroundTruthBox], iou_t: float) -> MatchResult:
    """
    Greedy matching in ranking order. Each prediction claims the unmatched ground truth of its class
    with the highest IoU, provided the IoU exceeds iou_t; ties go to the ground truth listed first.
    """
    image_ids = {p.image_id for p in preds} | {g.image_id for g in gts}
    class_ids = {p.class_id for p in preds} | {g.class_id for g in gts}
    if len(image_ids) > 1:
        raise StructuralError(f"match_detections expects a single image, got {sorted(image_ids)}")
    if len(class_ids) > 1:
        raise StructuralError(f"match_detections expects a single class, got {sorted(class_ids)}")

    matched = [False] * len(gts)
    matches = []
    for pred in sort_detections(preds):
        best_index, best_iou = -1, iou_t
        for j, gt in enumerate(gts):
            if matched[j] or gt.class_id != pred.class_id:
                continue
            overlap = iou(pred.box, gt.box)
            if overlap > best_iou:
                best_index, best_iou = j, overlap
        if best_index >= 0:
            matched[best_index] = True
        matches.append(PredictionMatch(score=pred.score, tp=best_index >= 0, gt_index=best_index))

    image_id = image_ids.pop() if image_ids else ""
    class_id = class_ids.pop() if class_ids else constants.PE_CLASS
    return MatchResult(image_id, class_id, iou_t, tuple(matches), len(gts))


def match_dataset(preds: list[Detection], gts: list[GroundTruthBox], iou_t: float, workers: int = 1,
                  progress_bar: bool = False) -> list[MatchResult]:
    """One MatchResult per (image, class) present in predictions or ground truth, in sorted order."""
    groups = OrderedDict()
    for pred in preds:
        groups.setdefault((pred.image_id, pred.class_id), ([], []))[0].append(pred)
    for gt in gts:
        groups.setdefault((gt.image_id, gt.class_id), ([], []))[1].append(gt)
    keys = sorted(groups)

    def match(key):
        return match_detections(groups[key][0], groups[key][1], iou_t)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(tqdm(pool.map(match, keys), total=len(keys), desc=f"iou {iou_t}", disable=not progress_bar))
    return [match(key) for key in tqdm(keys, desc=f"iou {iou_t}", disable=not progress_bar)]


def _ranked_matches(results: list[MatchResult]):
    scores = np.array([m.score for r in results for m in r.matches], dtype=np.float64)
    tps = np.array([m.tp for r in results for m in r.matches], dtype=bool)
    order = np.argsort(-scores, kind="stable")
    return scores[order], tps[order]


def pr_points(results: list[MatchResult]) -> list[tuple[float, float, float]]:
    """
    (recall, precision, threshold) for every distinct score threshold, highest threshold first.
    Tied scores enter the curve together, so the curve depends on the ranking only.
    """
    num_gt = sum(r.num_gt for r in results)
    if num_gt == 0:
        raise StructuralError("precision-recall curve needs at least one ground truth box")
    scores, tps = _ranked_matches(results)
    if len(scores) == 0:
        return []
    cum_tp = np.cumsum(tps)
    cum_fp = np.cumsum(~tps)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    recall = cum_tp[ends] / num_gt
    prec = cum_tp[ends] / (cum_tp[ends] + cum_fp[ends])
    return [(float(r), float(p), float(s)) for r, p, s in zip(recall, prec, scores[ends])]


def average_precision(results: list[MatchResult]) -> float:
    """All-point interpolated area under the precision-recall curve."""
    points = pr_points(results)
    if not points:
        return 0.0
    recall = np.array([0.0] + [p[0] for p in points])
    prec = np.array([p[1] for p in points])
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope))


def mean_ap(per_class: dict) -> float:
    if not per_class:
        raise StructuralError("mean_ap needs at least one class")
    return float(sum(per_class.values()) / len(per_class))


def detection_prf(results: list[MatchResult], score_t: float = constants.EVAL_SCORE_THRESHOLD) -> dict:
    """
    Operating point statistics over the whole dataset at one score threshold. Greedy matching runs in
    score order, so dropping predictions below score_t after matching equals filtering them before.
    """
    tp = sum(1 for r in results for m in r.matches if m.tp and m.score >= score_t)
    fp = sum(1 for r in results for m in r.matches if not m.tp and m.score >= score_t)
    fn = sum(r.num_gt for r in results) - tp
    counts = ConfusionCounts(tp=tp, fp=fp, fn=fn)
    p, s = precision(counts), sensitivity(counts)
    return {
        "score_threshold": score_t,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "precision": p,
        "sensitivity": s,
        "f1": f1(p, s),
        "flags": zero_denominator_flags(counts, names=("precision", "sensitivity")),
    }


def operating_points(results: list[MatchResult], thresholds=constants.OPERATING_POINT_THRESHOLDS) -> list[dict]:
    return [detection_prf(results, t) for t in thresholds]


def evaluate_detections(preds: list[Detection], gts: list[GroundTruthBox],
                        iou_thresholds=constants.EVAL_IOU_THRESHOLDS,
                        score_t: float = constants.EVAL_SCORE_THRESHOLD,
                        workers: int = 1, progress_bar: bool = False) -> list[dict]:
    """AP per class, mAP and the operating point statistics at every IoU threshold."""
    if not gts:
        raise StructuralError("evaluation needs at least one ground truth box")
    gt_classes = sorted({g.class_id for g in gts})
    pred_classes = sorted({p.class_id for p in preds} - set(gt_classes))
    if pred_classes:
        logging.warning(f"classes {pred_classes} have predictions but no ground truth, they count as false positives only")

    evaluations = []
    for iou_t in iou_thresholds:
        results = match_dataset(preds, gts, iou_t, workers=workers, progress_bar=progress_bar)
        per_class = OrderedDict()
        for class_id in gt_classes:
            per_class[class_id] = average_precision([r for r in results if r.class_id == class_id])
        evaluation = {
            "iou_threshold": iou_t,
            "ap": {str(c): ap for c, ap in per_class.items()},
            "map": mean_ap(per_class),
            "num_gt": len(gts),
            "num_predictions": len(preds),
            "operating_point": detection_prf(results, score_t),
            "operating_points": operating_points(results),
            "pr_points": pr_points(results),
        }
        logging.info(f"iou {iou_t}: mAP {evaluation['map']:.3f}, "
                     f"precision {evaluation['operating_point']['precision']:.3f}, "
                     f"sensitivity {evaluation['operating_point']['sensitivity']:.3f}")
        evaluations.append(evaluation)
    return evaluations
