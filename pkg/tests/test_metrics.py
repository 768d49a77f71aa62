import unittest
import itertools
import math
import os
import sys

import numpy as np
from sklearn.metrics import confusion_matrix, roc_auc_score

sys.path.insert(0, os.getcwd())
from cgdet.metrics import *
from cgdet.geometry import BBox, Detection, iou
from cgdet.exceptions import StructuralError

# (precision, sensitivity, F1) rows reported for the classifiers and the detection ensembles
REPORTED_ROWS = [
    (.640, .904, .749), (.618, .916, .738), (.682, .902, .777), (.633, .932, .754), (.668, .894, .764),
    (.661, .916, .768), (.733, .532, .617), (.614, .684, .647), (.728, .852, .785), (.704, .768, .735),
    (.637, .739, .684), (.707, .871, .780), (.634, .824, .716), (.487, .859, .621), (.635, .852, .727),
    (.748, .831, .787), (.707, .749, .727), (.754, .862, .805),
    (.447, .886, .594), (.689, .779, .731), (.672, .872, .759), (.739, .835, .784), (.673, .836, .746),
    (.683, .901, .777), (.699, .870, .775), (.566, .927, .703), (.687, .901, .779), (.703, .870, .777),
    (.570, .927, .705),
]


def brute_force_auroc(data):
    pos = np.array([d.score for d in data if d.label == 1])
    neg = np.array([d.score for d in data if d.label == 0])
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def random_instance(rng, tile=100):
    """Images with ground truth spread over separate tiles, so a prediction overlaps at most one box."""
    preds, gts = [], []
    for i in range(int(rng.integers(1, 5))):
        image_id = f"img{i}"
        for k in range(int(rng.integers(0, 6))):
            x, y = rng.integers(0, 20, size=2)
            w, h = rng.integers(10, 30, size=2)
            gts.append(GroundTruthBox(image_id, 0, BBox(float(k * tile + x), float(y), float(k * tile + x + w), float(y + h))))
        for _ in range(int(rng.integers(0, 9))):
            k = int(rng.integers(0, 6))
            x, y = rng.integers(0, 30, size=2)
            w, h = rng.integers(8, 30, size=2)
            score = float(rng.integers(1, 10)) / 10
            preds.append(Detection(image_id, "m", 0, BBox(float(k * tile + x), float(y), float(k * tile + x + w), float(y + h)), score))
    return preds, gts


def threshold_sweep_ap(preds, gts, iou_t):
    """Precision and recall recomputed from scratch at every distinct score threshold."""
    points = []
    for threshold in sorted({p.score for p in preds}, reverse=True):
        kept = [p for p in preds if p.score >= threshold]
        results = match_dataset(kept, gts, iou_t)
        tp = sum(r.tp for r in results)
        points.append((tp / len(gts), tp / len(kept)))
    ap, previous_recall = 0.0, 0.0
    for i, (recall, _) in enumerate(points):
        ap += (recall - previous_recall) * max(p for _, p in points[i:])
        previous_recall = recall
    return ap


def random_scored_labels(rng, n, levels=19):
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, levels + 1, size=n) / levels
    return [ScoredLabel(float(s), int(l)) for s, l in zip(scores, labels)]


def enumerated_roc(data):
    """(FPR, TPR) recomputed from scratch with every distinct score as threshold, highest first."""
    n_pos = sum(d.label for d in data)
    n_neg = len(data) - n_pos
    points = [(0.0, 0.0)]
    for threshold in sorted({d.score for d in data}, reverse=True):
        tp = sum(1 for d in data if d.label == 1 and d.score >= threshold)
        fp = sum(1 for d in data if d.label == 0 and d.score >= threshold)
        points.append((fp / n_neg, tp / n_pos))
    return points


def exhaustive_assignment(preds, gts, iou_t):
    """
    Enumerates every one-to-one assignment of predictions to ground truth above iou_t and keeps the
    one that is best for the highest ranked prediction first: matched beats unmatched, then higher
    IoU, then the lower ground truth index.
    """
    ranked = sorted(preds, key=lambda p: -p.score)
    options = [[-1] + [j for j, g in enumerate(gts) if iou(p.box, g.box) > iou_t] for p in ranked]
    best, best_key = None, None
    for assignment in itertools.product(*options):
        used = [j for j in assignment if j >= 0]
        if len(used) != len(set(used)):
            continue
        key = tuple((0, 0.0, 0) if j < 0 else (1, iou(p.box, gts[j].box), -j) for p, j in zip(ranked, assignment))
        if best_key is None or key > best_key:
            best, best_key = list(assignment), key
    return best


class Test(unittest.TestCase):
    def test_f1_matches_reported_rows(self):
        for p, r, expected in REPORTED_ROWS:
            self.assertTrue(abs(f1(p, r) - expected) <= 0.002, f"f1({p}, {r}) = {f1(p, r)} != {expected}")

    def test_classification_metrics(self):
        counts = ConfusionCounts(tp=8, tn=5, fp=2, fn=1)
        self.assertAlmostEqual(accuracy(counts), 13 / 16)
        self.assertAlmostEqual(precision(counts), 0.8)
        self.assertAlmostEqual(sensitivity(counts), 8 / 9)
        self.assertAlmostEqual(specificity(counts), 5 / 7)
        self.assertTrue(zero_denominator_flags(counts) == [])

    def test_zero_denominators(self):
        counts = ConfusionCounts(tn=4)
        self.assertTrue(precision(counts) == 0.0)
        self.assertTrue(f1(0.0, 0.0) == 0.0)
        self.assertTrue(zero_denominator_flags(counts) == ["precision:zero_denominator", "sensitivity:zero_denominator"])

    def test_confusion_from_scores_against_sklearn(self):
        rng = np.random.default_rng(0)
        scores = rng.integers(0, 11, size=300) / 10
        labels = rng.integers(0, 2, size=300)
        data = [ScoredLabel(float(s), int(l)) for s, l in zip(scores, labels)]
        counts = confusion_from_scores(data, 0.5)
        tn, fp, fn, tp = confusion_matrix(labels, (scores >= 0.5).astype(int), labels=[0, 1]).ravel()
        self.assertTrue(counts == ConfusionCounts(tp=int(tp), tn=int(tn), fp=int(fp), fn=int(fn)))

    def test_auroc_against_pair_counting(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            scores = rng.integers(0, 20, size=n) / 19
            data = [ScoredLabel(float(s), int(l)) for s, l in zip(scores, labels)]
            self.assertTrue(abs(auroc(data) - brute_force_auroc(data)) <= 1e-12)

    def test_auroc_against_sklearn(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, size=500)
        scores = np.clip(0.3 * labels + rng.uniform(size=500) * 0.7, 0, 1)
        data = [ScoredLabel(float(s), int(l)) for s, l in zip(scores, labels)]
        self.assertAlmostEqual(auroc(data), roc_auc_score(labels, scores), places=12)

    def test_auroc_single_class(self):
        with self.assertRaises(StructuralError):
            auroc([ScoredLabel(0.3, 1), ScoredLabel(0.8, 1)])
        summary = classification_summary([ScoredLabel(0.3, 1), ScoredLabel(0.8, 1)])
        self.assertTrue(summary["auroc"] is None)
        self.assertTrue("auroc:single_class" in summary["flags"])

    def test_roc_points(self):
        data = [ScoredLabel(0.9, 1), ScoredLabel(0.8, 0), ScoredLabel(0.7, 1), ScoredLabel(0.1, 0)]
        points = roc_points(data)
        self.assertTrue(points[0] == (0.0, 0.0))
        self.assertTrue(points[-1] == (1.0, 1.0))

    def test_roc_points_against_threshold_enumeration(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            data = random_scored_labels(rng, 20, levels=9)
            actual, expected = roc_points(data), enumerated_roc(data)
            self.assertTrue(len(actual) == len(expected))
            for (x, y), (ex, ey) in zip(actual, expected):
                self.assertTrue(abs(x - ex) <= 1e-12 and abs(y - ey) <= 1e-12)

    def test_auroc_equals_area_under_roc_points(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            data = random_scored_labels(rng, int(rng.integers(2, 201)))
            points = roc_points(data)
            area = sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(points, points[1:]))
            self.assertTrue(abs(auroc(data) - area) <= 1e-12)

    def test_auroc_invariant_under_monotone_scores(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            data = random_scored_labels(rng, int(rng.integers(2, 101)))
            for transform in (lambda s: s ** 2, lambda s: math.sqrt(s), lambda s: 0.1 + 0.5 * s):
                moved = [ScoredLabel(transform(d.score), d.label) for d in data]
                self.assertTrue(abs(auroc(moved) - auroc(data)) <= 1e-12)

    def test_average_precision_invariant_under_monotone_scores(self):
        rng = np.random.default_rng(8)
        checked = 0
        while checked < 200:
            preds, gts = random_instance(rng)
            if not gts:
                continue
            for transform in (lambda s: s ** 2, lambda s: math.sqrt(s), lambda s: 0.1 + 0.5 * s):
                moved = [p.with_score(transform(p.score)) for p in preds]
                for iou_t in (0.2, 0.5):
                    expected = average_precision(match_dataset(preds, gts, iou_t))
                    self.assertTrue(abs(average_precision(match_dataset(moved, gts, iou_t)) - expected) <= 1e-12)
            checked += 1

    def test_match_detections_against_exhaustive_assignment(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            gts = []
            for _ in range(2):
                x, y = rng.uniform(0, 15, size=2)
                w, h = rng.uniform(5, 15, size=2)
                gts.append(GroundTruthBox("img", 0, BBox(x, y, x + w, y + h)))
            preds = []
            for score in rng.permutation(np.linspace(0.1, 0.9, 3)):
                x, y = rng.uniform(0, 15, size=2)
                w, h = rng.uniform(5, 15, size=2)
                preds.append(Detection("img", "m", 0, BBox(x, y, x + w, y + h), float(score)))
            for iou_t in (0.2, 0.5):
                result = match_detections(preds, gts, iou_t)
                self.assertTrue([m.gt_index for m in result.matches] == exhaustive_assignment(preds, gts, iou_t))

    def test_bce(self):
        self.assertAlmostEqual(bce(0.5, 1), math.log(2))
        self.assertAlmostEqual(bce(0.0, 1), -math.log(1e-12))
        self.assertTrue(math.isfinite(bce(1.0, 0)))
        self.assertAlmostEqual(mean_bce([0.5, 0.5], [0, 1]), math.log(2))

    def test_sigmoid(self):
        self.assertTrue(sigmoid(0.0) == 0.5)
        self.assertTrue(sigmoid(-1000.0) == 0.0)
        self.assertTrue(sigmoid(1000.0) == 1.0)
        self.assertAlmostEqual(sigmoid(2.0) + sigmoid(-2.0), 1.0)

    def test_match_detections_ties_go_to_first_ground_truth(self):
        gts = [GroundTruthBox("img", 0, BBox(0, 0, 10, 10)), GroundTruthBox("img", 0, BBox(0, 0, 10, 10))]
        preds = [Detection("img", "m", 0, BBox(0, 0, 10, 10), 0.9)]
        result = match_detections(preds, gts, 0.5)
        self.assertTrue(result.matches[0].gt_index == 0)
        self.assertTrue((result.tp, result.fp, result.fn) == (1, 0, 1))

    def test_match_detections_single_image(self):
        with self.assertRaises(StructuralError):
            match_detections([Detection("a", "m", 0, BBox(0, 0, 1, 1), 0.5)],
                             [GroundTruthBox("b", 0, BBox(0, 0, 1, 1))], 0.5)

    def test_detection_prf(self):
        gts = [GroundTruthBox("img", 0, BBox(20.0 * k, 0, 20.0 * k + 10, 10)) for k in range(10)]
        preds = [Detection("img", "m", 0, BBox(20.0 * k, 0, 20.0 * k + 10, 10), 0.9) for k in range(9)]
        preds += [Detection("img", "m", 0, BBox(20.0 * k, 50, 20.0 * k + 10, 60), 0.3) for k in range(4)]
        prf = detection_prf(match_dataset(preds, gts, 0.5))
        self.assertTrue((prf["tp"], prf["fp"], prf["fn"]) == (9, 4, 1))
        self.assertTrue(round(prf["precision"], 3) == 0.692)
        self.assertTrue(round(prf["sensitivity"], 3) == 0.9)
        self.assertTrue(round(prf["f1"], 3) == 0.783)

        high = detection_prf(match_dataset(preds, gts, 0.5), score_t=0.5)
        self.assertTrue((high["tp"], high["fp"]) == (9, 0))

    def test_pr_points_ties_enter_together(self):
        gts = [GroundTruthBox("img", 0, BBox(0, 0, 10, 10))]
        preds = [Detection("img", "m", 0, BBox(0, 0, 10, 10), 0.5),
                 Detection("img", "m", 0, BBox(50, 50, 60, 60), 0.5)]
        points = pr_points(match_dataset(preds, gts, 0.5))
        self.assertTrue(points == [(1.0, 0.5, 0.5)])
        self.assertAlmostEqual(average_precision(match_dataset(preds, gts, 0.5)), 0.5)

    def test_pr_points_edge_cases(self):
        with self.assertRaises(StructuralError):
            pr_points(match_dataset([Detection("img", "m", 0, BBox(0, 0, 1, 1), 0.5)], [], 0.5))
        self.assertTrue(pr_points(match_dataset([], [GroundTruthBox("img", 0, BBox(0, 0, 1, 1))], 0.5)) == [])
        with self.assertRaises(StructuralError):
            mean_ap({})

    def test_average_precision_against_threshold_sweep(self):
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 500:
            preds, gts = random_instance(rng)
            if not gts:
                continue
            for iou_t in (0.2, 0.5):
                expected = threshold_sweep_ap(preds, gts, iou_t)
                self.assertTrue(abs(average_precision(match_dataset(preds, gts, iou_t)) - expected) <= 1e-9)
            checked += 1

    def test_ap_decreases_with_iou_threshold(self):
        rng = np.random.default_rng(4)
        checked = 0
        while checked < 300:
            preds, gts = random_instance(rng)
            if not gts:
                continue
            low = average_precision(match_dataset(preds, gts, 0.2))
            high = average_precision(match_dataset(preds, gts, 0.5))
            self.assertTrue(low >= high - 1e-12)
            checked += 1

    def test_evaluate_detections_perfect(self):
        gts = [GroundTruthBox(f"img{i}", 0, BBox(10, 10, 30, 40)) for i in range(3)]
        preds = [Detection(g.image_id, "m", 0, g.box, 1.0) for g in gts]
        evaluations = evaluate_detections(preds, gts, workers=2)
        self.assertTrue([e["iou_threshold"] for e in evaluations] == [0.2, 0.5])
        for e in evaluations:
            self.assertTrue(e["map"] == 1.0)
            self.assertTrue(e["operating_point"]["f1"] == 1.0)
            self.assertTrue(len(e["operating_points"]) == 6)

    def test_evaluate_detections_needs_ground_truth(self):
        with self.assertRaises(StructuralError):
            evaluate_detections([], [])


if __name__ == '__main__':
    unittest.main()
