import os
import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

from . import constants
from .exceptions import ConfigurationError, StructuralError
from .formats import read_json, rounded
from .metrics import (ScoredLabel, classification_summary, evaluate_detections, roc_points)


@dataclass
class EvalConfig:
    iou_thresholds: tuple = constants.EVAL_IOU_THRESHOLDS
    score_threshold: float = constants.EVAL_SCORE_THRESHOLD
    theta: float = constants.GUIDANCE_THETA
    workers: int = 1
    progress_bar: bool = False

    def __post_init__(self):
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if not self.iou_thresholds:
            raise ConfigurationError("at least one IoU threshold is needed")
        names = {}
        for t in self.iou_thresholds:
            if not 0.0 < t < 1.0:
                raise ConfigurationError(f"iou thresholds must lie in (0, 1), got {t}")
            # report keys are whole percentages
            name = map_field_name(t)
            if name in names:
                raise ConfigurationError(f"iou thresholds {names[name]} and {t} both report as {name}")
            names[name] = t
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigurationError(f"score threshold must lie in [0, 1], got {self.score_threshold}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be at least 1, got {self.workers}")


@dataclass
class EvalReport:
    config: dict
    detection: list
    classification: dict | None = None
    flags: list = field(default_factory=list)

    @property
    def map_fields(self) -> dict:
        return {map_field_name(d["iou_threshold"]): d["map"] for d in self.detection}

    def to_payload(self) -> dict:
        detection = [{k: v for k, v in d.items() if k != "pr_points"} for d in self.detection]
        payload = {
            "schema": constants.SCHEMA_REPORT,
            "config": self.config,
            "classification": self.classification,
            "detection": detection,
            "map": self.map_fields,
            "flags": self.flags,
        }
        return _round_floats(payload)


def map_field_name(iou_threshold: float) -> str:
    return f"mAP{int(round(iou_threshold * 100))}"


def _round_floats(value):
    if isinstance(value, float):
        return rounded(value)
    if isinstance(value, dict):
        return {str(k): _round_floats(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round_floats(v) for v in value]
    return value


def setup_logging(log_file=None, verbose: bool = False):
    if log_file is not None:
        handlers = [logging.FileHandler(log_file, mode='w'), logging.StreamHandler()]
    else:
        handlers = [logging.StreamHandler()]

    logging.basicConfig(
        format='%(asctime)s - %(message)s',
        level=logging.DEBUG if verbose else logging.INFO,
        handlers=handlers,
        force=True
        )


def classification_data(image_ids, gts, verdicts) -> list[ScoredLabel]:
    """Image level PE labels (any ground truth box) paired with the classifier's p_f."""
    missing = [image_id for image_id in image_ids if image_id not in verdicts]
    if missing:
        raise StructuralError(f"no classifier verdict for evaluated images: {', '.join(missing)}")
    positives = {g.image_id for g in gts}
    return [ScoredLabel(verdicts[image_id].p_f, int(image_id in positives)) for image_id in image_ids]


def build_eval_report(preds, image_ids, gts, cfg: EvalConfig, verdicts=None) -> EvalReport:
    known = set(image_ids)
    unknown = sorted({p.image_id for p in preds} - known)
    if unknown:
        logging.warning(f"{len(unknown)} predicted images are not listed in the ground truth, their detections count as false positives")

    detection = evaluate_detections(preds, gts, cfg.iou_thresholds, cfg.score_threshold,
                                    workers=cfg.workers, progress_bar=cfg.progress_bar)
    flags = sorted({f"{map_field_name(d['iou_threshold'])}:{flag}" for d in detection for flag in d["operating_point"]["flags"]})

    classification = None
    if verdicts is not None:
        data = classification_data(image_ids, gts, verdicts)
        classification = classification_summary(data, cfg.theta)
        flags.extend(f"classification:{flag}" for flag in classification["flags"])

    config = {
        "iou_thresholds": list(cfg.iou_thresholds),
        "score_threshold": cfg.score_threshold,
        "theta": cfg.theta,
        "operating_point_thresholds": list(constants.OPERATING_POINT_THRESHOLDS),
    }
    return EvalReport(config=config, detection=detection, classification=classification, flags=flags)


def save_points(report: EvalReport, points_dir, data=None):
    """PR curves per IoU threshold and, with classification data, the ROC curve as CSV files."""
    points_dir = Path(points_dir)
    points_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for d in report.detection:
        df = pd.DataFrame(d["pr_points"], columns=["recall", "precision", "threshold"])
        path = points_dir.joinpath(f"pr_{map_field_name(d['iou_threshold'])}.csv")
        df.to_csv(path, index=False, float_format="%.6f")
        written.append(path)
    if data is not None:
        df = pd.DataFrame(roc_points(data), columns=["fpr", "tpr"])
        path = points_dir.joinpath("roc.csv")
        df.to_csv(path, index=False, float_format="%.6f")
        written.append(path)
    logging.info(f"wrote {len(written)} point files to {points_dir}")
    return written


def save_pr_curves(report: EvalReport, results_path):
    sns.set_style("darkgrid")
    fig, ax = plt.subplots(figsize=(6, 6))
    for d in report.detection:
        df = pd.DataFrame(d["pr_points"], columns=["recall", "precision", "threshold"])
        sns.lineplot(x="recall", y="precision", data=df, label=map_field_name(d["iou_threshold"]),
                     estimator=None, sort=False, drawstyle="steps-post", ax=ax)
    ax.set_xlabel("Sensitivity")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    fig.savefig(Path(results_path).joinpath("pr.png"))
    plt.close(fig)


def save_roc_curve(data, results_path):
    sns.set_style("darkgrid")
    fig, ax = plt.subplots(figsize=(6, 6))
    df = pd.DataFrame(roc_points(data), columns=["fpr", "tpr"])
    sns.lineplot(x="fpr", y="tpr", data=df, label="PE", estimator=None, sort=False, ax=ax)
    ax.plot([0, 1], [0, 1], linestyle='--', color='grey')
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    fig.savefig(Path(results_path).joinpath("roc.png"))
    plt.close(fig)


DETECTION_COLUMNS = ["Precision", "Sensitivity", "F1-Score"]
CLASSIFICATION_COLUMNS = ["Accuracy", "Precision", "Sensitivity", "Specificity", "F1-Score", "AUROC"]


def comparison_table(report_paths, names=None, kind: str = "detection") -> pd.DataFrame:
    """
    One row per report. Detection tables show the operating point at the first IoU threshold
    followed by one mAP column per threshold; classification tables show the image level metrics.
    """
    if names is not None and len(names) != len(report_paths):
        raise ConfigurationError(f"{len(names)} names given for {len(report_paths)} reports")
    rows = []
    for index, path in enumerate(report_paths):
        payload = read_json(path, constants.SCHEMA_REPORT)
        name = names[index] if names is not None else Path(path).stem
        if kind == "classification":
            c = payload.get("classification")
            if c is None:
                raise StructuralError(f"{path}: report has no classification block")
            values = [c["accuracy"], c["precision"], c["sensitivity"], c["specificity"], c["f1"], c["auroc"]]
            rows.append(dict(zip(["Model"] + CLASSIFICATION_COLUMNS, [name] + values)))
        elif kind == "detection":
            op = payload["detection"][0]["operating_point"]
            row = dict(zip(["Model"] + DETECTION_COLUMNS, [name, op["precision"], op["sensitivity"], op["f1"]]))
            row.update(payload["map"])
            rows.append(row)
        else:
            raise ConfigurationError(f"unknown table kind {kind}, expected detection or classification")
    return pd.DataFrame(rows).set_index("Model")


def save_table(df: pd.DataFrame, path):
    if os.path.dirname(str(path)):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, float_format="%.3f")
    logging.info(f"comparison table:\n{df.round(3)}")
