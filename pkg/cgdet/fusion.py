"""
Ensembling of detections coming from several detectors.

Three strategies are available: non-maximum suppression (NMS), non-maximum weighted (NMW)
and weighted boxes fusion (WBF). Per-model weights rescale the scores of weaker detectors
before the detections of all models are pooled and fused per image and class.
"""

import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

from tqdm.autonotebook import tqdm

from . import constants
from .exceptions import ConfigurationError
from .geometry import Detection, iou, sort_detections, weighted_mean_box


class FusionMethod(str, Enum):
    NMS = "NMS"
    NMW = "NMW"
    WBF = "WBF"


@dataclass
class ModelWeights:
    weights: dict[str, float] = field(default_factory=dict)
    default: float | None = constants.DEFAULT_MODEL_WEIGHT

    def __post_init__(self):
        for model_id, weight in self.weights.items():
            if not weight > 0:
                raise ConfigurationError(f"weight of model {model_id} must be positive, got {weight}")
        if self.default is not None and not self.default > 0:
            raise ConfigurationError(f"default weight must be positive, got {self.default}")
        if not self.weights and self.default is None:
            raise ConfigurationError("no model weights and no default weight given")

    @classmethod
    def uniform(cls):
        return cls({}, constants.DEFAULT_MODEL_WEIGHT)

    @property
    def max_weight(self) -> float:
        candidates = list(self.weights.values())
        if self.default is not None:
            candidates.append(self.default)
        return max(candidates)

    def weight(self, model_id: str) -> float:
        if model_id in self.weights:
            return self.weights[model_id]
        if self.default is None:
            raise ConfigurationError(f"no weight configured for model {model_id} and no default weight")
        return self.default

    def check_models(self, model_ids):
        """Raises when an explicit weight names a model outside model_ids."""
        unknown = sorted(set(self.weights) - set(model_ids))
        if unknown:
            raise ConfigurationError(f"weights given for models {unknown} that have no detections, known models are {sorted(model_ids)}")


@dataclass
class FusionConfig:
    method: FusionMethod = FusionMethod(constants.FUSION_METHOD)
    iou_threshold: float = constants.FUSION_IOU_THRESHOLD
    score_floor: float = constants.FUSION_SCORE_FLOOR

    def __post_init__(self):
        try:
            if not isinstance(self.method, FusionMethod):
                self.method = FusionMethod(str(self.method).upper())
        except ValueError:
            raise ConfigurationError(f"unknown fusion method {self.method}, expected one of NMS, NMW, WBF")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigurationError(f"iou threshold must lie in (0, 1), got {self.iou_threshold}")
        if not 0.0 <= self.score_floor <= 1.0:
            raise ConfigurationError(f"score floor must lie in [0, 1], got {self.score_floor}")


def apply_model_weights(dets: list[Detection], w: ModelWeights) -> list[Detection]:
    """
    Scales every score by weight(model) / max_weight. The best trusted model keeps its scores,
    the others are scaled down, so the result stays a probability.
    """
    max_weight = w.max_weight
    return [det.with_score(det.score * (w.weight(det.model_id) / max_weight)) for det in dets]


def nms(dets: list[Detection], t: float) -> list[Detection]:
    remaining = sort_detections(dets)
    keep = []
    while remaining:
        top = remaining.pop(0)
        keep.append(top)
        remaining = [det for det in remaining if iou(top.box, det.box) <= t]
    return keep


def nmw(dets: list[Detection], t: float) -> list[Detection]:
    """
    Each cluster is seeded by the highest ranked remaining box. Members overlapping the seed
    by more than t are merged into it with weight iou(seed, member) * score(member), the seed
    itself counts with its own score. The merged box keeps the seed's score.
    """
    remaining = sort_detections(dets)
    out = []
    while remaining:
        seed = remaining.pop(0)
        members, rest = [], []
        for det in remaining:
            overlap = iou(seed.box, det.box)
            if overlap > t:
                members.append((det, overlap))
            else:
                rest.append(det)
        remaining = rest

        boxes = [seed.box] + [det.box for det, _ in members]
        weights = [seed.score] + [overlap * det.score for det, overlap in members]
        out.append(seed.with_box(weighted_mean_box(boxes, weights)))
    return sort_detections(out)


def find_matching_box(fused_boxes, box, t: float) -> int:
    """Index of the fused box overlapping box the most (strictly above t), -1 when none does."""
    best_index, best_iou = -1, t
    for index, fused in enumerate(fused_boxes):
        overlap = iou(fused, box)
        if overlap > best_iou:
            best_index, best_iou = index, overlap
    return best_index


def wbf(dets: list[Detection], t: float) -> list[Detection]:
    """
    Boxes are visited in ranking order and either merged into the best matching fused box or
    start a new one. Fused coordinates are the score weighted mean of all cluster members,
    the fused score is the mean member score.
    """
    clusters: list[list[Detection]] = []
    fused_boxes = []
    for det in sort_detections(dets):
        index = find_matching_box(fused_boxes, det.box, t)
        if index == -1:
            clusters.append([det])
            fused_boxes.append(det.box)
        else:
            clusters[index].append(det)
            members = clusters[index]
            fused_boxes[index] = weighted_mean_box([m.box for m in members], [m.score for m in members])

    out = []
    for members, box in zip(clusters, fused_boxes):
        score = sum(m.score for m in members) / len(members)
        out.append(Detection(members[0].image_id, members[0].model_id, members[0].class_id, box, min(1.0, score)))
    return sort_detections(out)


FUSION_FUNCTIONS = {
    FusionMethod.NMS: nms,
    FusionMethod.NMW: nmw,
    FusionMethod.WBF: wbf,
}


def ensemble(per_model: dict[str, list[Detection]], cfg: FusionConfig, w: ModelWeights) -> list[Detection]:
    """Weights, pools, floors and fuses the detections of one image, class by class."""
    pooled = []
    for model_id in sorted(per_model):
        pooled.extend(apply_model_weights(per_model[model_id], w))
    pooled = [det for det in pooled if det.score >= cfg.score_floor]

    image_ids = {det.image_id for det in pooled}
    if len(image_ids) > 1:
        raise ConfigurationError(f"ensemble expects detections of one image, got {sorted(image_ids)}")

    fuse = FUSION_FUNCTIONS[cfg.method]
    out = []
    for class_id in sorted({det.class_id for det in pooled}):
        out.extend(fuse([det for det in pooled if det.class_id == class_id], cfg.iou_threshold))
    return sort_detections(out)


def group_by_image(dets: list[Detection]) -> "OrderedDict[str, list[Detection]]":
    grouped = OrderedDict()
    for det in dets:
        grouped.setdefault(det.image_id, []).append(det)
    return grouped


def ensemble_dataset(dets: list[Detection], cfg: FusionConfig, w: ModelWeights,
                     workers: int = 1, progress_bar: bool = False) -> list[Detection]:
    """
    Runs `ensemble` on every image. Images are fused independently, optionally on a thread pool,
    and the results are concatenated in sorted image order, so the output does not depend on
    the number of workers.
    """
    # fail before any work is scheduled
    for model_id in sorted({det.model_id for det in dets}):
        w.weight(model_id)

    grouped = group_by_image(dets)
    image_ids = sorted(grouped)

    def fuse_image(image_id):
        per_model = {}
        for det in grouped[image_id]:
            per_model.setdefault(det.model_id, []).append(det)
        return ensemble(per_model, cfg, w)

    logging.info(f"fusing {len(dets)} detections over {len(image_ids)} images with {cfg.method.value}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(fuse_image, image_ids), total=len(image_ids), desc="image", disable=not progress_bar))
    else:
        results = [fuse_image(image_id) for image_id in tqdm(image_ids, desc="image", disable=not progress_bar)]

    fused = [det for result in results for det in result]
    logging.info(f"fusion kept {len(fused)} of {len(dets)} detections")
    return fused
