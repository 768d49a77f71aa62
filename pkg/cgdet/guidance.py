"""
Classifier-guided detection.

The fusion branch of the image classifier estimates p_f, the probability that a slice shows an
embolism. Slices the classifier calls positive keep every detection. On the remaining slices only
detections whose confidence exceeds a small floor survive, which removes false positives without
touching any detection above the floor.
"""

import logging
from dataclasses import dataclass

from . import constants
from .exceptions import ConfigurationError, StructuralError
from .geometry import Detection


@dataclass(frozen=True)
class ClassifierVerdict:
    image_id: str
    p_f: float

    def __post_init__(self):
        if not 0.0 <= self.p_f <= 1.0:
            raise StructuralError(f"p_f must lie in [0, 1], got {self.p_f} for image {self.image_id}")


@dataclass
class GuidanceConfig:
    theta: float = constants.GUIDANCE_THETA
    conf_floor: float = constants.GUIDANCE_CONF_FLOOR

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigurationError(f"theta must lie in [0, 1], got {self.theta}")
        if not 0.0 <= self.conf_floor <= 1.0:
            raise ConfigurationError(f"conf_floor must lie in [0, 1], got {self.conf_floor}")


def is_gated(verdict: ClassifierVerdict, cfg: GuidanceConfig) -> bool:
    return verdict.p_f < cfg.theta


def guided_filter(dets: list[Detection], verdict: ClassifierVerdict, cfg: GuidanceConfig) -> list[Detection]:
    mismatched = sorted({det.image_id for det in dets if det.image_id != verdict.image_id})
    if mismatched:
        raise StructuralError(f"verdict for image {verdict.image_id} applied to detections of {mismatched}")
    if not is_gated(verdict, cfg):
        return list(dets)
    return [det for det in dets if det.score > cfg.conf_floor]


def guided_filter_dataset(per_image: dict[str, list[Detection]],
                          verdicts: dict[str, ClassifierVerdict],
                          cfg: GuidanceConfig) -> dict[str, list[Detection]]:
    missing = sorted(image_id for image_id, dets in per_image.items() if dets and image_id not in verdicts)
    if missing:
        raise StructuralError(f"no classifier verdict for images with detections: {', '.join(missing)}")

    out = {}
    for image_id, dets in per_image.items():
        if not dets:
            out[image_id] = []
            continue
        out[image_id] = guided_filter(dets, verdicts[image_id], cfg)
    return out


def guidance_summary(before: dict[str, list[Detection]], after: dict[str, list[Detection]],
                     verdicts: dict[str, ClassifierVerdict], cfg: GuidanceConfig) -> dict:
    kept = sum(len(dets) for dets in after.values())
    total = sum(len(dets) for dets in before.values())
    gated = sum(1 for image_id, dets in before.items() if dets and is_gated(verdicts[image_id], cfg))
    summary = {"images": len(before), "gated_images": gated, "kept": kept, "dropped": total - kept}
    logging.info(f"guidance dropped {summary['dropped']} of {total} detections "
                 f"on {gated} gated images (theta={cfg.theta}, conf_floor={cfg.conf_floor})")
    return summary
