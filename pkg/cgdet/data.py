import math
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import constants
from .exceptions import ConfigurationError, StructuralError
from .geometry import area
from .imaging import mask_to_annotations, mask_to_label


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    label: str
    width: int | None = None
    height: int | None = None
    mask: str | None = None
    annotations: tuple = ()


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    images: tuple
    split: str | None = None

    def __post_init__(self):
        if not self.images:
            raise StructuralError(f"patient {self.patient_id} has no images")

    @property
    def image_ids(self) -> list[str]:
        return [image.image_id for image in self.images]


@dataclass(frozen=True)
class DatasetManifest:
    patients: tuple

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def images(self):
        for patient in self.patients:
            for image in patient.images:
                yield patient, image


@dataclass
class SplitSpec:
    """Named split fractions, e.g. {"train": 0.8, "test": 0.2}, and the seed of the patient shuffle."""
    fractions: dict = field(default_factory=lambda: OrderedDict([("train", 0.8), ("test", 0.2)]))
    seed: int = 0

    def __post_init__(self):
        if not self.fractions:
            raise ConfigurationError("a split needs at least one named fraction")
        for name, fraction in self.fractions.items():
            if not fraction > 0:
                raise ConfigurationError(f"split {name} must have a positive fraction, got {fraction}")
        if abs(sum(self.fractions.values()) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions must sum to 1, got {sum(self.fractions.values())}")


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    image_id: str | None = None
    patient_ids: tuple = ()

    def as_dict(self) -> dict:
        return {"kind": self.kind, "message": self.message, "image_id": self.image_id, "patient_ids": list(self.patient_ids)}


def split_sizes(n: int, fractions) -> list[int]:
    """
    Largest remainder apportionment of n items. Fractions are read as exact decimals, so 0.7 of 35
    is exactly 24.5; equal remainders favour the split listed first.
    """
    exact = [Fraction(f).limit_denominator(10**9) * n for f in fractions]
    sizes = [math.floor(q) for q in exact]
    remainder = n - sum(sizes)
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def patient_split(manifest: DatasetManifest, spec: SplitSpec) -> "OrderedDict[str, list[str]]":
    """
    Patient-wise split: no patient contributes images to two splits.
    Patient ids are sorted, then shuffled with numpy's PCG64 generator seeded by spec.seed,
    and cut into consecutive chunks of the apportioned sizes.
    """
    duplicates = sorted(pid for pid, count in Counter(manifest.patient_ids).items() if count > 1)
    if duplicates:
        raise StructuralError(f"patients listed more than once: {duplicates}")
    patient_ids = sorted(manifest.patient_ids)
    n = len(patient_ids)
    names = list(spec.fractions)
    if len(names) > n:
        raise StructuralError(f"{len(names)} splits requested for only {n} patients")

    sizes = split_sizes(n, spec.fractions.values())
    empty = [name for name, size in zip(names, sizes) if size == 0]
    if empty:
        raise StructuralError(f"splits {empty} would receive no patient out of {n}")

    permutation = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [patient_ids[i] for i in permutation]
    splits = OrderedDict()
    start = 0
    for name, size in zip(names, sizes):
        splits[name] = shuffled[start:start + size]
        start += size
    logging.info("patient split: " + ", ".join(f"{name} {len(ids)}" for name, ids in splits.items()))
    return splits


def tag_manifest(manifest: DatasetManifest, splits) -> DatasetManifest:
    split_of = {pid: name for name, ids in splits.items() for pid in ids}
    return DatasetManifest(tuple(replace(p, split=split_of.get(p.patient_id)) for p in manifest.patients))


def assign_splits(manifest: DatasetManifest, splits) -> dict[str, str]:
    """image_id -> split of its patient."""
    split_of = {pid: name for name, ids in splits.items() for pid in ids}
    return {image.image_id: split_of[patient.patient_id] for patient, image in manifest.images()}


def validate_manifest(manifest: DatasetManifest, mask_loader=None) -> list[Violation]:
    """
    Collects every inconsistency instead of stopping at the first: duplicate patients and images,
    unknown labels, labels disagreeing with their masks, and annotations outside the image or on
    negative slices. mask_loader maps a mask reference to a BinaryMask; without it masks are not read.
    """
    violations = []
    for pid, count in Counter(manifest.patient_ids).items():
        if count > 1:
            violations.append(Violation("duplicate_patient", f"patient {pid} is listed {count} times", patient_ids=(pid,)))

    owners = OrderedDict()
    for patient, image in manifest.images():
        owners.setdefault(image.image_id, []).append(patient.patient_id)
    for image_id, pids in owners.items():
        if len(pids) > 1:
            violations.append(Violation("duplicate_image",
                                        f"image {image_id} belongs to patients {', '.join(pids)}",
                                        image_id=image_id, patient_ids=tuple(pids)))

    for patient, image in manifest.images():
        where = dict(image_id=image.image_id, patient_ids=(patient.patient_id,))
        if image.label not in (constants.LABEL_PE, constants.LABEL_NON_PE):
            violations.append(Violation("invalid_label", f"image {image.image_id} has unknown label {image.label!r}", **where))

        if image.mask is not None and mask_loader is not None:
            try:
                mask = mask_loader(image.mask)
            except (OSError, ValueError) as e:
                violations.append(Violation("mask_unreadable", f"mask {image.mask} of image {image.image_id}: {e}", **where))
            else:
                if image.width is not None and image.height is not None and (mask.width, mask.height) != (image.width, image.height):
                    violations.append(Violation("mask_size_mismatch",
                                                f"mask of image {image.image_id} is {mask.width}x{mask.height}, "
                                                f"image is {image.width}x{image.height}", **where))
                expected = mask_to_label(mask)
                if image.label != expected:
                    violations.append(Violation("label_mask_mismatch",
                                                f"image {image.image_id} is labeled {image.label} but its mask implies {expected}", **where))

        if image.annotations and image.label == constants.LABEL_NON_PE:
            violations.append(Violation("annotation_on_negative",
                                        f"image {image.image_id} is labeled {constants.LABEL_NON_PE} but has {len(image.annotations)} annotations", **where))
        if image.width is not None and image.height is not None:
            for box in image.annotations:
                if not box.within(image.width, image.height):
                    violations.append(Violation("annotation_out_of_bounds",
                                                f"box {box.as_tuple()} lies outside image {image.image_id} "
                                                f"of size {image.width}x{image.height}", **where))
    if violations:
        logging.warning(f"manifest has {len(violations)} violations")
    return violations


def summarize_manifest(manifest: DatasetManifest, small_side: float = constants.SMALL_ROI_SIDE) -> dict:
    """Dataset overview: slices, positive slices, lesion boxes and the share of small lesions."""
    images = [image for _, image in manifest.images()]
    boxes = [box for image in images for box in image.annotations]
    small = sum(1 for box in boxes if math.sqrt(area(box)) <= small_side)
    without_pe = [p.patient_id for p in manifest.patients
                  if not any(image.label == constants.LABEL_PE for image in p.images)]
    return {
        "patients": len(manifest.patients),
        "images": len(images),
        "pe_images": sum(1 for image in images if image.label == constants.LABEL_PE),
        "rois": len(boxes),
        "small_roi_share": small / len(boxes) if boxes else 0.0,
        "patients_without_pe": sorted(without_pe),
    }


def build_manifest_from_masks(patient_masks: dict, margin: int = constants.ANNOTATION_MARGIN) -> DatasetManifest:
    """
    patient_masks: patient_id -> {image_id: BinaryMask}. Labels follow the mask (non blank -> PE),
    annotations are the expanded component boxes.
    """
    patients = []
    for pid in sorted(patient_masks):
        images = []
        for image_id in sorted(patient_masks[pid]):
            mask = patient_masks[pid][image_id]
            images.append(ImageRecord(image_id=image_id,
                                      label=mask_to_label(mask),
                                      width=mask.width,
                                      height=mask.height,
                                      annotations=tuple(mask_to_annotations(mask, margin))))
        patients.append(PatientRecord(pid, tuple(images)))
    return DatasetManifest(tuple(patients))
