"""
Readers and writers for every file the command line consumes or produces.

JSON documents carry a versioned `schema` tag, are written with sorted keys and two space
indentation, and round floats to six decimals so that repeated runs are byte identical.
The normative description of each layout lives in docs/FORMATS.md.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import constants
from .data import DatasetManifest, ImageRecord, PatientRecord
from .exceptions import CgdetError, DataFormatError
from .geometry import BBox, Detection
from .guidance import ClassifierVerdict
from .imaging import BinaryMask, HUImage, Heatmap, heatmap_from_features
from .metrics import GroundTruthBox


def rounded(value: float) -> float:
    # + 0.0 turns -0.0 into 0.0
    return round(float(value), constants.DECIMALS) + 0.0


def rounded_box(box: BBox) -> list[float]:
    return [rounded(c) for c in box.as_tuple()]


def dumps(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_json(path, payload):
    Path(path).write_text(dumps(payload), encoding="utf-8")


def read_json(path, schema: str):
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON at line {e.lineno} column {e.colno} (char {e.pos}): {e.msg}")
    if not isinstance(payload, dict) or payload.get("schema") != schema:
        found = payload.get("schema") if isinstance(payload, dict) else type(payload).__name__
        raise DataFormatError(f"{path}: expected schema {schema!r}, found {found!r}")
    return payload


def _records(path, payload, key):
    records = payload.get(key)
    if not isinstance(records, list):
        raise DataFormatError(f"{path}: field {key!r} must be a list")
    return records


def _parse_each(path, records, what, parse):
    parsed = []
    for index, record in enumerate(records):
        try:
            parsed.append(parse(record))
        except (KeyError, TypeError, ValueError, AttributeError, CgdetError) as e:
            detail = f"missing field {e}" if isinstance(e, KeyError) else str(e)
            raise DataFormatError(f"{path}: {what} #{index}: {detail}")
    return parsed


# predictions

def detection_to_record(det: Detection) -> dict:
    return {
        "image_id": det.image_id,
        "model_id": det.model_id,
        "class_id": det.class_id,
        "box": rounded_box(det.box),
        "score": rounded(det.score),
    }


def _detection_from_record(record) -> Detection:
    return Detection(image_id=str(record["image_id"]),
                     model_id=str(record["model_id"]),
                     class_id=int(record["class_id"]),
                     box=BBox.from_sequence(record["box"]),
                     score=float(record["score"]))


def predictions_payload(dets: list[Detection]) -> dict:
    return {"schema": constants.SCHEMA_PREDICTIONS, "detections": [detection_to_record(d) for d in dets]}


def write_predictions(path, dets: list[Detection]):
    write_json(path, predictions_payload(dets))


def read_predictions(path) -> list[Detection]:
    payload = read_json(path, constants.SCHEMA_PREDICTIONS)
    return _parse_each(path, _records(path, payload, "detections"), "detection", _detection_from_record)


# verdicts

def write_verdicts(path, verdicts: list[ClassifierVerdict]):
    write_json(path, {"schema": constants.SCHEMA_VERDICTS,
                      "verdicts": [{"image_id": v.image_id, "p_f": rounded(v.p_f)} for v in verdicts]})


def read_verdicts(path) -> dict[str, ClassifierVerdict]:
    payload = read_json(path, constants.SCHEMA_VERDICTS)
    verdicts = _parse_each(path, _records(path, payload, "verdicts"), "verdict",
                           lambda r: ClassifierVerdict(str(r["image_id"]), float(r["p_f"])))
    out = {}
    for index, verdict in enumerate(verdicts):
        if verdict.image_id in out:
            raise DataFormatError(f"{path}: verdict #{index}: second verdict for image {verdict.image_id}")
        out[verdict.image_id] = verdict
    return out


# ground truth

def write_ground_truth(path, image_ids: list[str], gts: list[GroundTruthBox]):
    images = []
    for image_id in image_ids:
        boxes = [{"class_id": g.class_id, "box": rounded_box(g.box)} for g in gts if g.image_id == image_id]
        images.append({"image_id": image_id, "boxes": boxes})
    write_json(path, {"schema": constants.SCHEMA_GROUND_TRUTH, "images": images})


def read_ground_truth(path) -> tuple[list[str], list[GroundTruthBox]]:
    """Returns every listed image (negatives included) and the flattened boxes."""
    payload = read_json(path, constants.SCHEMA_GROUND_TRUTH)

    def parse(record):
        image_id = str(record["image_id"])
        return image_id, [GroundTruthBox(image_id, int(b["class_id"]), BBox.from_sequence(b["box"])) for b in record["boxes"]]

    parsed = _parse_each(path, _records(path, payload, "images"), "image", parse)
    image_ids = [image_id for image_id, _ in parsed]
    if len(set(image_ids)) != len(image_ids):
        raise DataFormatError(f"{path}: images are listed more than once")
    return image_ids, [g for _, boxes in parsed for g in boxes]


# manifests

def _image_from_record(record) -> ImageRecord:
    return ImageRecord(image_id=str(record["image_id"]),
                       label=str(record["label"]),
                       width=None if record.get("width") is None else int(record["width"]),
                       height=None if record.get("height") is None else int(record["height"]),
                       mask=record.get("mask"),
                       annotations=tuple(BBox.from_sequence(b) for b in record.get("annotations", [])))


def _patient_from_record(record) -> PatientRecord:
    return PatientRecord(patient_id=str(record["patient_id"]),
                         images=tuple(_image_from_record(r) for r in record["images"]),
                         split=record.get("split"))


def read_manifest(path) -> DatasetManifest:
    payload = read_json(path, constants.SCHEMA_MANIFEST)
    return DatasetManifest(tuple(_parse_each(path, _records(path, payload, "patients"), "patient", _patient_from_record)))


def manifest_payload(manifest: DatasetManifest) -> dict:
    patients = []
    for patient in manifest.patients:
        record = {"patient_id": patient.patient_id, "images": []}
        if patient.split is not None:
            record["split"] = patient.split
        for image in patient.images:
            entry = {"image_id": image.image_id, "label": image.label,
                     "annotations": [rounded_box(b) for b in image.annotations]}
            for key in ("width", "height", "mask"):
                if getattr(image, key) is not None:
                    entry[key] = getattr(image, key)
            record["images"].append(entry)
        patients.append(record)
    return {"schema": constants.SCHEMA_MANIFEST, "patients": patients}


def write_manifest(path, manifest: DatasetManifest):
    write_json(path, manifest_payload(manifest))


def mask_loader_for(manifest_path):
    """Resolves mask references relative to the manifest's directory."""
    base = Path(manifest_path).parent

    def load(reference):
        return read_mask(base / reference)
    return load


# raw Hounsfield images: <name>.raw plus a <name>.json sidecar

def sidecar_path(raw_path) -> Path:
    return Path(raw_path).with_suffix(".json")


def write_hu(raw_path, img: HUImage):
    raw_path = Path(raw_path)
    img.values.astype("<i2").tofile(raw_path)
    write_json(sidecar_path(raw_path), {"width": img.width, "height": img.height, "byte_order": "little", "dtype": "int16"})


def read_hu(raw_path) -> HUImage:
    raw_path = Path(raw_path)
    side = sidecar_path(raw_path)
    try:
        descriptor = json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataFormatError(f"{raw_path}: sidecar descriptor {side} not found")
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{side}: invalid JSON at char {e.pos}: {e.msg}")
    try:
        width, height = int(descriptor["width"]), int(descriptor["height"])
        byte_order, dtype = descriptor.get("byte_order", "little"), descriptor.get("dtype", "int16")
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{side}: descriptor needs integer width and height ({e})")
    if width <= 0 or height <= 0:
        raise DataFormatError(f"{side}: width and height must be positive, got {width}x{height}")
    if byte_order != "little" or dtype != "int16":
        raise DataFormatError(f"{side}: only little endian int16 data is supported, got {byte_order} {dtype}")

    data = raw_path.read_bytes()
    expected = 2 * width * height
    if len(data) < expected:
        raise DataFormatError(f"{raw_path}: truncated, expected {expected} bytes for {width}x{height} int16 pixels "
                              f"but data ends at byte offset {len(data)}")
    if len(data) > expected:
        raise DataFormatError(f"{raw_path}: unexpected trailing data at byte offset {expected} "
                              f"({len(data) - expected} extra bytes)")
    return HUImage(np.frombuffer(data, dtype="<i2").reshape(height, width))


# PGM (P5, maxval 255) for gray images and masks

def write_pgm(path, values: np.ndarray):
    arr = np.asarray(values)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    Image.fromarray(arr.astype(np.uint8)).save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DataFormatError(f"{path}: expected an 8 bit gray image, got mode {img.mode}")
            return np.array(img)
    except UnidentifiedImageError:
        raise DataFormatError(f"{path}: not a PGM image")


def read_mask(path) -> BinaryMask:
    return BinaryMask(read_pgm(path) > 0)


# heatmaps

def read_heatmap(path, features: bool = False) -> Heatmap:
    """
    Reads an .npy array. 3-D arrays and `features=True` are treated as raw feature maps and
    normalized; otherwise the array must already be a heatmap in [0, 1].
    """
    try:
        arr = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise DataFormatError(f"{path}: not a numpy array file ({e})")
    if not np.issubdtype(arr.dtype, np.number):
        raise DataFormatError(f"{path}: heatmap must be numeric, got dtype {arr.dtype}")
    try:
        if features or arr.ndim == 3:
            return heatmap_from_features(arr)
        return Heatmap(arr)
    except CgdetError as e:
        raise DataFormatError(f"{path}: {e}")
