import os
import logging

import numpy as np

from cgdet.cli import main
from cgdet.data import DatasetManifest, ImageRecord, PatientRecord, SplitSpec, patient_split, summarize_manifest
from cgdet.formats import read_json, write_ground_truth, write_hu, write_predictions, write_verdicts
from cgdet.geometry import BBox, Detection
from cgdet.guidance import ClassifierVerdict
from cgdet.imaging import HUImage, attention_crop, crop_image, heatmap_from_features, window
from cgdet.metrics import GroundTruthBox


def synthetic_slice(rng, size=128, lesion=None):
    """Soft tissue with a bright contrast filled vessel and an optional darker filling defect inside it."""
    hu = rng.normal(40, 15, size=(size, size))
    hu[:, size // 2 - 12:size // 2 + 12] = rng.normal(300, 20, size=(size, 24))
    if lesion is not None:
        x, y, w, h = lesion
        hu[y:y + h, x:x + w] = rng.normal(60, 10, size=(h, w))
    return HUImage(np.rint(hu).astype(np.int32))


def windowing(save_path=os.path.join(os.getcwd(), "runs", "windowing")):
    os.makedirs(save_path, exist_ok=True)
    rng = np.random.default_rng(0)
    img = synthetic_slice(rng, lesion=(60, 40, 6, 10))
    raw = os.path.join(save_path, "slice.raw")
    write_hu(raw, img)
    gray = window(img)
    logging.info(f"soft tissue window maps HU [{img.values.min()}, {img.values.max()}] "
                 f"to gray [{gray.values.min()}, {gray.values.max()}]")
    return main(["window", raw, "--output", os.path.join(save_path, "slice.pgm")])


def attention():
    rng = np.random.default_rng(1)
    features = rng.normal(0, 0.1, size=(16, 32, 32))
    features[:, 10:18, 14:22] += 3.0
    heatmap = heatmap_from_features(features)
    box = attention_crop(heatmap, 512, 512)
    local = crop_image(np.zeros((512, 512)), box)
    logging.info(f"attention box {box.as_tuple()}, local branch input {local.shape}")
    return box


def split():
    patients = []
    for p in range(35):
        images = tuple(ImageRecord(f"P{p:02d}_{i:03d}", "PE" if i % 4 == 0 else "NonPE") for i in range(8))
        patients.append(PatientRecord(f"P{p:02d}", images))
    manifest = DatasetManifest(tuple(patients))
    logging.info(f"dataset: {summarize_manifest(manifest)}")
    splits = {}
    for fractions in ({"train": 0.8, "test": 0.2}, {"train": 0.7, "val": 0.1, "test": 0.2}):
        splits[len(fractions)] = patient_split(manifest, SplitSpec(fractions, seed=0))
    return splits


def detection_pipeline(save_path=os.path.join(os.getcwd(), "runs", "pipeline"), workers=2):
    """Two noisy detectors are fused, filtered by the classifier and evaluated against planted lesions."""
    os.makedirs(save_path, exist_ok=True)
    rng = np.random.default_rng(2)
    image_ids, gts, verdicts = [], [], []
    predictions = {"frcnn": [], "yolo": []}
    for i in range(40):
        image_id = f"slice{i:03d}"
        image_ids.append(image_id)
        positive = i % 2 == 0
        if positive:
            x, y = rng.integers(20, 200, size=2)
            w, h = rng.integers(8, 40, size=2)
            gts.append(GroundTruthBox(image_id, 0, BBox(float(x), float(y), float(x + w), float(y + h))))
        verdicts.append(ClassifierVerdict(image_id, float(np.clip(rng.normal(0.75 if positive else 0.3, 0.15), 0, 1))))

        for model_id, jitter in (("frcnn", 2.0), ("yolo", 4.0)):
            if positive:
                box = gts[-1].box
                dx, dy = rng.normal(0, jitter, size=2)
                predictions[model_id].append(Detection(image_id, model_id, 0, box.translate(float(dx), float(dy)),
                                                       float(rng.uniform(0.4, 0.99))))
            for _ in range(int(rng.integers(0, 3))):
                # false positives stay clear of the lesions, which never extend below row 240
                x, y = rng.integers(0, 240), rng.integers(250, 290)
                predictions[model_id].append(Detection(image_id, model_id, 0, BBox(float(x), float(y), float(x + 12), float(y + 12)),
                                                       float(rng.uniform(0.005, 0.05))))

    path = lambda name: os.path.join(save_path, name)
    write_ground_truth(path("ground_truth.json"), image_ids, gts)
    write_verdicts(path("verdicts.json"), verdicts)
    for model_id, dets in predictions.items():
        write_predictions(path(f"{model_id}.json"), dets)

    steps = [
        ["fuse", path("frcnn.json"), path("yolo.json"), "--weights", "frcnn=2", "yolo=1", "--workers", str(workers),
         "--output", path("fused.json")],
        ["guide", path("fused.json"), path("verdicts.json"), "--output", path("guided.json")],
        ["eval", path("fused.json"), path("ground_truth.json"), "--output", path("report_fused.json")],
        ["eval", path("guided.json"), path("ground_truth.json"), "--verdicts", path("verdicts.json"),
         "--points-dir", path("points"), "--output", path("report_guided.json")],
        ["report", path("report_fused.json"), path("report_guided.json"), "--names", "WBF", "WBF+guidance",
         "--output", path("table.csv")],
    ]
    for step in steps:
        logging.info(f"cgdet {step[0]}")
        code = main(step)
        if code != 0:
            raise RuntimeError(f"cgdet {step[0]} failed with exit code {code}")
    return read_json(path("report_fused.json"), "cgdet.report/1"), read_json(path("report_guided.json"), "cgdet.report/1")


if __name__ == "__main__":
    logging.basicConfig(format='%(asctime)s - %(message)s', level=logging.INFO)
    windowing()
    attention()
    split()
    detection_pipeline()
