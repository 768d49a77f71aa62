import unittest
import tempfile
import json
import os
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, os.getcwd())
from cgdet.formats import *
from cgdet.geometry import BBox, Detection
from cgdet.guidance import ClassifierVerdict
from cgdet.imaging import HUImage
from cgdet.metrics import GroundTruthBox
from cgdet.exceptions import DataFormatError


class Test(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_predictions_fixpoint(self):
        dets = [Detection("img1", "yolo", 0, BBox(1 / 3, 2.0, 10.123456789, 20.0), 0.123456789),
                Detection("img0", "frcnn", 0, BBox(0.0, 0.0, 5.0, 5.0), 1.0)]
        write_predictions(self.path / "a.json", dets)
        write_predictions(self.path / "b.json", read_predictions(self.path / "a.json"))
        self.assertTrue((self.path / "a.json").read_bytes() == (self.path / "b.json").read_bytes())
        record = json.loads((self.path / "a.json").read_text())["detections"][0]
        self.assertTrue(record["score"] == 0.123457)
        self.assertTrue(record["box"][0] == 0.333333)

    def test_schema_mismatch(self):
        write_verdicts(self.path / "v.json", [ClassifierVerdict("img", 0.4)])
        with self.assertRaises(DataFormatError):
            read_predictions(self.path / "v.json")

    def test_invalid_json(self):
        (self.path / "p.json").write_text('{"schema": ')
        with self.assertRaises(DataFormatError):
            read_predictions(self.path / "p.json")

    def test_bad_record_names_index(self):
        payload = {"schema": "cgdet.predictions/1", "detections": [
            {"image_id": "a", "model_id": "m", "class_id": 0, "box": [0, 0, 1, 1], "score": 0.5},
            {"image_id": "a", "model_id": "m", "class_id": 0, "box": [0, 0, 1, 1], "score": 1.5},
        ]}
        (self.path / "p.json").write_text(json.dumps(payload))
        with self.assertRaises(DataFormatError) as ctx:
            read_predictions(self.path / "p.json")
        self.assertTrue("#1" in str(ctx.exception))

    def test_duplicate_verdicts(self):
        payload = {"schema": "cgdet.verdicts/1", "verdicts": [{"image_id": "a", "p_f": 0.1}, {"image_id": "a", "p_f": 0.2}]}
        (self.path / "v.json").write_text(json.dumps(payload))
        with self.assertRaises(DataFormatError):
            read_verdicts(self.path / "v.json")

    def test_ground_truth_keeps_negative_images(self):
        gts = [GroundTruthBox("a", 0, BBox(0, 0, 4, 4))]
        write_ground_truth(self.path / "gt.json", ["a", "b"], gts)
        image_ids, actual = read_ground_truth(self.path / "gt.json")
        self.assertTrue(image_ids == ["a", "b"])
        self.assertTrue(actual == gts)

    def test_hu_sidecar(self):
        img = HUImage(np.array([[-1000, 0], [40, 3000], [12, -7]]))
        write_hu(self.path / "slice.raw", img)
        self.assertTrue(np.array_equal(read_hu(self.path / "slice.raw").values, img.values))
        self.assertTrue(json.loads((self.path / "slice.json").read_text())["width"] == 2)

    def test_hu_truncated_and_trailing(self):
        write_hu(self.path / "slice.raw", HUImage(np.zeros((2, 2))))
        with open(self.path / "slice.raw", "ab") as f:
            f.write(b"\x00")
        with self.assertRaises(DataFormatError) as ctx:
            read_hu(self.path / "slice.raw")
        self.assertTrue("byte offset 8" in str(ctx.exception))

        (self.path / "slice.raw").write_bytes(b"\x00" * 5)
        with self.assertRaises(DataFormatError) as ctx:
            read_hu(self.path / "slice.raw")
        self.assertTrue("byte offset 5" in str(ctx.exception))

    def test_hu_missing_sidecar(self):
        (self.path / "lonely.raw").write_bytes(b"\x00" * 8)
        with self.assertRaises(DataFormatError):
            read_hu(self.path / "lonely.raw")

    def test_pgm(self):
        values = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        write_pgm(self.path / "img.pgm", values)
        self.assertTrue((self.path / "img.pgm").read_bytes().startswith(b"P5"))
        self.assertTrue(np.array_equal(read_pgm(self.path / "img.pgm"), values))

        mask = np.zeros((3, 4), dtype=bool)
        mask[1, 2] = True
        write_pgm(self.path / "mask.pgm", mask)
        self.assertTrue(np.array_equal(read_mask(self.path / "mask.pgm").values, mask))

    def test_not_an_image(self):
        (self.path / "img.pgm").write_bytes(b"hello")
        with self.assertRaises(DataFormatError):
            read_pgm(self.path / "img.pgm")

    def test_heatmap(self):
        np.save(self.path / "h.npy", np.array([[0.0, 0.5], [1.0, 0.25]]))
        self.assertTrue(read_heatmap(self.path / "h.npy").values[0, 1] == 0.5)
        np.save(self.path / "f.npy", np.array([[[0.0, 8.0], [2.0, 4.0]]]))
        self.assertTrue(np.allclose(read_heatmap(self.path / "f.npy").values, [[0.0, 1.0], [0.25, 0.5]]))
        np.save(self.path / "bad.npy", np.array([[0.0, 2.0]]))
        with self.assertRaises(DataFormatError):
            read_heatmap(self.path / "bad.npy")

    def test_manifest(self):
        payload = {"schema": "cgdet.manifest/1", "patients": [
            {"patient_id": "p1", "images": [
                {"image_id": "i1", "label": "PE", "width": 32, "height": 32, "annotations": [[1, 2, 3, 4]]},
                {"image_id": "i2", "label": "NonPE", "width": 32, "height": 32, "annotations": []}]},
        ]}
        (self.path / "m.json").write_text(json.dumps(payload))
        manifest = read_manifest(self.path / "m.json")
        self.assertTrue(manifest.patients[0].images[0].annotations == (BBox(1, 2, 3, 4),))
        write_manifest(self.path / "m2.json", manifest)
        self.assertTrue(read_manifest(self.path / "m2.json") == manifest)


if __name__ == '__main__':
    unittest.main()
