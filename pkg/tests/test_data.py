import unittest
import os
import sys
from collections import OrderedDict

import numpy as np

sys.path.insert(0, os.getcwd())
from cgdet.data import *
from cgdet.geometry import BBox
from cgdet.imaging import BinaryMask
from cgdet.exceptions import ConfigurationError, StructuralError


def make_manifest(n_patients, images_per_patient=2):
    patients = []
    for p in range(n_patients):
        images = tuple(ImageRecord(f"p{p:03d}_{i}", "NonPE", 64, 64) for i in range(images_per_patient))
        patients.append(PatientRecord(f"p{p:03d}", images))
    return DatasetManifest(tuple(patients))


def fractions(*values, names=("train", "val", "test")):
    if len(values) == 2:
        names = ("train", "test")
    return OrderedDict(zip(names, values))


class Test(unittest.TestCase):
    def test_split_sizes(self):
        self.assertTrue(split_sizes(35, [0.8, 0.2]) == [28, 7])
        self.assertTrue(split_sizes(35, [0.7, 0.1, 0.2]) == [25, 3, 7])
        self.assertTrue(split_sizes(10, [0.7, 0.1, 0.2]) == [7, 1, 2])

    def test_patient_split_counts(self):
        manifest = make_manifest(35)
        splits = patient_split(manifest, SplitSpec(fractions(0.8, 0.2), seed=0))
        self.assertTrue([len(ids) for ids in splits.values()] == [28, 7])
        splits = patient_split(manifest, SplitSpec(fractions(0.7, 0.1, 0.2), seed=0))
        self.assertTrue([len(ids) for ids in splits.values()] == [25, 3, 7])

    def test_patient_split_partition_and_determinism(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            manifest = make_manifest(int(rng.integers(6, 40)), int(rng.integers(1, 4)))
            spec = SplitSpec(fractions(0.7, 0.1, 0.2), seed=int(rng.integers(0, 1000)))
            splits = patient_split(manifest, spec)
            assigned = [pid for ids in splits.values() for pid in ids]
            self.assertTrue(sorted(assigned) == sorted(manifest.patient_ids))
            self.assertTrue(splits == patient_split(manifest, spec))

            image_splits = assign_splits(manifest, splits)
            for patient in manifest.patients:
                self.assertTrue(len({image_splits[i] for i in patient.image_ids}) == 1)

    def test_patient_split_errors(self):
        with self.assertRaises(StructuralError):
            patient_split(make_manifest(2), SplitSpec(fractions(0.7, 0.1, 0.2)))
        with self.assertRaises(StructuralError):
            patient_split(make_manifest(4), SplitSpec(fractions(0.9, 0.05, 0.05)))
        duplicated = DatasetManifest(make_manifest(3).patients + make_manifest(1).patients)
        with self.assertRaises(StructuralError):
            patient_split(duplicated, SplitSpec())

    def test_split_spec_validation(self):
        with self.assertRaises(ConfigurationError):
            SplitSpec(fractions(0.8, 0.3))
        with self.assertRaises(ConfigurationError):
            SplitSpec(fractions(1.0, 0.0))

    def test_tag_manifest(self):
        manifest = make_manifest(5)
        splits = patient_split(manifest, SplitSpec())
        tagged = tag_manifest(manifest, splits)
        self.assertTrue(sorted(p.split for p in tagged.patients) == ["test"] + ["train"] * 4)

    def test_validate_manifest(self):
        positive = ImageRecord("a1", "PE", 32, 32, annotations=(BBox(0, 0, 40, 10),))
        negative = ImageRecord("a2", "NonPE", 32, 32, annotations=(BBox(0, 0, 5, 5),))
        unknown = ImageRecord("b1", "maybe", 32, 32)
        manifest = DatasetManifest((PatientRecord("a", (positive, negative)),
                                    PatientRecord("b", (unknown, ImageRecord("a1", "PE", 32, 32)))))
        kinds = sorted(v.kind for v in validate_manifest(manifest))
        self.assertTrue(kinds == ["annotation_on_negative", "annotation_out_of_bounds", "duplicate_image", "invalid_label"])
        duplicate = [v for v in validate_manifest(manifest) if v.kind == "duplicate_image"][0]
        self.assertTrue(duplicate.patient_ids == ("a", "b"))

    def test_validate_manifest_with_masks(self):
        blank = BinaryMask(np.zeros((16, 16), dtype=bool))
        masks = {"blank.pgm": blank}
        manifest = DatasetManifest((PatientRecord("a", (ImageRecord("a1", "PE", 32, 32, mask="blank.pgm"),
                                                        ImageRecord("a2", "NonPE", 32, 32, mask="missing.pgm"))),))

        def loader(reference):
            if reference not in masks:
                raise FileNotFoundError(reference)
            return masks[reference]

        kinds = sorted(v.kind for v in validate_manifest(manifest, loader))
        self.assertTrue(kinds == ["label_mask_mismatch", "mask_size_mismatch", "mask_unreadable"])

    def test_summarize_manifest(self):
        manifest = DatasetManifest((
            PatientRecord("a", (ImageRecord("a1", "PE", annotations=(BBox(0, 0, 10, 10), BBox(0, 0, 40, 40))),
                                ImageRecord("a2", "NonPE"))),
            PatientRecord("b", (ImageRecord("b1", "NonPE"),)),
        ))
        summary = summarize_manifest(manifest)
        self.assertTrue(summary == {"patients": 2, "images": 3, "pe_images": 1, "rois": 2,
                                    "small_roi_share": 0.5, "patients_without_pe": ["b"]})

    def test_build_manifest_from_masks(self):
        lesion = np.zeros((20, 20), dtype=bool)
        lesion[8:10, 8:10] = True
        manifest = build_manifest_from_masks({
            "b": {"b1": BinaryMask(np.zeros((20, 20), dtype=bool))},
            "a": {"a2": BinaryMask(lesion), "a1": BinaryMask(np.zeros((20, 20), dtype=bool))},
        })
        self.assertTrue(manifest.patient_ids == ["a", "b"])
        a2 = manifest.patients[0].images[1]
        self.assertTrue(a2.label == "PE")
        self.assertTrue(a2.annotations == (BBox(3, 3, 15, 15),))
        self.assertTrue(validate_manifest(manifest) == [])

    def test_empty_patient(self):
        with self.assertRaises(StructuralError):
            PatientRecord("a", ())


if __name__ == '__main__':
    unittest.main()
