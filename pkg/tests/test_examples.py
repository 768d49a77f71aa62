import unittest
import tempfile

import os
import sys

sys.path.insert(0, os.getcwd())
from examples import *


class Test(unittest.TestCase):
    def test_windowing(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertTrue(windowing(tmp) == 0)
            self.assertTrue(os.path.exists(os.path.join(tmp, "slice.pgm")))

    def test_attention(self):
        box = attention()
        self.assertTrue(box.within(512, 512))
        self.assertTrue(box.x_min <= 14 * 16 and box.x_max >= 22 * 16)

    def test_split(self):
        splits = split()
        self.assertTrue([len(ids) for ids in splits[2].values()] == [28, 7])
        self.assertTrue([len(ids) for ids in splits[3].values()] == [25, 3, 7])

    def test_detection_pipeline(self):
        with tempfile.TemporaryDirectory() as tmp:
            fused, guided = detection_pipeline(tmp)
            self.assertTrue(guided["detection"][0]["operating_point"]["precision"] >= fused["detection"][0]["operating_point"]["precision"])
            self.assertTrue(guided["detection"][0]["operating_point"]["tp"] == fused["detection"][0]["operating_point"]["tp"])
            self.assertTrue(guided["classification"] is not None)
            self.assertTrue(os.path.exists(os.path.join(tmp, "table.csv")))

if __name__ == '__main__':
    unittest.main()
