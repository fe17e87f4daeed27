import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from ArcGemRetrieval import imaging
from ArcGemRetrieval.errors import AugmentationError, ConfigError, CropError, DataError, ResolutionError
from ArcGemRetrieval.imaging import ManifestRow, PreprocessConfig, RenderSettings
from ArcGemRetrieval.numerics import SeededRng

class DatasetCase(unittest.TestCase):
    """ TestCase for the synthetic dataset """

    @classmethod
    def setUpClass(cls):
        cls.manifest, cls.protos = imaging.synth_dataset(7, classes = 3, train_per_class = 4, index_per_class = 2,
                                                         query_per_class = 1, distractor_classes = 2)

    def test_counts(self):
        """ Tests the number of rows per split and the dense train labels """
        self.assertEqual(self.manifest.counts, {"train": 12, "index": 10, "query": 3})
        self.assertEqual(self.manifest.class_count, 3)
        self.assertEqual(sorted({row.label for row in self.manifest.split("train")}), [0, 1, 2])

    def test_distractors(self):
        """ Tests that distractors only live in the index split, with labels K and above """
        distractors = [row for row in self.manifest.rows if row.label >= 3]
        self.assertEqual(len(distractors), 4)
        self.assertTrue(all(row.split == "index" for row in distractors))
        self.assertEqual(set(self.protos), {0, 1, 2, 3, 4})

    def test_ground_truth(self):
        """ Tests that each query maps to the index rows of its own class """
        ground_truth = self.manifest.ground_truth()
        self.assertEqual(len(ground_truth), 3)
        for query in self.manifest.split("query"):
            relevant = ground_truth[query.id]
            self.assertEqual(len(relevant), 2)
            self.assertTrue(all(f"-c{query.label:04d}-" in _id for _id in relevant))

    def test_deterministic(self):
        """ Tests that the same seed gives the same manifest and another seed other row seeds """
        manifest, _ = imaging.synth_dataset(7, classes = 3, train_per_class = 4, index_per_class = 2,
                                            query_per_class = 1, distractor_classes = 2)
        self.assertEqual(manifest.rows, self.manifest.rows)
        other, _ = imaging.synth_dataset(8, classes = 3, train_per_class = 4, index_per_class = 2,
                                         query_per_class = 1, distractor_classes = 2)
        self.assertNotEqual([row.seed for row in other.rows], [row.seed for row in self.manifest.rows])

    def test_invalid(self):
        """ Tests the configuration checks """
        self.assertRaises(ConfigError, imaging.synth_dataset, 1, 1, 1, 1, 1)
        self.assertRaises(ConfigError, imaging.synth_dataset, 1, 2, -1, 1, 1)
        self.assertRaises(DataError, imaging.DatasetManifest, [ManifestRow("a", 0, "train", 1), ManifestRow("a", 1, "train", 2)], 1)
        self.assertRaises(DataError, imaging.DatasetManifest, [ManifestRow("a", 0, "valid", 1)], 1)
        self.assertRaises(DataError, imaging.DatasetManifest, [ManifestRow("a", 0, "train", 1), ManifestRow("b", 2, "train", 2)], 1)

class RenderCase(unittest.TestCase):
    """ TestCase for rendering """

    @classmethod
    def setUpClass(cls):
        cls.proto = imaging.make_proto(7, 0)

    def test_shape_and_range(self):
        """ Tests the output shape, dtype and range """
        img = imaging.render_instance(self.proto, 123, 32)
        self.assertEqual(img.shape, (3, 32, 32))
        self.assertEqual(img.dtype, np.float32)
        self.assertGreaterEqual(img.min(), 0.0)
        self.assertLessEqual(img.max(), 1.0)

    def test_deterministic(self):
        """ Tests that the instance seed fixes the render bit for bit """
        first = imaging.render_instance(self.proto, 123, 32)
        self.assertEqual(first.tobytes(), imaging.render_instance(self.proto, 123, 32).tobytes())
        self.assertFalse(np.array_equal(first, imaging.render_instance(self.proto, 124, 32)))

    def test_same_scene_at_every_resolution(self):
        """ Tests that without noise a downsampled large render is close to a small render of the same seed """
        quiet = RenderSettings(noise_sigma = 0.0)
        small = imaging.render_instance(self.proto, 5, 32, quiet)
        large = imaging.render_instance(self.proto, 5, 128, quiet)
        resized = imaging.bilinear_resize(large, 32)
        self.assertLess(float(np.mean(np.abs(resized - small))), 0.1)

    def test_minimum_resolution(self):
        """ Tests that renders below 16 pixels are refused """
        self.assertRaises(ResolutionError, imaging.render_instance, self.proto, 1, 15)
        self.assertEqual(imaging.render_instance(self.proto, 1, 16).shape, (3, 16, 16))

class PreprocessCase(unittest.TestCase):
    """ TestCase for resizing, cropping and the train/test preprocessing """

    def test_resize_side(self):
        """ Tests A = round(B / 0.9201) for the reference resolutions """
        cfg = PreprocessConfig()
        for side, expected in [(448, 487), (640, 696), (224, 243), (184, 200), (128, 139), (64, 70)]:
            self.assertEqual(cfg.resize_side(side), expected)

    def test_center_crop_offset(self):
        """ Tests that a 448 crop of a 487 image starts at 19 """
        img = np.arange(487 * 487, dtype = np.float32).reshape(1, 487, 487).repeat(3, axis = 0)
        crop = imaging.center_crop(img, 448)
        self.assertEqual(crop.shape, (3, 448, 448))
        self.assertEqual(crop[0, 0, 0], img[0, 19, 19])
        self.assertRaises(CropError, imaging.center_crop, img, 488)

    def test_resize_constant(self):
        """ Tests that a constant image stays constant """
        img = np.full((3, 40, 40), 0.25, dtype = np.float32)
        for side in (17, 40, 80):
            np.testing.assert_allclose(imaging.bilinear_resize(img, side), 0.25, atol = 1e-6)

    @settings(max_examples = 25, deadline = None)
    @given(st.integers(min_value = 0, max_value = 2**31), st.integers(min_value = 16, max_value = 64), st.integers(min_value = 4, max_value = 96))
    def test_resize_convex(self, seed, source, side):
        """ Tests that every resized pixel lies within the range of its source """
        img = SeededRng(seed).uniform(size = (3, source, source)).astype(np.float32)
        resized = imaging.bilinear_resize(img, side)
        self.assertEqual(resized.shape, (3, side, side))
        self.assertGreaterEqual(resized.min(), img.min() - 1e-5)
        self.assertLessEqual(resized.max(), img.max() + 1e-5)

    def test_test_preprocess(self):
        """ Tests shape, determinism and mean subtraction of test preprocessing """
        img = imaging.render_instance(imaging.make_proto(1, 0), 9, 64)
        cfg = PreprocessConfig(mean = (0.5, 0.5, 0.5))
        out = imaging.test_preprocess(img, 64, cfg)
        self.assertEqual(out.shape, (3, 64, 64))
        self.assertEqual(out.tobytes(), imaging.test_preprocess(img, 64, cfg).tobytes())
        plain = imaging.test_preprocess(img, 64, PreprocessConfig())
        np.testing.assert_allclose(out, plain - 0.5, atol = 1e-6)
        self.assertRaises(ResolutionError, imaging.test_preprocess, img, 15, cfg)

    def test_train_augment(self):
        """ Tests that augmentation crops a window of the source, possibly flipped, driven by the rng """
        source = SeededRng(3).uniform(size = (3, 20, 20)).astype(np.float32)
        cfg = PreprocessConfig()
        out = imaging.train_augment(source, 16, SeededRng(1, "aug"), cfg)
        self.assertEqual(out.shape, (3, 16, 16))
        np.testing.assert_array_equal(out, imaging.train_augment(source, 16, SeededRng(1, "aug"), cfg))

        windows = [source[:, top:top + 16, left:left + 16] for top in range(5) for left in range(5)]
        windows += [window[:, :, ::-1] for window in windows]
        self.assertTrue(any(np.array_equal(out, window) for window in windows))
        self.assertRaises(AugmentationError, imaging.train_augment, source, 21, SeededRng(1), cfg)

    def test_channel_mean(self):
        """ Tests that the channel mean lies in [0, 1] and is reproducible """
        manifest, protos = imaging.synth_dataset(2, 2, 2, 1, 1)
        mean = imaging.compute_channel_mean(manifest, protos, 16)
        self.assertEqual(len(mean), 3)
        self.assertTrue(all(0 <= value <= 1 for value in mean))
        self.assertEqual(mean, imaging.compute_channel_mean(manifest, protos, 16))

if __name__ == "__main__":
    unittest.main()
