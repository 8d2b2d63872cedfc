"""
Dataset ingestion and noise protocol tests - Run with pytest
"""

import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from sharpctl.data import (
    Dataset,
    DatasetSpec,
    Provenance,
    inject_data_noise,
    inject_label_noise,
    load_dataset,
    load_splits,
    make_synthetic,
    read_csv,
    read_idx,
    save_csv,
)
from sharpctl.errors import ConfigError, DatasetParseError
from sharpctl.utils import np_substream


def idx_files(tmp, n=3, rows=2, cols=2, labels=None, image_magic=0x803):
    images = Path(tmp) / "images.idx"
    label_file = Path(tmp) / "labels.idx"
    pixels = np.arange(n * rows * cols, dtype=np.uint8)
    images.write_bytes(np.array([image_magic, n, rows, cols], dtype=">i4").tobytes() + pixels.tobytes())
    labels = np.arange(n) % 2 if labels is None else np.asarray(labels)
    label_file.write_bytes(np.array([0x801, n], dtype=">i4").tobytes() + labels.astype(np.uint8).tobytes())
    return images, label_file


class TestCsv(unittest.TestCase):
    """Test CSV reading and writing."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        path = self.dir / "data.csv"
        path.write_text(text, encoding="utf-8")
        return path

    def test_read_with_header(self):
        """A non-numeric first row is a header."""
        ds = read_csv(self.write("x1,x2,label\n0.5,1.5,1\n-1,2,0\n"), classes=2)
        self.assertEqual(ds.size, 2)
        self.assertEqual(ds.input_dim, 2)
        self.assertEqual(list(ds.labels), [1, 0])
        self.assertEqual(ds.inputs[0, 1], 1.5)

    def test_round_trip(self):
        """save_csv then read_csv restores inputs to full precision."""
        ds = make_synthetic("blobs", 50, 3, 3, seed=2)
        loaded = read_csv(save_csv(ds, self.dir / "blobs.csv"), classes=3)
        np.testing.assert_allclose(loaded.inputs, ds.inputs, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(loaded.labels, ds.labels)

    def test_short_row(self):
        """A row with a missing cell names its line."""
        with self.assertRaises(DatasetParseError) as ctx:
            read_csv(self.write("1,2,0\n3,4\n"), classes=2)
        self.assertEqual(ctx.exception.offset, 2)

    def test_non_numeric_cell(self):
        """Non-numeric cells name their line."""
        with self.assertRaises(DatasetParseError) as ctx:
            read_csv(self.write("1,2,0\n1,a,1\n"), classes=2)
        self.assertEqual(ctx.exception.offset, 2)

    def test_label_out_of_range(self):
        """Labels must lie in [0, classes)."""
        with self.assertRaises(DatasetParseError) as ctx:
            read_csv(self.write("1,2,0\n3,4,5\n"), classes=2)
        self.assertEqual(ctx.exception.offset, 2)

    def test_missing_file(self):
        """A missing file is a parse error."""
        with self.assertRaises(DatasetParseError):
            read_csv(self.dir / "absent.csv", classes=2)


class TestIdx(unittest.TestCase):
    """Test IDX reading."""

    def test_read(self):
        """Images are flattened and scaled to [0, 1]."""
        with tempfile.TemporaryDirectory() as tmp:
            ds = read_idx(*idx_files(tmp), classes=2)
        self.assertEqual(ds.inputs.shape, (3, 4))
        self.assertAlmostEqual(ds.inputs[1, 0], 4 / 255.0)
        self.assertEqual(list(ds.labels), [0, 1, 0])

    def test_bad_magic(self):
        """A wrong magic number is reported at byte 0."""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DatasetParseError) as ctx:
                read_idx(*idx_files(tmp, image_magic=0x801), classes=2)
        self.assertEqual((ctx.exception.offset, ctx.exception.unit), (0, "byte"))

    def test_truncated(self):
        """A file shorter than its header announces is rejected."""
        with tempfile.TemporaryDirectory() as tmp:
            images, labels = idx_files(tmp)
            images.write_bytes(images.read_bytes()[:-1])
            with self.assertRaises(DatasetParseError):
                read_idx(images, labels, classes=2)

    def test_label_out_of_range(self):
        """Label bytes are checked against the class count."""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DatasetParseError) as ctx:
                read_idx(*idx_files(tmp, labels=[0, 7, 1]), classes=2)
        self.assertEqual(ctx.exception.offset, 9)


class TestSynthetic(unittest.TestCase):
    """Test the toy generators and splitting."""

    def test_deterministic_and_balanced(self):
        """Same seed, same data; classes differ in size by at most one."""
        for kind, classes in (("blobs", 3), ("moons", 2), ("spirals", 3)):
            a = make_synthetic(kind, 100, 2, classes, seed=1)
            b = make_synthetic(kind, 100, 2, classes, seed=1)
            np.testing.assert_array_equal(a.inputs, b.inputs)
            counts = np.bincount(a.labels, minlength=classes)
            self.assertLessEqual(counts.max() - counts.min(), 1)

    def test_moons_needs_two_classes(self):
        """moons is a two-class problem."""
        with self.assertRaises(ConfigError):
            make_synthetic("moons", 100, 2, 3, seed=0)

    def test_split_sizes(self):
        """test_fraction of the examples go to the test split."""
        train, test = load_splits(DatasetSpec(n=200, test_fraction=0.25))
        self.assertEqual((train.size, test.size), (150, 50))
        self.assertEqual((train.split, test.split), ("train", "test"))

    def test_bad_fraction(self):
        """test_fraction must lie strictly between 0 and 1."""
        with self.assertRaises(ConfigError):
            load_splits(DatasetSpec(n=200, test_fraction=1.0))


class TestLoadDataset(unittest.TestCase):
    """Test source dispatch."""

    def test_csv_needs_path(self):
        """A csv source without a path is a config error."""
        with self.assertRaises(ConfigError):
            load_dataset(DatasetSpec(source="csv"))

    def test_idx_source(self):
        """The idx source reads the image and label files."""
        with tempfile.TemporaryDirectory() as tmp:
            images, labels = idx_files(tmp, n=4)
            ds = load_dataset(DatasetSpec(source="idx", images=str(images), labels=str(labels)))
        self.assertEqual(ds.size, 4)
        self.assertEqual(ds.input_dim, 4)

    def test_explicit_test_file(self):
        """A csv test file replaces the random split."""
        with tempfile.TemporaryDirectory() as tmp:
            train_path = Path(tmp) / "train.csv"
            test_path = Path(tmp) / "test.csv"
            train_path.write_text("0,0,0\n1,1,1\n2,2,0\n", encoding="utf-8")
            test_path.write_text("5,5,1\n", encoding="utf-8")
            spec = DatasetSpec(source="csv", path=str(train_path), test_path=str(test_path))
            train, test = load_splits(spec)
        self.assertEqual((train.size, test.size), (3, 1))
        self.assertEqual(test.split, "test")


class TestNoise(unittest.TestCase):
    """Test label and input noise."""

    def dataset(self, n=10000, classes=10):
        labels = np.arange(n) % classes
        inputs = np_substream(5, 0).standard_normal((n, 2))
        return Dataset(inputs, labels, "train", Provenance("test"), classes)

    def test_no_label_noise(self):
        """alpha = 0 keeps every label."""
        ds = self.dataset()
        np.testing.assert_array_equal(inject_label_noise(ds, 0.0, 1).labels, ds.labels)

    def test_full_label_noise(self):
        """alpha = 1 changes every label."""
        ds = self.dataset()
        self.assertTrue(np.all(inject_label_noise(ds, 1.0, 1).labels != ds.labels))

    def test_label_noise_fraction(self):
        """About alpha of the labels change, and the provenance records it."""
        ds = self.dataset()
        noisy = inject_label_noise(ds, 0.3, 1)
        fraction = float(np.mean(noisy.labels != ds.labels))
        self.assertTrue(0.28 <= fraction <= 0.32, fraction)
        self.assertEqual(noisy.provenance.label_noise_alpha, 0.3)

    def test_flip_mask_depends_on_seed_and_size(self):
        """Two datasets of equal size flip the same positions."""
        a, b = self.dataset(), self.dataset()
        b = Dataset(b.inputs, (b.labels + 1) % 10, "train", b.provenance, 10)
        flipped_a = inject_label_noise(a, 0.3, 4).labels != a.labels
        flipped_b = inject_label_noise(b, 0.3, 4).labels != b.labels
        np.testing.assert_array_equal(flipped_a, flipped_b)

    def test_invalid_alpha(self):
        """alpha outside [0, 1] is rejected."""
        with self.assertRaises(ConfigError):
            inject_label_noise(self.dataset(), 1.5, 0)

    def test_data_noise_std(self):
        """The added noise has standard deviation sigma; labels are untouched."""
        ds = self.dataset()
        noisy = inject_data_noise(ds, 0.5, 2)
        self.assertAlmostEqual(float(np.std(noisy.inputs - ds.inputs)) / 0.5, 1.0, delta=0.02)
        np.testing.assert_array_equal(noisy.labels, ds.labels)


if __name__ == "__main__":
    unittest.main()
