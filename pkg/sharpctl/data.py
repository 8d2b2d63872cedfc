"""
Dataset ingestion (CSV, IDX, synthetic), train/test splitting and the
label/input noise protocols.
"""

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch

from sharpctl.autodiff import Batch
from sharpctl.config import Config
from sharpctl.errors import ConfigError, DatasetParseError
from sharpctl.utils import get_logger, np_substream

logger = get_logger(__name__)

SOURCES = ("csv", "idx", "synthetic")
SYNTHETIC_KINDS = ("blobs", "moons", "spirals")
SPLITS = ("train", "test")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# keys of the numpy sub-streams used below
_GENERATE_KEY, _SPLIT_KEY, _LABEL_NOISE_KEY, _DATA_NOISE_KEY = 10, 11, 20, 21


@dataclass(frozen=True)
class Provenance:
    source: str
    label_noise_alpha: float = 0.0
    data_noise_sigma: float = 0.0
    seed: int = 0

    def describe(self) -> str:
        return (
            f"{self.source}:label_noise={self.label_noise_alpha}:"
            f"data_noise={self.data_noise_sigma}:seed={self.seed}"
        )


@dataclass(frozen=True)
class Dataset:
    """Inputs (n x d) and integer labels in [0, num_classes)."""

    inputs: np.ndarray
    labels: np.ndarray
    split: str
    provenance: Provenance
    num_classes: int

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        if inputs.shape[0] != labels.shape[0]:
            raise ConfigError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def dataset_id(self) -> str:
        return f"{self.split}:{self.provenance.describe()}"

    def as_batch(self) -> Batch:
        return Batch(torch.from_numpy(self.inputs), torch.from_numpy(self.labels))

    def subset(self, index: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return replace(self, inputs=self.inputs[index], labels=self.labels[index], split=split or self.split)


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"
    kind: str = "blobs"
    n: int = 2000
    d: int = 2
    classes: int = 2
    path: str = ""
    test_path: str = ""
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ConfigError(f"dataset.source must be one of {SOURCES}, got {self.source!r}")
        if self.classes < 1:
            raise ConfigError(f"dataset.classes must be >= 1, got {self.classes}")

    @classmethod
    def from_config(cls, config: Config) -> "DatasetSpec":
        return cls(
            source=config.get("dataset.source"),
            kind=config.get("dataset.kind"),
            n=config.get_int("dataset.n"),
            d=config.get_int("dataset.d"),
            classes=config.get_int("dataset.classes"),
            path=config.get("dataset.path") or "",
            test_path=config.get("dataset.test_path") or "",
            images=config.get("dataset.images") or "",
            labels=config.get("dataset.labels") or "",
            test_images=config.get("dataset.test_images") or "",
            test_labels=config.get("dataset.test_labels") or "",
            test_fraction=config.get_float("dataset.test_fraction"),
            seed=config.get_int("dataset.seed"),
        )

    @property
    def has_test_files(self) -> bool:
        return bool(self.test_path or (self.test_images and self.test_labels))


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def read_csv(path: Union[str, Path], classes: int, split: str = "train") -> Dataset:
    """
    One example per row: features then an integer label. A first row that
    does not parse as numbers is taken as a header.

    Raises:
        DatasetParseError: On ragged rows, non-numeric cells or labels
            outside [0, classes), naming the 1-based line.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, header=None, dtype=str, skip_blank_lines=True, keep_default_na=False)
    except FileNotFoundError:
        raise DatasetParseError(f"dataset file {path} not found")
    except pd.errors.EmptyDataError:
        raise DatasetParseError(f"dataset file {path} is empty")
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DatasetParseError(f"ragged row in {path}", offset=int(match.group(1)) if match else None)

    first_line = 1
    if frame.shape[0] and not all(_is_number(cell) for cell in frame.iloc[0] if cell != ""):
        frame = frame.iloc[1:]
        first_line = 2
    if frame.shape[0] == 0:
        raise DatasetParseError(f"dataset file {path} has no examples")
    if frame.shape[1] < 2:
        raise DatasetParseError(f"{path} needs at least one feature column and a label column")

    empty = (frame.isna() | (frame == "")).to_numpy()
    if empty.any():
        row = int(np.argmax(empty.any(axis=1)))
        raise DatasetParseError(f"ragged row in {path}", offset=first_line + row)
    try:
        values = frame.astype(np.float64).to_numpy()
    except ValueError:
        bad = next(i for i, row in enumerate(frame.itertuples(index=False)) if not all(map(_is_number, row)))
        raise DatasetParseError(f"non-numeric value in {path}", offset=first_line + bad)

    labels = values[:, -1]
    invalid = (labels != np.round(labels)) | (labels < 0) | (labels >= classes)
    if invalid.any():
        raise DatasetParseError(
            f"label outside [0, {classes}) in {path}", offset=first_line + int(np.argmax(invalid))
        )
    return Dataset(values[:, :-1], labels.astype(np.int64), split, Provenance("csv"), classes)


def save_csv(ds: Dataset, path: Union[str, Path]) -> Path:
    """Write features then label per row, no header, at full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(ds.inputs)
    frame[ds.input_dim] = ds.labels
    frame.to_csv(path, header=False, index=False, float_format="%.17g")
    return path


def _read_idx_header(raw: bytes, path: Path, magic: int, ndim: int) -> Tuple[int, ...]:
    header_size = 4 + 4 * ndim
    if len(raw) < header_size:
        raise DatasetParseError(f"{path} is shorter than an IDX header", offset=len(raw), unit="byte")
    found = int(np.frombuffer(raw, dtype=">i4", count=1)[0])
    if found != magic:
        raise DatasetParseError(
            f"bad IDX magic {found:#010x} in {path}, expected {magic:#010x}", offset=0, unit="byte"
        )
    dims = tuple(int(v) for v in np.frombuffer(raw, dtype=">i4", count=ndim, offset=4))
    expected = header_size + int(np.prod(dims))
    if len(raw) != expected:
        raise DatasetParseError(
            f"{path} holds {len(raw)} bytes, header announces {expected}",
            offset=min(len(raw), expected),
            unit="byte",
        )
    return dims


def read_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    classes: int,
    split: str = "train",
) -> Dataset:
    """
    IDX image/label pair; images are flattened and scaled to [0, 1].

    Raises:
        DatasetParseError: On wrong magic numbers, truncated files, count
            mismatch or labels out of range, naming the byte offset.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    try:
        image_bytes = images_path.read_bytes()
        label_bytes = labels_path.read_bytes()
    except OSError as e:
        raise DatasetParseError(f"cannot read IDX files: {e}")
    n, rows, cols = _read_idx_header(image_bytes, images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,) = _read_idx_header(label_bytes, labels_path, IDX_LABELS_MAGIC, 1)
    if n != n_labels:
        raise DatasetParseError(f"{n} images but {n_labels} labels", offset=4, unit="byte")
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    invalid = labels >= classes
    if invalid.any():
        raise DatasetParseError(
            f"label outside [0, {classes}) in {labels_path}", offset=8 + int(np.argmax(invalid)), unit="byte"
        )
    return Dataset(pixels.astype(np.float64) / 255.0, labels, split, Provenance("idx"), classes)


def _class_counts(n: int, classes: int) -> np.ndarray:
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    return counts


def make_synthetic(kind: str, n: int, d: int, classes: int, seed: int) -> Dataset:
    """
    Deterministic toy classification data.

    - ``blobs``: unit Gaussians around centers spaced on a circle of radius 4.
    - ``moons``: two interleaving half circles (classes must be 2).
    - ``spirals``: ``classes`` interleaved spiral arms.

    Features past the second are zero-mean noise-free padding for d > 2.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"dataset.kind must be one of {SYNTHETIC_KINDS}, got {kind!r}")
    if n < classes:
        raise ConfigError(f"need at least one example per class, got n={n}")
    if kind != "blobs" and d < 2:
        raise ConfigError(f"{kind} needs d >= 2")
    if kind == "moons" and classes != 2:
        raise ConfigError("moons has exactly two classes")
    rng = np_substream(seed, _GENERATE_KEY)
    counts = _class_counts(n, classes)
    labels = np.repeat(np.arange(classes), counts)
    inputs = np.zeros((n, d))

    if kind == "blobs":
        centers = np.zeros((classes, d))
        angles = 2.0 * np.pi * np.arange(classes) / classes
        if d == 1:
            centers[:, 0] = 4.0 * np.arange(classes)
        else:
            centers[:, 0], centers[:, 1] = 4.0 * np.cos(angles), 4.0 * np.sin(angles)
        inputs = centers[labels] + rng.standard_normal((n, d))
    elif kind == "moons":
        t = rng.uniform(0.0, np.pi, n)
        outer = labels == 0
        inputs[:, 0] = np.where(outer, np.cos(t), 1.0 - np.cos(t))
        inputs[:, 1] = np.where(outer, np.sin(t), 0.5 - np.sin(t))
        inputs[:, :2] += 0.1 * rng.standard_normal((n, 2))
    else:
        t = rng.uniform(0.05, 1.0, n)
        angle = 4.0 * np.pi * t + 2.0 * np.pi * labels / classes
        inputs[:, 0] = t * np.cos(angle)
        inputs[:, 1] = t * np.sin(angle)
        inputs[:, :2] += 0.02 * rng.standard_normal((n, 2))

    order = rng.permutation(n)
    return Dataset(inputs[order], labels[order], "train", Provenance(f"synthetic-{kind}", seed=seed), classes)


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Primary data described by ``spec``, before any train/test split."""
    if spec.source == "csv":
        if not spec.path:
            raise ConfigError("dataset.path is required for csv data")
        return read_csv(spec.path, spec.classes)
    if spec.source == "idx":
        if not (spec.images and spec.labels):
            raise ConfigError("dataset.images and dataset.labels are required for idx data")
        return read_idx(spec.images, spec.labels, spec.classes)
    return make_synthetic(spec.kind, spec.n, spec.d, spec.classes, spec.seed)


def load_splits(spec: DatasetSpec) -> Tuple[Dataset, Dataset]:
    """
    (train, test). Explicit test files win; otherwise the primary data is
    split by ``test_fraction`` with a permutation keyed by the dataset seed.
    """
    data = load_dataset(spec)
    if spec.has_test_files:
        if spec.source == "csv":
            test = read_csv(spec.test_path, spec.classes, split="test")
        else:
            test = read_idx(spec.test_images, spec.test_labels, spec.classes, split="test")
        if test.input_dim != data.input_dim:
            raise DatasetParseError(f"test inputs have width {test.input_dim}, train inputs {data.input_dim}")
        return data, test
    if not 0.0 < spec.test_fraction < 1.0:
        raise ConfigError(f"dataset.test_fraction must lie in (0, 1), got {spec.test_fraction}")
    order = np_substream(spec.seed, _SPLIT_KEY).permutation(data.size)
    n_test = int(round(spec.test_fraction * data.size))
    if n_test < 1 or n_test >= data.size:
        raise ConfigError(f"test_fraction {spec.test_fraction} leaves an empty split of {data.size} examples")
    return data.subset(order[n_test:], "train"), data.subset(order[:n_test], "test")


def inject_label_noise(ds: Dataset, alpha: float, seed: int) -> Dataset:
    """
    Flip each label with probability alpha to a class drawn uniformly from
    the other classes. The flip mask depends only on (seed, n).

    Raises:
        ConfigError: If alpha is outside [0, 1] or there is only one class.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"label noise must lie in [0, 1], got {alpha}")
    if ds.num_classes < 2:
        raise ConfigError("cannot flip labels of a single-class dataset")
    rng = np_substream(seed, _LABEL_NOISE_KEY)
    flip = rng.random(ds.size) < alpha
    shift = rng.integers(1, ds.num_classes, ds.size)
    labels = np.where(flip, (ds.labels + shift) % ds.num_classes, ds.labels)
    logger.debug(f"Label noise {alpha}: flipped {int(flip.sum())} of {ds.size} labels.")
    return replace(ds, labels=labels, provenance=replace(ds.provenance, label_noise_alpha=alpha, seed=seed))


def inject_data_noise(ds: Dataset, sigma: float, seed: int) -> Dataset:
    """Add N(0, sigma^2) to every input coordinate; labels are untouched."""
    if sigma < 0:
        raise ConfigError(f"data noise must be >= 0, got {sigma}")
    if sigma == 0:
        return replace(ds, provenance=replace(ds.provenance, data_noise_sigma=0.0, seed=seed))
    noise = np_substream(seed, _DATA_NOISE_KEY).normal(0.0, sigma, ds.inputs.shape)
    return replace(
        ds, inputs=ds.inputs + noise, provenance=replace(ds.provenance, data_noise_sigma=sigma, seed=seed)
    )
