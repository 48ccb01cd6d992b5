"""Scan images, class registries, dataset manifests and deterministic splits."""
from __future__ import annotations

import enum
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (DataError, EmptyClass, HoldoutTooLarge, InvalidLabelForSurface, ManifestError,
                     NonFiniteInput, TooSmall, UnsupportedSize)

MIN_SIDE = 8
RESIZE_SIDES = (32, 64, 128, 256)
TEST_FRACTION = 0.2
IMAGE_MAGIC = b"SPMF"


class Surface(str, enum.Enum):
    SiH100 = "SiH100"
    Au111 = "Au111"
    Cu111 = "Cu111"
    Synthetic = "Synthetic"


class Desirability(str, enum.Enum):
    Desirable = "Desirable"
    Undesirable = "Undesirable"


@dataclass(frozen=True)
class ClassLabel:
    name: str
    desirability: Desirability

    def __str__(self):
        return self.name


def _labels(*pairs):
    return tuple(ClassLabel(n, Desirability(d)) for n, d in pairs)


# Asymmetry and dimer states are merged into one class: they blend too much
# to label unambiguously.
SI_FOUR = _labels(("AsymmetryDimer", "Desirable"), ("Atoms", "Desirable"),
                  ("Rows", "Desirable"), ("GenericDefect", "Undesirable"))
SI_TIPCHANGE = _labels(("TipChange", "Undesirable"), ("NoTipChange", "Desirable"))
METAL_SIX = _labels(("Atoms", "Desirable"), ("DoubleTip", "Undesirable"),
                    ("TipChange", "Undesirable"), ("StepEdge", "Undesirable"),
                    ("Impurity", "Undesirable"), ("Corruption", "Undesirable"))

CLASS_SETS: dict[str, tuple[ClassLabel, ...]] = {
    "si4": SI_FOUR,
    "si-tipchange": SI_TIPCHANGE,
    "metal6": METAL_SIX,
}

SURFACE_CLASS_SETS = {
    Surface.SiH100: ("si4", "si-tipchange"),
    Surface.Au111: ("metal6",),
    Surface.Cu111: ("metal6",),
    Surface.Synthetic: ("si4", "si-tipchange", "metal6"),
}


def class_names(class_set: str) -> tuple[str, ...]:
    return tuple(c.name for c in CLASS_SETS[class_set])


def lookup_label(surface: Surface | str, name: str) -> ClassLabel:
    """Resolve a label name against the class sets registered for ``surface``."""
    surface = Surface(surface)
    for key in SURFACE_CLASS_SETS[surface]:
        for label in CLASS_SETS[key]:
            if label.name == name:
                return label
    raise InvalidLabelForSurface(f"label {name!r} not registered for surface {surface.value}")


# -- images ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScanImage:
    """A normalised height map; values are read-only and lie in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DataError(f"image must be 2-D, got shape {v.shape}")
        if v.shape[0] < MIN_SIDE or v.shape[1] < MIN_SIDE:
            raise TooSmall(f"image {v.shape} smaller than {MIN_SIDE}x{MIN_SIDE}")
        if not np.isfinite(v).all():
            raise NonFiniteInput("image contains non-finite values")
        if v.size and np.abs(v).max() > 1.0:
            raise DataError("normalised image values must lie in [-1, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        return isinstance(other, ScanImage) and np.array_equal(self.values, other.values)

    __hash__ = None


def standardize(raw) -> tuple[np.ndarray, float, float]:
    """Centre and scale so that three standard deviations map to 1 (no clamp).

    Returns ``(z, mean, sigma)``.  Zero-contrast input gives all-zeros.
    """
    a = np.asarray(raw, dtype=np.float64)
    if a.ndim != 2:
        raise DataError(f"expected a 2-D matrix, got shape {a.shape}")
    if a.shape[0] < MIN_SIDE or a.shape[1] < MIN_SIDE:
        raise TooSmall(f"image {a.shape} smaller than {MIN_SIDE}x{MIN_SIDE}")
    if not np.isfinite(a).all():
        raise NonFiniteInput("raw image contains NaN or infinity")
    mean = float(a.mean())
    centred = a - mean
    centred -= centred.mean()
    sigma = float(centred.std())
    if sigma <= 1e-12 * max(1.0, abs(mean)):
        return np.zeros_like(a), mean, 0.0
    return centred / (3.0 * sigma), mean, sigma


def normalize(raw) -> ScanImage:
    """Per-image mean subtraction, division by 3 sigma, clamp to [-1, 1]."""
    z, _, _ = standardize(raw)
    return ScanImage(np.clip(z, -1.0, 1.0))


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights using pixel-centre alignment."""
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resample(values, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resampling of a 2-D array to (out_h, out_w)."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape == (out_h, out_w):
        return v.copy()
    return bilinear_matrix(v.shape[0], out_h) @ v @ bilinear_matrix(v.shape[1], out_w).T


def resize(img: ScanImage, side: int) -> ScanImage:
    if side not in RESIZE_SIDES:
        raise UnsupportedSize(f"side {side} not in {RESIZE_SIDES}")
    out = resample(img.values, side, side)
    return ScanImage(np.clip(out, -1.0, 1.0))


# -- samples, splits, statistics -------------------------------------------------

@dataclass(frozen=True, eq=False)
class LabeledSample:
    image: ScanImage
    surface: Surface
    label: ClassLabel
    source_id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "surface", Surface(self.surface))
        if isinstance(self.label, str):
            object.__setattr__(self, "label", lookup_label(self.surface, self.label))
        else:
            lookup_label(self.surface, self.label.name)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[LabeledSample, ...]
    test: tuple[LabeledSample, ...]
    holdout: tuple[LabeledSample, ...]
    seed: int

    def ids(self, part: str) -> set[str]:
        return {s.source_id for s in getattr(self, part)}


def _check_unique(samples):
    counts = Counter(s.source_id for s in samples)
    dup = [k for k, n in counts.items() if n > 1]
    if dup:
        raise DataError(f"duplicate source_id(s): {dup[:5]}")


def split_test_size(remaining: int) -> int:
    """Number of test samples for ``remaining`` non-holdout samples (round half up)."""
    return int(math.floor(TEST_FRACTION * remaining + 0.5))


def split_dataset(samples: Sequence[LabeledSample], holdout_count: int, seed: int) -> DatasetSplit:
    """Seeded holdout draw, then an 80/20 train/test split of the rest."""
    samples = list(samples)
    if not 0 <= holdout_count < len(samples):
        raise HoldoutTooLarge(f"holdout {holdout_count} must be < {len(samples)} samples")
    _check_unique(samples)
    order = np.random.default_rng(seed).permutation(len(samples))
    holdout = [samples[i] for i in order[:holdout_count]]
    rest = [samples[i] for i in order[holdout_count:]]
    n_test = split_test_size(len(rest))
    return DatasetSplit(train=tuple(rest[n_test:]), test=tuple(rest[:n_test]),
                        holdout=tuple(holdout), seed=seed)


@dataclass(frozen=True)
class ClassStats:
    """Class counts with exact rational frequencies and reciprocal weights."""

    counts: dict[str, int]
    frequencies: dict[str, Fraction]
    weights: dict[str, Fraction]

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self.counts)

    def weight_vector(self, classes: Sequence[str]) -> tuple[float, ...]:
        """Weights as floats, ordered like ``classes``."""
        return tuple(float(self.weights[c]) for c in classes)


def class_stats(samples: Iterable[LabeledSample], classes: Sequence[str] | None = None) -> ClassStats:
    """Class frequencies and reciprocal-frequency weights.

    ``classes`` is the registered class list; every entry must occur at least
    once.  When omitted, the classes observed in ``samples`` are used.
    """
    names = [s.label.name if isinstance(s, LabeledSample) else str(s) for s in samples]
    return stats_from_counts(Counter(names), classes)


def stats_from_counts(counts: dict[str, int], classes: Sequence[str] | None = None) -> ClassStats:
    classes = list(classes) if classes is not None else sorted(counts)
    missing = [c for c in classes if counts.get(c, 0) == 0]
    if missing:
        raise EmptyClass(f"class(es) with zero samples: {missing}")
    extra = set(counts) - set(classes)
    if extra:
        raise DataError(f"labels outside the class set: {sorted(extra)}")
    total = sum(counts[c] for c in classes)
    freq = {c: Fraction(int(counts[c]), int(total)) for c in classes}
    return ClassStats(counts={c: int(counts[c]) for c in classes}, frequencies=freq,
                      weights={c: 1 / freq[c] for c in classes})


# -- file formats ----------------------------------------------------------------

def write_image(path, img: ScanImage | np.ndarray) -> Path:
    """Store as ``SPMF`` + u32 height + u32 width + float32 row-major values."""
    v = img.values if isinstance(img, ScanImage) else np.asarray(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<II", v.shape[0], v.shape[1]))
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return path


def read_image(path) -> ScanImage:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != IMAGE_MAGIC:
        raise DataError(f"{path}: not an SPMF image")
    h, w = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * h * w:
        raise DataError(f"{path}: expected {h}x{w} float32 payload")
    return ScanImage(np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w))


@dataclass(frozen=True)
class ManifestRecord:
    source_id: str
    path: str
    surface: Surface
    label: str


def write_manifest(path, records: Iterable[ManifestRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        fields = (r.source_id, r.path, Surface(r.surface).value, r.label)
        if any("\t" in f or "\n" in f for f in fields):
            raise ManifestError(f"record {r.source_id!r} contains tab or newline")
        lines.append("\t".join(fields))
    path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return path


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{n}: expected 4 tab-separated fields")
        try:
            surface = Surface(parts[2])
        except ValueError:
            raise ManifestError(f"{path}:{n}: unknown surface {parts[2]!r}") from None
        records.append(ManifestRecord(parts[0], parts[1], surface, parts[3]))
    return records


def load_dataset(manifest_path) -> list[LabeledSample]:
    """Read a manifest and every image it references (paths relative to it)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    samples = [LabeledSample(read_image(root / r.path), r.surface, r.label, r.source_id)
               for r in read_manifest(manifest_path)]
    _check_unique(samples)
    return samples


def save_dataset(samples: Sequence[LabeledSample], out_dir, manifest_name="manifest.tsv",
                 image_dir="images") -> Path:
    out_dir = Path(out_dir)
    _check_unique(samples)
    records = []
    for s in samples:
        rel = f"{image_dir}/{s.source_id}.spmf"
        write_image(out_dir / rel, s.image)
        records.append(ManifestRecord(s.source_id, rel, s.surface, s.label.name))
    return write_manifest(out_dir / manifest_name, records)


def stack_images(samples: Sequence[LabeledSample], dtype=np.float64) -> np.ndarray:
    return np.stack([s.image.values for s in samples]).astype(dtype, copy=False)


def label_indices(samples: Sequence[LabeledSample], classes: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[s.label.name] for s in samples], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} not in class list {list(classes)}") from None
