"""Cube/label/feature-matrix I/O, stratified splits, synthetic scenes and accuracy metrics.

File formats (all little-endian):

* cube:   ``b"HCUB"``, version ``u16`` (=1), ``H, W, B`` as ``u32``, then
  ``B*H*W`` float32 values band-sequential (band, row, column).
* labels: ``b"HLBL"``, ``H, W`` as ``u32``, then ``H*W`` ``u16`` class ids
  row-major; 0 means unlabeled, 1..C are classes.
* features: ``b"FMAT"``, ``rows, cols`` as ``u32``, then float64 row-major.

Inside the package class ids are 0-based (label ``k`` in a file is class
``k - 1``) and pixels are addressed by their row-major flat index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

CUBE_MAGIC = b"HCUB"
CUBE_VERSION = 1
LABEL_MAGIC = b"HLBL"
FEATURE_MAGIC = b"FMAT"

SOURCE = 0
TARGET = 1


class DataFormatError(ValueError):
    """Malformed or truncated data file."""


class SplitError(ValueError):
    pass


# -- cubes ----------------------------------------------------------------


@dataclass
class HyperCube:
    """Per-band min-max scaled cube ``data[row, col, band]`` in [0, 1].

    ``band_min``/``band_max`` are the raw extremes, so :meth:`raw` recovers
    the stored float32 values.
    """

    data: np.ndarray
    band_min: np.ndarray
    band_max: np.ndarray

    @classmethod
    def from_raw(cls, raw) -> "HyperCube":
        raw = np.asarray(raw, dtype=np.float32)
        if raw.ndim != 3:
            raise ValueError(f"cube must be H x W x B, got shape {raw.shape}")
        if not np.all(np.isfinite(raw)):
            raise DataFormatError("cube contains non-finite values")
        r64 = raw.astype(np.float64)
        lo = r64.min(axis=(0, 1))
        hi = r64.max(axis=(0, 1))
        span = np.where(hi > lo, hi - lo, 1.0)
        return cls((r64 - lo) / span, lo, hi)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def raw(self) -> np.ndarray:
        span = np.where(self.band_max > self.band_min, self.band_max - self.band_min, 1.0)
        return (self.data * span + self.band_min).astype(np.float32)

    def pixels(self) -> np.ndarray:
        """``(H*W) x B`` matrix of scaled spectra in row-major pixel order."""
        return self.data.reshape(-1, self.bands)

    def truncate_bands(self, bands: int) -> "HyperCube":
        return HyperCube(self.data[:, :, :bands].copy(), self.band_min[:bands].copy(), self.band_max[:bands].copy())


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataFormatError(
                f"{self.what} truncated at byte offset {self.pos}: need {n} bytes, {len(self.buf) - self.pos} left"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def magic(self, expected: bytes):
        got = self.take(len(expected))
        if got != expected:
            raise DataFormatError(f"{self.what}: bad magic {got!r} at byte offset 0, expected {expected!r}")

    def finish(self):
        if self.pos != len(self.buf):
            raise DataFormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes at byte offset {self.pos}")


def cube_to_bytes(raw) -> bytes:
    raw = np.asarray(raw, dtype=np.float32)
    h, w, b = raw.shape
    header = CUBE_MAGIC + struct.pack("<H3I", CUBE_VERSION, h, w, b)
    return header + np.ascontiguousarray(raw.transpose(2, 0, 1), dtype="<f4").tobytes()


def cube_from_bytes(buf: bytes) -> HyperCube:
    r = _Reader(buf, "cube file")
    r.magic(CUBE_MAGIC)
    (version,) = r.unpack("<H")
    if version != CUBE_VERSION:
        raise DataFormatError(f"cube file: unsupported version {version} at byte offset 4")
    h, w, b = r.unpack("<3I")
    body = r.take(4 * h * w * b)
    r.finish()
    raw = np.frombuffer(body, dtype="<f4").reshape(b, h, w).transpose(1, 2, 0)
    return HyperCube.from_raw(raw)


def save_cube(path, cube) -> None:
    """Write a cube; accepts a :class:`HyperCube` or a raw ``H x W x B`` array."""
    raw = cube.raw() if isinstance(cube, HyperCube) else cube
    Path(path).write_bytes(cube_to_bytes(raw))


def load_cube(path) -> HyperCube:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cube file not found: {path}")
    return cube_from_bytes(path.read_bytes())


def labels_to_bytes(labels) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label map must be 2-D")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("label ids must fit in u16")
    h, w = labels.shape
    return LABEL_MAGIC + struct.pack("<2I", h, w) + np.ascontiguousarray(labels, dtype="<u2").tobytes()


def labels_from_bytes(buf: bytes) -> np.ndarray:
    r = _Reader(buf, "label file")
    r.magic(LABEL_MAGIC)
    h, w = r.unpack("<2I")
    body = r.take(2 * h * w)
    r.finish()
    return np.frombuffer(body, dtype="<u2").reshape(h, w).astype(np.int64)


def save_labels(path, labels) -> None:
    Path(path).write_bytes(labels_to_bytes(labels))


def load_labels(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"label file not found: {path}")
    return labels_from_bytes(path.read_bytes())


def save_features(path, matrix) -> None:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<2I", *m.shape) + np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_features(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes(), "feature file")
    r.magic(FEATURE_MAGIC)
    rows, cols = r.unpack("<2I")
    body = r.take(8 * rows * cols)
    r.finish()
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


# -- sample sets and splits -----------------------------------------------


@dataclass
class SampleSet:
    """Parallel arrays: feature rows, 0-based labels (-1 = unknown), flat pixel ids, domain tags."""

    features: np.ndarray
    labels: np.ndarray
    pixels: np.ndarray
    domain: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            f = f.reshape(len(self.pixels), -1) if len(self.pixels) else f.reshape(0, 0)
        self.features = f
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.pixels = np.asarray(self.pixels, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype=np.int8)
        n = self.pixels.shape[0]
        if not (self.features.shape[0] == self.labels.shape[0] == self.domain.shape[0] == n):
            raise ValueError("sample set arrays must have equal length")

    @classmethod
    def empty(cls, dim: int) -> "SampleSet":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def keys(self) -> np.ndarray:
        """Unique sample keys combining domain and pixel id."""
        return self.domain.astype(np.int64) * (1 << 40) + self.pixels

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.features[idx], self.labels[idx], self.pixels[idx], self.domain[idx])

    def drop(self, idx) -> "SampleSet":
        keep = np.ones(len(self), dtype=bool)
        keep[np.asarray(idx, dtype=np.int64)] = False
        return self.subset(np.flatnonzero(keep))

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(
            np.concatenate([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.pixels, other.pixels]),
            np.concatenate([self.domain, other.domain]),
        )

    def count(self, domain: int) -> int:
        return int(np.sum(self.domain == domain))


@dataclass
class SplitSpec:
    """Per-class training size (``train_count`` or ``train_ratio``) and candidate share of the rest."""

    train_count: int | None = 50
    train_ratio: float | None = None
    candidate_ratio: float = 0.20

    def __post_init__(self):
        if (self.train_count is None) == (self.train_ratio is None):
            raise ValueError("set exactly one of train_count and train_ratio")
        if not 0.0 <= self.candidate_ratio <= 1.0:
            raise ValueError("candidate_ratio must lie in [0, 1]")

    def per_class_train(self, available: int) -> int:
        if self.train_count is not None:
            return int(self.train_count)
        return max(1, int(round(self.train_ratio * available)))


def split(features, labels, spec: SplitSpec, rng: np.random.Generator, domain: int = SOURCE):
    """Stratified train / candidate / test partition of the labeled pixels.

    Per class, the pixels are shuffled; the first ``r`` go to training,
    ``round(candidate_ratio * (n - r))`` of the rest to the candidate pool and
    the remainder to test.
    """
    labels = np.asarray(labels).reshape(-1)
    feats = features.pixels() if isinstance(features, HyperCube) else np.asarray(features, dtype=np.float64)
    if feats.shape[0] != labels.shape[0]:
        raise SplitError(f"{feats.shape[0]} feature rows but {labels.shape[0]} labeled positions")
    parts = ([], [], [])
    for cls in np.unique(labels[labels > 0]):
        pix = np.flatnonzero(labels == cls)
        r = spec.per_class_train(pix.size)
        if pix.size < r + 1:
            raise SplitError(f"class {cls} has {pix.size} labeled pixels, needs at least {r + 1}")
        pix = pix[rng.permutation(pix.size)]
        n_cand = int(round(spec.candidate_ratio * (pix.size - r)))
        parts[0].append(pix[:r])
        parts[1].append(pix[r : r + n_cand])
        parts[2].append(pix[r + n_cand :])

    def build(chunks) -> SampleSet:
        pix = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        return SampleSet(feats[pix], labels[pix] - 1, pix, np.full(pix.size, domain))

    return tuple(build(c) for c in parts)


def samples_from_mask(features, labels, domain: int = SOURCE) -> SampleSet:
    """All labeled pixels of a label map as a sample set."""
    labels = np.asarray(labels).reshape(-1)
    pix = np.flatnonzero(labels > 0)
    feats = np.asarray(features, dtype=np.float64)
    return SampleSet(feats[pix], labels[pix] - 1, pix, np.full(pix.size, domain))


def samples_to_label_map(samples: SampleSet, shape) -> np.ndarray:
    out = np.zeros(int(np.prod(shape)), dtype=np.int64)
    out[samples.pixels] = samples.labels + 1
    return out.reshape(shape)


# -- synthetic benchmark --------------------------------------------------


@dataclass
class SynthConfig:
    classes: int = 5
    bands: int = 30
    size: int = 64
    shift: float = 0.0
    noise: float = 0.2
    blobs_per_class: int = 12
    contrast: float = 0.15


@dataclass
class SynthScene:
    raw: np.ndarray  # H x W x B, unscaled
    labels: np.ndarray  # H x W, 1..C
    means: np.ndarray  # C x B class signatures

    @property
    def cube(self) -> HyperCube:
        return HyperCube.from_raw(self.raw)


def _smooth_curves(rng: np.random.Generator, count: int, bands: int) -> np.ndarray:
    curves = gaussian_filter1d(rng.standard_normal((count, bands)), sigma=max(bands / 10.0, 1.0), axis=1, mode="nearest")
    curves -= curves.mean(axis=1, keepdims=True)
    rms = np.sqrt(np.mean(curves**2, axis=1, keepdims=True))
    return curves / np.where(rms > 0, rms, 1.0)


def blob_layout(size: int, classes: int, blobs_per_class: int, rng: np.random.Generator) -> np.ndarray:
    """Voronoi partition of a ``size x size`` grid into blobs labeled 1..classes."""
    n_seeds = classes * blobs_per_class
    seeds = rng.uniform(0, size, size=(n_seeds, 2))
    seed_class = np.repeat(np.arange(1, classes + 1), blobs_per_class)
    seed_class = seed_class[rng.permutation(n_seeds)]
    rr, cc = np.mgrid[0:size, 0:size]
    grid = np.stack([rr.ravel() + 0.5, cc.ravel() + 0.5], axis=1)
    d2 = ((grid[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
    return seed_class[np.argmin(d2, axis=1)].reshape(size, size)


def synth_benchmark(cfg: SynthConfig, rng: np.random.Generator) -> tuple[SynthScene, SynthScene]:
    """Source and target scenes with Gaussian class signatures laid out in spatial blobs.

    Target class means are the source means moved by ``shift`` along a
    per-class smooth direction of unit RMS, and the target has its own
    spatial layout.
    """
    base = 0.5 + 0.1 * _smooth_curves(rng, 1, cfg.bands)[0]
    means = base + cfg.contrast * _smooth_curves(rng, cfg.classes, cfg.bands)
    directions = _smooth_curves(rng, cfg.classes, cfg.bands)
    target_means = means + cfg.shift * directions

    def scene(class_means: np.ndarray) -> SynthScene:
        layout = blob_layout(cfg.size, cfg.classes, cfg.blobs_per_class, rng)
        raw = class_means[layout - 1] + cfg.noise * rng.standard_normal((cfg.size, cfg.size, cfg.bands))
        return SynthScene(raw.astype(np.float32), layout, class_means)

    return scene(means), scene(target_means)


# -- metrics --------------------------------------------------------------


@dataclass
class Metrics:
    oa: float
    aa: float
    kappa: float
    confusion: np.ndarray = field(repr=False)


def compute_metrics(predicted, truth, class_count: int | None = None) -> Metrics:
    """Overall accuracy, average per-class recall and Cohen's kappa.

    ``confusion[i, j]`` counts samples of true class ``i`` predicted as ``j``.
    AA averages over classes present in ``truth``. When chance agreement is 1
    (one class in both vectors) kappa is reported as 1.
    """
    pred = np.asarray(predicted, dtype=np.int64).reshape(-1)
    true = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred.size == 0 or pred.size != true.size:
        raise ValueError("predicted and truth must be non-empty and of equal length")
    if pred.min() < 0 or true.min() < 0:
        raise ValueError("class ids must be non-negative")
    c = int(max(pred.max(), true.max()) + 1) if class_count is None else class_count
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    total = conf.sum()
    p_o = np.trace(conf) / total
    row = conf.sum(axis=1)
    col = conf.sum(axis=0)
    present = row > 0
    aa = float(np.mean(np.diag(conf)[present] / row[present]))
    p_e = float(np.sum(row.astype(np.float64) * col) / float(total) ** 2)
    kappa = 1.0 if p_e >= 1.0 else (p_o - p_e) / (1.0 - p_e)
    return Metrics(float(p_o), aa, float(kappa), conf)
