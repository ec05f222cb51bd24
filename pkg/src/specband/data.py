"""Hyperspectral cube I/O, labelled-pixel extraction and balanced splits.

Cubes are stored as raw little-endian float32 in band-interleaved-by-pixel
order next to a small ``key = value`` text header::

    rows = 512
    cols = 217
    bands = 204
    dtype = float32-le
    layout = bip
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed, truncated or inconsistent input data."""


@dataclass
class HsiCube:
    data: np.ndarray  # (rows, cols, bands) float32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"cube must be rows x cols x bands, got shape {self.data.shape}")

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def bands(self):
        return self.data.shape[2]


@dataclass
class GroundTruth:
    labels: np.ndarray  # (rows, cols), 0 = background

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise DataError("ground truth must be a rows x cols array")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("ground-truth labels must be non-negative")

    @property
    def num_classes(self):
        return int(self.labels.max()) if self.labels.size else 0


# ------------------------------------------------------------------ headers


def default_header_path(data_path):
    return Path(data_path).with_suffix(".hdr")


def read_header(path):
    fields = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read header {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key.lower()] = value
    try:
        hdr = {k: int(fields[k]) for k in ("rows", "cols", "bands")}
    except KeyError as exc:
        raise DataError(f"{path}: header lacks {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: non-integer dimension ({exc})") from exc
    if min(hdr.values()) < 1:
        raise DataError(f"{path}: dimensions must be positive")
    hdr["dtype"] = fields.get("dtype", "float32-le").lower()
    hdr["layout"] = fields.get("layout", "bip").lower()
    if hdr["dtype"] != "float32-le":
        raise DataError(f"{path}: unsupported dtype {hdr['dtype']!r} (need float32-le)")
    if hdr["layout"] != "bip":
        raise DataError(f"{path}: unsupported layout {hdr['layout']!r} (need bip)")
    return hdr


def write_header(path, rows, cols, bands):
    Path(path).write_text(
        f"rows = {rows}\ncols = {cols}\nbands = {bands}\ndtype = float32-le\nlayout = bip\n"
    )


def expected_payload(rows, cols, bands):
    """Number of float32 values in a cube payload."""
    return rows * cols * bands


# -------------------------------------------------------------------- cubes


def load_cube(data_path, header_path=None) -> HsiCube:
    """Load a raw float32 cube (or its CSV fallback) and validate it."""
    data_path = Path(data_path)
    if data_path.suffix.lower() == ".csv":
        return _load_cube_csv(data_path, header_path)
    hdr = read_header(header_path or default_header_path(data_path))
    rows, cols, bands = hdr["rows"], hdr["cols"], hdr["bands"]
    try:
        raw = data_path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read cube {data_path}: {exc}") from exc
    want = expected_payload(rows, cols, bands) * 4
    if len(raw) != want:
        raise DataError(
            f"{data_path}: size mismatch, header implies {want} bytes, file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(rows, cols, bands)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{data_path}: non-finite values in cube")
    return HsiCube(data.astype(np.float32))


def _load_cube_csv(path, header_path=None):
    hdr = None
    hp = Path(header_path) if header_path else default_header_path(path)
    if hp.exists():
        hdr = read_header(hp)
    try:
        table = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: malformed CSV ({exc})") from exc
    if table.shape[1] < 3:
        raise DataError(f"{path}: each line needs row,col and at least one band")
    rc = table[:, :2].astype(int)
    bands = table.shape[1] - 2
    rows = hdr["rows"] if hdr else int(rc[:, 0].max()) + 1
    cols = hdr["cols"] if hdr else int(rc[:, 1].max()) + 1
    if hdr and hdr["bands"] != bands:
        raise DataError(f"{path}: header says {hdr['bands']} bands, CSV has {bands}")
    if len(table) != rows * cols:
        raise DataError(f"{path}: expected {rows * cols} pixel lines, found {len(table)}")
    if not np.all(np.isfinite(table)):
        raise DataError(f"{path}: non-finite values in cube")
    data = np.zeros((rows, cols, bands), dtype=np.float32)
    data[rc[:, 0], rc[:, 1]] = table[:, 2:]
    return HsiCube(data)


def save_cube(cube: HsiCube, data_path, header_path=None):
    data_path = Path(data_path)
    header_path = Path(header_path) if header_path else default_header_path(data_path)
    data_path.write_bytes(cube.data.astype("<f4").tobytes())
    write_header(header_path, cube.rows, cube.cols, cube.bands)
    return data_path, header_path


def load_ground_truth(path, rows, cols) -> GroundTruth:
    """Raw little-endian uint16 (row-major) or CSV ``row,col,label``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"ground truth not found: {path}")
    if path.suffix.lower() == ".csv":
        labels = np.zeros((rows, cols), dtype=np.uint16)
        with open(path, newline="") as fh:
            for rec in csv.reader(fh):
                if not rec or not rec[0].strip().lstrip("-").isdigit():
                    continue  # header or blank line
                r, c, lab = (int(v) for v in rec[:3])
                if not (0 <= r < rows and 0 <= c < cols):
                    raise DataError(f"{path}: pixel ({r},{c}) outside {rows}x{cols}")
                labels[r, c] = lab
        return GroundTruth(labels)
    raw = path.read_bytes()
    if len(raw) != rows * cols * 2:
        raise DataError(
            f"{path}: size mismatch, expected {rows * cols * 2} bytes, file has {len(raw)}"
        )
    return GroundTruth(np.frombuffer(raw, dtype="<u2").reshape(rows, cols).copy())


def save_ground_truth(gt: GroundTruth, path):
    Path(path).write_bytes(gt.labels.astype("<u2").tobytes())


# ------------------------------------------------------------------- pixels


@dataclass
class LabeledPixels:
    spectra: np.ndarray  # (n, b)
    labels: np.ndarray  # (n,) in 0..C-1
    coords: np.ndarray  # (n, 2) row, col
    num_classes: int

    def __len__(self):
        return len(self.labels)

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def with_bands(self, bands):
        return LabeledPixels(self.spectra[:, list(bands)], self.labels, self.coords, self.num_classes)


def to_pixels(cube: HsiCube, gt: GroundTruth) -> LabeledPixels:
    """Drop background pixels and shift labels 1..C to 0..C-1."""
    if gt.labels.shape != (cube.rows, cube.cols):
        raise DataError(
            f"ground truth {gt.labels.shape} does not match cube {(cube.rows, cube.cols)}"
        )
    mask = gt.labels > 0
    coords = np.argwhere(mask)
    labels = gt.labels[mask].astype(np.int64) - 1
    return LabeledPixels(cube.data[mask], labels, coords, gt.num_classes)


@dataclass
class DatasetSplits:
    train: np.ndarray  # indices into the LabeledPixels
    validation: np.ndarray
    test: np.ndarray
    seed: int
    per_class: dict

    def subset(self, pixels: LabeledPixels, part: str):
        idx = getattr(self, part)
        return pixels.spectra[idx], pixels.labels[idx]


def balanced_split(pixels: LabeledPixels, seed: int, min_per_class: int = 10) -> DatasetSplits:
    """Under-sample every class to the minority count m, then split 80/10/10.

    Per class: ``m*8//10`` train, ``m//10`` validation, ``m//10`` test; the
    rounding remainder is added to train.
    """
    counts = pixels.class_counts
    small = [c for c in range(pixels.num_classes) if counts[c] < min_per_class]
    if small:
        raise DataError(
            f"classes {small} have fewer than {min_per_class} pixels (counts {counts[small].tolist()})"
        )
    m = int(counts.min())
    n_tr, n_va = m * 8 // 10, m // 10
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in range(pixels.num_classes):
        idx = rng.permutation(np.flatnonzero(pixels.labels == c))[:m]
        train.append(idx[:n_tr])
        val.append(idx[n_tr:n_tr + n_va])
        test.append(idx[n_tr + n_va:n_tr + 2 * n_va])
        train.append(idx[n_tr + 2 * n_va:])
    per_class = {"minority": m, "train": m - 2 * n_va, "validation": n_va, "test": n_va}
    return DatasetSplits(np.concatenate(train), np.concatenate(val), np.concatenate(test),
                         seed, per_class)


class MinMaxScaler:
    """Per-band min-max scaling fitted on the training spectra."""

    def __init__(self, lo=None, hi=None):
        self.lo, self.hi = lo, hi

    def fit(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.lo, self.hi = x.min(axis=0), x.max(axis=0)
        return self

    def transform(self, x):
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return ((np.asarray(x, dtype=np.float64) - self.lo) / span).astype(np.float32)


# ------------------------------------------------------------ band subsets


def reduce_bands(cube: HsiCube, selection) -> HsiCube:
    sel = [int(i) for i in selection]
    if not sel:
        raise DataError("cannot reduce a cube to an empty band selection")
    bad = [i for i in sel if not 0 <= i < cube.bands]
    if bad:
        raise DataError(f"band indices {bad} outside 0..{cube.bands - 1}")
    return HsiCube(cube.data[:, :, sel])


def write_band_index(path, indices):
    Path(path).write_text("\n".join(str(int(i)) for i in indices) + "\n")


def read_band_index(path):
    return [int(t) for t in Path(path).read_text().split()]


# ---------------------------------------------------------------- synthetic


def synth_cube(bands, classes, planted, sigma=0.05, rows=30, cols=60, seed=0, amplitude=0.3):
    """Synthetic cube where classes differ only at the planted bands.

    Every class shares a smooth baseline spectrum.  At planted band ``j``,
    class ``c`` is offset by ``amplitude * (((c + j) % C) / (C - 1) - 1/2)``,
    so each planted band alone separates all classes.  Gaussian noise with
    standard deviation ``sigma`` is added everywhere.  Labels (1..C) are
    balanced across the ``rows * cols`` pixels.
    """
    planted = [int(p) for p in planted]
    if len(set(planted)) != len(planted) or any(not 0 <= p < bands for p in planted):
        raise DataError(f"planted bands must be distinct and in 0..{bands - 1}")
    if classes < 2:
        raise DataError("need at least two classes")
    rng = np.random.default_rng(seed)
    baseline = 0.5 + 0.2 * np.sin(2 * np.pi * np.arange(bands) / bands)
    means = np.tile(baseline, (classes, 1))
    for j, band in enumerate(planted):
        for c in range(classes):
            means[c, band] += amplitude * (((c + j) % classes) / (classes - 1) - 0.5)
    n = rows * cols
    labels = rng.permutation(np.arange(n) % classes)
    spectra = means[labels] + sigma * rng.standard_normal((n, bands))
    cube = HsiCube(spectra.reshape(rows, cols, bands))
    gt = GroundTruth((labels + 1).reshape(rows, cols).astype(np.uint16))
    return cube, gt
