"""Dataset ingestion and the image-to-continuous-space pipeline.

Images arrive as IDX files of bytes, get uniform jitter ((byte + u)/256 with
u ~ U[0,1)) and then a padded logit map to the whole real line.  Toy 2-d
densities with known log-densities provide desk-scale targets for density
estimation.  Datasets are immutable after construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

RAW = "raw"            # integer byte values 0..255
UNIT = "unit"          # jittered values in [0, 1)
LOGIT = "logit"        # unconstrained model space for image data
PLAIN = "plain"        # already-continuous model space (toys, CSV loads)

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801

TOY_NAMES = ("two-moons", "ring", "mixture-of-8")

MIX8_RADIUS = 2.0
MIX8_SIGMA = 0.1
RING_RADIUS = 2.0
RING_SIGMA = 0.1
MOONS_SIGMA = 0.1


@dataclass
class Dataset:
    """Row-major sample matrix tagged with the space its values live in."""

    X: np.ndarray
    space: str = PLAIN
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError(f"dataset matrix must be 2-d, got {self.X.shape}")
        if self.space not in (RAW, UNIT, LOGIT, PLAIN):
            raise ValueError(f"unknown space tag '{self.space}'")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_dim(self):
        return self.X.shape[1]


def _read_exact(f, n, path, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated {what} at byte offset {f.tell() - len(buf)}")
    return buf


def load_idx(images_path, labels_path=None):
    """Load an IDX image file (and optionally its labels) into a raw Dataset.

    Expects the published big-endian container: magic 0x00000803, dimension
    sizes, then unsigned bytes.  Images are flattened row-major.
    """
    with open(images_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, images_path, "magic"))[0]
        if magic != _IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: bad magic 0x{magic:08x} at byte offset 0, "
                              f"expected 0x{_IDX_IMAGES_MAGIC:08x}")
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, images_path, "header"))
        raw = _read_exact(f, count * rows * cols, images_path, "pixel data")
        extra = f.read(1)
        if extra:
            raise FormatError(f"{images_path}: trailing bytes at offset {f.tell() - 1}")
    X = np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(count, rows * cols)

    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as f:
            magic = struct.unpack(">I", _read_exact(f, 4, labels_path, "magic"))[0]
            if magic != _IDX_LABELS_MAGIC:
                raise FormatError(f"{labels_path}: bad magic 0x{magic:08x} at byte offset 0, "
                                  f"expected 0x{_IDX_LABELS_MAGIC:08x}")
            (n,) = struct.unpack(">I", _read_exact(f, 4, labels_path, "header"))
            if n != count:
                raise FormatError(f"{labels_path}: {n} labels for {count} images")
            labels = np.frombuffer(_read_exact(f, n, labels_path, "label data"),
                                   dtype=np.uint8).copy()
    return Dataset(X, RAW, labels)


def write_idx(images_path, images, labels_path=None, labels=None):
    """Write byte images (n, rows, cols) as an IDX file; inverse of load_idx."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError(f"expected (n, rows, cols) byte images, got {images.shape}")
    if images.dtype != np.uint8:
        if images.min() < 0 or images.max() > 255:
            raise ValueError("image values outside 0..255")
        images = images.astype(np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    if labels_path is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">II", _IDX_LABELS_MAGIC, labels.shape[0]))
            f.write(labels.tobytes())


def dequantize(dataset, rng):
    """Jitter raw bytes to (byte + u)/256 with u ~ U[0,1) per pixel."""
    if dataset.space != RAW:
        raise ValueError(f"dequantize expects raw byte data, got '{dataset.space}'")
    u = rng.random(dataset.X.shape)
    return Dataset((dataset.X + u) / 256.0, UNIT, dataset.labels)


def logit_transform(dataset, lam=1e-6):
    """Map [0,1] data to the real line through logit(lam + (1-2 lam) x).

    Returns (logit dataset, per-row log-det-Jacobian) so callers can convert
    model-space likelihoods back to the original space when wanted.
    """
    if dataset.space != UNIT:
        raise ValueError(f"logit_transform expects unit-interval data, got '{dataset.space}'")
    y = lam + (1.0 - 2.0 * lam) * dataset.X
    out = np.log(y) - np.log1p(-y)
    logdet = (np.log1p(-2.0 * lam) - np.log(y) - np.log1p(-y)).sum(axis=1)
    return Dataset(out, LOGIT, dataset.labels), logdet


def inverse_logit_transform(dataset, lam=1e-6):
    """Undo logit_transform back to the unit interval."""
    if dataset.space != LOGIT:
        raise ValueError(f"expected logit-space data, got '{dataset.space}'")
    y = 1.0 / (1.0 + np.exp(-dataset.X))
    return Dataset((y - lam) / (1.0 - 2.0 * lam), UNIT, dataset.labels)


# ---------------------------------------------------------------------------
# toy 2-d targets

_MIX8_ANGLES = 2.0 * np.pi * np.arange(8) / 8.0
_MIX8_CENTERS = MIX8_RADIUS * np.stack([np.cos(_MIX8_ANGLES), np.sin(_MIX8_ANGLES)], axis=1)


def _moon_centers(t):
    # sklearn-style construction: two interleaved half circles
    a = np.stack([np.cos(t), np.sin(t)], axis=-1)
    b = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=-1)
    return a, b


def toy_density(name, n_samples, rng):
    """Sample one of the named 2-d toy targets into a plain Dataset."""
    if name == "mixture-of-8":
        comp = rng.integers(8, size=n_samples)
        X = _MIX8_CENTERS[comp] + MIX8_SIGMA * rng.standard_normal((n_samples, 2))
    elif name == "ring":
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n_samples)
        rho = RING_RADIUS + RING_SIGMA * rng.standard_normal(n_samples)
        X = np.stack([rho * np.cos(theta), rho * np.sin(theta)], axis=1)
    elif name == "two-moons":
        t = rng.uniform(0.0, np.pi, size=n_samples)
        a, b = _moon_centers(t)
        which = rng.integers(2, size=n_samples)
        X = np.where(which[:, None] == 0, a, b) + MOONS_SIGMA * rng.standard_normal((n_samples, 2))
    else:
        raise ConfigError(f"unknown toy density '{name}' (choose from {', '.join(TOY_NAMES)})")
    return Dataset(X, PLAIN)


def toy_log_density(name, X):
    """log-density of the named toy target at the rows of X.

    mixture-of-8 and ring are closed form; two-moons integrates over the arc
    parameter with a fine trapezoid rule (documented approximation).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError(f"toy densities are 2-d, got {X.shape}")
    if name == "mixture-of-8":
        d2 = ((X[:, None, :] - _MIX8_CENTERS[None, :, :]) ** 2).sum(axis=2)
        comp = -d2 / (2.0 * MIX8_SIGMA ** 2) - np.log(2.0 * np.pi * MIX8_SIGMA ** 2)
        m = comp.max(axis=1)
        return m + np.log(np.exp(comp - m[:, None]).sum(axis=1)) - np.log(8.0)
    if name == "ring":
        r = np.sqrt((X ** 2).sum(axis=1))
        return (-0.5 * np.log(2.0 * np.pi * RING_SIGMA ** 2)
                - (r - RING_RADIUS) ** 2 / (2.0 * RING_SIGMA ** 2)
                - np.log(2.0 * np.pi * r))
    if name == "two-moons":
        t = np.linspace(0.0, np.pi, 2001)
        a, b = _moon_centers(t)
        centers = np.concatenate([a, b])  # equal weights over both arcs
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        comp = -d2 / (2.0 * MOONS_SIGMA ** 2) - np.log(2.0 * np.pi * MOONS_SIGMA ** 2)
        m = comp.max(axis=1)
        return m + np.log(np.exp(comp - m[:, None]).mean(axis=1))
    raise ConfigError(f"unknown toy density '{name}' (choose from {', '.join(TOY_NAMES)})")


def minibatch_indices(n_rows, batch_size, rng):
    """Yield index batches covering every row exactly once, in shuffled order."""
    order = rng.permutation(n_rows)
    for start in range(0, n_rows, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# CSV interchange


def save_csv(path, X):
    """Write a sample matrix with full round-trip precision, '.' decimal separator."""
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w") as f:
        for row in np.atleast_2d(X):
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path):
    """Read a sample matrix; malformed rows are reported with their line number."""
    rows = []
    width = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise FormatError(f"{path}: malformed value in row {lineno}") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise FormatError(f"{path}: row {lineno} has {len(vals)} columns, expected {width}")
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return np.array(rows)
