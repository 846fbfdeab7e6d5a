"""Datasets: toy 2-D generators, image-derived densities and CSV tables."""
from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .flow import make_rng

RING_RADII = (0.25, 0.5, 0.75, 1.0)
RING_SCALE = 3.0
RING_NOISE = 0.08
MAX_PGM_PIXELS = 4096 * 4096


@dataclass(frozen=True)
class Dataset:
    """Immutable ``rows x D`` float matrix with optional standardisation stats."""

    data: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    provenance: str = ""
    columns: tuple = field(default=())

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise DataError(f"dataset must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("dataset contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __len__(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.data).astype("<f8").tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

def gen_rings(n, seed, radii=RING_RADII, scale=RING_SCALE, noise=RING_NOISE):
    """Points on concentric circles (scaled radii) with isotropic Gaussian noise."""
    rng = make_rng(seed)
    radii = np.asarray(radii, dtype=np.float64) * scale
    which = rng.integers(0, len(radii), size=n)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = radii[which]
    pts = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    pts = pts + noise * rng.standard_normal((n, 2))
    return Dataset(pts, provenance=f"rings(n={n},seed={seed},noise={noise})")


def gen_checkerboard(n, seed):
    """Uniform over the 8 black squares of a 4x4 board on ``[-2, 2]^2``."""
    rng = make_rng(seed)
    x1 = rng.uniform(-2.0, 2.0, size=n)
    x2 = rng.uniform(0.0, 1.0, size=n) - 2.0 * rng.integers(0, 2, size=n)
    x2 = x2 + np.floor(x1) % 2
    return Dataset(np.stack([x1, x2], axis=1), provenance=f"checkerboard(n={n},seed={seed})")


def checkerboard_allowed(points):
    """True where a point lies on a square used by :func:`gen_checkerboard`."""
    pts = np.asarray(points)
    inside = np.all(np.abs(pts) <= 2.0, axis=1)
    cell = np.floor(pts[:, 0]).astype(int) + np.floor(pts[:, 1]).astype(int)
    return inside & (cell % 2 == 0)


def gen_two_moons(n, seed, noise=0.1):
    """Two interleaved half circles, centred at the origin."""
    rng = make_rng(seed)
    upper = rng.random(n) < 0.5
    t = rng.uniform(0.0, np.pi, size=n)
    x = np.where(upper, np.cos(t), 1.0 - np.cos(t))
    y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([x - 0.5, y - 0.25], axis=1) * 2.0
    pts = pts + noise * rng.standard_normal((n, 2))
    return Dataset(pts, provenance=f"two_moons(n={n},seed={seed})")


def gen_normal(n, seed, dim=2):
    rng = make_rng(seed)
    return Dataset(rng.standard_normal((n, dim)), provenance=f"normal(n={n},seed={seed})")


GENERATORS = {
    "rings": gen_rings,
    "checkerboard": gen_checkerboard,
    "two_moons": gen_two_moons,
    "moons": gen_two_moons,
    "normal": gen_normal,
}


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _pgm_tokens(buf, count, pos):
    tokens = []
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def read_pgm(path):
    """Read a P2 (ASCII) or P5 (binary, 8-bit) PGM file as a ``uint8`` array."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    magic = buf[:2]
    if magic not in (b"P2", b"P5"):
        raise DataError(f"{path}: not a P2/P5 PGM file")
    try:
        (w, h, maxval), pos = _pgm_tokens(buf, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM header") from exc
    if w <= 0 or h <= 0 or w * h > MAX_PGM_PIXELS:
        raise DataError(f"{path}: unsupported image size {w}x{h}")
    if not 0 < maxval < 256:
        raise DataError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    if magic == b"P5":
        raw = buf[pos + 1:pos + 1 + w * h]
        if len(raw) != w * h:
            raise DataError(f"{path}: truncated pixel data")
        pix = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    else:
        try:
            vals, _ = _pgm_tokens(buf, w * h, pos)
            pix = np.array([int(v) for v in vals], dtype=np.int64).reshape(h, w)
        except (ValueError, DataError) as exc:
            raise DataError(f"{path}: malformed ASCII pixel data") from exc
    return np.clip(pix.astype(np.float64) * 255.0 / maxval, 0, 255).round().astype(np.uint8)


def write_pgm(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def image_density(pgm_path, n, seed):
    """Sample ``[0, 1]^2`` with density proportional to inverted pixel intensity.

    Dark pixels carry mass, white pixels none.  The row axis is flipped so
    the first image row ends up at the top (``y`` near 1).
    """
    pix = read_pgm(pgm_path)
    h, w = pix.shape
    mass = (255.0 - pix.astype(np.float64)).ravel()
    total = mass.sum()
    if total <= 0:
        raise DataError(f"{pgm_path}: image is entirely white, no mass to sample")
    rng = make_rng(seed)
    cells = rng.choice(mass.size, size=n, p=mass / total)
    row, col = np.divmod(cells, w)
    x = (col + rng.random(n)) / w
    y = (h - 1 - row + rng.random(n)) / h
    return Dataset(np.stack([x, y], axis=1),
                   provenance=f"image({os.path.basename(pgm_path)},n={n},seed={seed})")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def read_csv_matrix(path, has_header=None):
    """Parse a numeric CSV into ``(matrix, column_names)``.

    ``has_header=None`` treats the first line as a header iff it does not
    parse as numbers.
    """
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if any(cell.strip() for cell in r)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    header = ()
    if has_header is None:
        try:
            [float(c) for c in rows[0]]
            has_header = False
        except ValueError:
            has_header = True
    if has_header:
        header, rows = tuple(c.strip() for c in rows[0]), rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    first = 2 if has_header else 1
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {i + first} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric cell {cell!r} at row {i + first}, column {j + 1}") from None
    if not np.all(np.isfinite(out)):
        raise DataError(f"{path}: contains NaN or Inf")
    return out, header


def split_indices(n, validation_frac, test_frac, seed):
    if not 0.0 <= validation_frac <= 0.5 or not 0.0 <= test_frac < 1.0:
        raise DataError("validation fraction must be in [0, 0.5] and test fraction in [0, 1)")
    perm = make_rng(seed).permutation(n)
    n_test = int(round(test_frac * n))
    n_val = int(round(validation_frac * n))
    if n - n_test - n_val < 1:
        raise DataError(f"not enough rows ({n}) for the requested splits")
    return perm[n_test + n_val:], perm[n_test:n_test + n_val], perm[:n_test]


def standardize_splits(data, validation_frac, test_frac, seed, provenance="", columns=()):
    """Seeded shuffle-split, dropping constant columns and standardising with train stats."""
    tr, va, te = split_indices(len(data), validation_frac, test_frac, seed)
    train = data[tr]
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    keep = sd > 0
    if not np.any(keep):
        raise DataError("every column is constant on the training split")
    mu, sd = mu[keep], sd[keep]
    cols = tuple(c for c, k in zip(columns, keep) if k) if columns else ()

    def make(idx, tag):
        return Dataset((data[idx][:, keep] - mu) / sd, mu, sd, f"{provenance}[{tag}]", cols)

    return make(tr, "train"), make(va, "val"), make(te, "test")


def load_csv(path, has_header=None, validation_frac=0.1, test_frac=0.1, seed=0):
    """Load a numeric CSV and return standardised ``(train, val, test)`` datasets.

    Validation and test rows are standardised with the training statistics.
    """
    data, header = read_csv_matrix(path, has_header)
    return standardize_splits(data, validation_frac, test_frac, seed,
                              provenance=os.path.basename(path), columns=header)


def split_dataset(ds: Dataset, validation_frac, test_frac, seed):
    """Seeded split of an already prepared dataset (no standardisation)."""
    tr, va, te = split_indices(len(ds), validation_frac, test_frac, seed)
    return tuple(Dataset(ds.data[i], ds.mean, ds.std, f"{ds.provenance}[{t}]", ds.columns)
                 for i, t in ((tr, "train"), (va, "val"), (te, "test")))
