"""Multi-channel image arrays, the SMT file format and preprocessing.

Images are plain ``numpy`` arrays of shape ``(channels, height, width)``.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SMT_MAGIC = b"SMT1"
_SMT_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """File does not start with the expected magic bytes."""


class CorruptFileError(ValueError):
    """File header and payload size disagree."""


def as_image(img, name="image"):
    """Validate and return ``img`` as a float ``(C, H, W)`` array."""
    arr = np.asarray(img)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"{name} must have shape (C, H, W), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def save_smt(img, path):
    img = as_image(img)
    c, h, w = img.shape
    payload = np.ascontiguousarray(img, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_SMT_HEADER.pack(SMT_MAGIC, c, h, w))
        f.write(payload)


def load_smt(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != SMT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _SMT_HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    _, c, h, w = _SMT_HEADER.unpack_from(raw)
    n = c * h * w
    expected = _SMT_HEADER.size + 4 * n
    if len(raw) != expected:
        raise CorruptFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if n == 0:
        raise CorruptFileError(f"{path}: empty tensor {c}x{h}x{w}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_SMT_HEADER.size)
    img = data.astype(np.float32).reshape(c, h, w)
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{path}: non-finite values in payload")
    return img


@dataclass(frozen=True)
class NormalizationStats:
    lo: float
    hi: float
    modality: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("normalization bounds must be finite")
        if self.lo > self.hi:
            raise ValueError(f"lo={self.lo} exceeds hi={self.hi}")

    @property
    def degenerate(self):
        """True when the range is too narrow to rescale (output is 0.5)."""
        return self.hi - self.lo < 1e-12


def compute_percentiles(images, low_pct=0.5, high_pct=99.5, modality=""):
    """Global percentiles pooled over every channel of every image.

    Uses linear interpolation between order statistics.
    """
    images = list(images)
    if not images:
        raise ValueError("need at least one image")
    if not 0 <= low_pct <= high_pct <= 100:
        raise ValueError(f"bad percentiles ({low_pct}, {high_pct})")
    pooled = np.concatenate([np.asarray(im, dtype=np.float64).ravel() for im in images])
    lo, hi = np.percentile(pooled, [low_pct, high_pct], method="linear")
    return NormalizationStats(float(lo), float(hi), modality)


def normalize(img, stats):
    """Clamp to ``[lo, hi]`` and rescale linearly to ``[0, 1]``.

    A degenerate range maps every value to 0.5; check ``stats.degenerate``.
    """
    img = as_image(img)
    if stats.degenerate:
        return np.full(img.shape, 0.5, dtype=img.dtype)
    out = (np.clip(img, stats.lo, stats.hi) - stats.lo) / (stats.hi - stats.lo)
    # guard against rounding just outside the unit interval
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def to_db(img, floor=1e-6):
    if floor <= 0:
        raise ValueError("dB floor must be positive")
    img = as_image(img)
    return 10.0 * np.log10(np.maximum(img, floor))


def gray_average(img):
    img = as_image(img)
    return img.mean(axis=0, keepdims=True)


def select_channels(img, indices):
    img = as_image(img)
    indices = list(indices)
    if not indices:
        raise ValueError("channel list is empty")
    for i in indices:
        if not 0 <= i < img.shape[0]:
            raise ValueError(f"channel index {i} out of range for {img.shape[0]} channels")
    return img[indices].copy()


# The dihedral group of the square: element k applies k quarter turns,
# preceded by a horizontal flip for k >= 4.
DIHEDRAL_ELEMENTS = 8


def dihedral(img, k):
    """Apply dihedral element ``k`` (0..7) to the two trailing axes."""
    if not 0 <= k < DIHEDRAL_ELEMENTS:
        raise ValueError(f"dihedral element {k} not in 0..7")
    out = img[..., ::-1] if k >= 4 else img
    return np.ascontiguousarray(np.rot90(out, k % 4, axes=(-2, -1)))


def augment_pair(a, b, rng):
    """Apply one uniformly drawn dihedral transform to both images."""
    a = as_image(a, "a")
    b = as_image(b, "b")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"spatial shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    k = int(rng.integers(DIHEDRAL_ELEMENTS))
    return dihedral(a, k), dihedral(b, k)
