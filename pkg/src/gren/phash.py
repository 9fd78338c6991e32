"""64-bit DCT perceptual hashes of grayscale images and masked regions.

Images are 2-d float arrays (rows x cols) with values in [0, 1]. A hash is
a plain Python ``int`` in ``[0, 2**64)``; bit ``k`` holds the comparison of
the ``k``-th low-frequency coefficient against the block median, where the
scan order is the 8x8 top-left block read row-major with the DC term
dropped and coefficient (8, 0) appended at the end.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

HASH_BITS = 64
HASH_SIDE = 32
BLOCK = 8


def check_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-d image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return img


@lru_cache(maxsize=None)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge-clamped (the usual resize convention)
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(image: np.ndarray, rows: int, cols: int) -> np.ndarray:
    r = _bilinear_matrix(image.shape[0], rows)
    c = _bilinear_matrix(image.shape[1], cols)
    return r @ image @ c.T


def preprocess(image, side: int = HASH_SIDE) -> np.ndarray:
    """Bilinear resize to ``side x side`` followed by min-max normalisation."""
    img = check_image(image)
    if side <= 0:
        raise ValueError("side must be positive")
    if img.shape == (side, side):
        small = img.copy()
    else:
        small = resize_bilinear(img, side, side)
    lo, hi = small.min(), small.max()
    if hi - lo <= 0.0:
        return np.full((side, side), 0.5)
    return (small - lo) / (hi - lo)


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row ``k`` is frequency ``k``."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct2(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (HASH_SIDE, HASH_SIDE):
        raise ValueError(f"dct2 expects a {HASH_SIDE}x{HASH_SIDE} array, got {img.shape}")
    m = dct_matrix(HASH_SIDE)
    return m @ img @ m.T


def idct2(coeffs) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != (HASH_SIDE, HASH_SIDE):
        raise ValueError(f"idct2 expects a {HASH_SIDE}x{HASH_SIDE} array, got {c.shape}")
    m = dct_matrix(HASH_SIDE)
    return m.T @ c @ m


def low_frequency_scan(coeffs: np.ndarray) -> np.ndarray:
    """The 64 hashed coefficients in bit order."""
    block = coeffs[:BLOCK, :BLOCK].reshape(-1)[1:]
    return np.append(block, coeffs[BLOCK, 0])


def bits_to_int(bits) -> int:
    value = 0
    for k, bit in enumerate(bits):
        if bit:
            value |= 1 << k
    return value


def phash64(image) -> int:
    small = preprocess(image)
    # Subtracting the mean only moves the DC term (which is discarded) and
    # keeps flat inputs at exact zeros instead of round-off noise.
    coeffs = dct2(small - small.mean())
    scan = low_frequency_scan(coeffs)
    return bits_to_int(scan > np.median(scan))


def hamming(a: int, b: int) -> int:
    return (int(a) ^ int(b)).bit_count()


def to_hex(h: int) -> str:
    return format(int(h), "016x")


def from_hex(text: str) -> int:
    if len(text) != 16:
        raise ValueError(f"hash hex must have 16 characters, got {len(text)}")
    return int(text, 16)


def region_hash(image, mask) -> int:
    """Hash of the mask's bounding-box crop with off-mask pixels zeroed."""
    img = check_image(image)
    m = np.asarray(mask).astype(bool)
    if m.shape != img.shape:
        raise ValueError(f"mask shape {m.shape} does not match image {img.shape}")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask")
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    crop = np.where(m[r0:r1, c0:c1], img[r0:r1, c0:c1], 0.0)
    return phash64(crop)
