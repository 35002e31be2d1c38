"""Image <-> token-grid mapping with a fixed palette codebook.

Features are per-patch mean RGB; the default codebook is the 512-entry
{0, 1/7, ..., 1}^3 lattice, so flat palette-colored regions round-trip
exactly. A learned codebook can be dropped in behind the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_PATCH = 4
LATTICE_LEVELS = 8


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # (V, C)

    @property
    def size(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]


def palette_codebook():
    """The 8x8x8 RGB lattice: V=512 entries of dimension C=3."""
    levels = np.arange(LATTICE_LEVELS) / (LATTICE_LEVELS - 1)
    r, g, b = np.meshgrid(levels, levels, levels, indexing="ij")
    return Codebook(np.stack([r, g, b], axis=-1).reshape(-1, 3))


@dataclass(frozen=True)
class TokenGrid:
    h: int
    w: int
    codes: np.ndarray  # (h*w,) int64 in [0, V)

    def grid(self):
        return self.codes.reshape(self.h, self.w)


def encode_features(image, patch=DEFAULT_PATCH):
    """Mean RGB per patch; (res, res, 3) -> (h, w, 3) with h = res // patch."""
    image = np.asarray(image, dtype=np.float64)
    res = image.shape[0]
    if res % patch != 0:
        raise ValueError(f"resolution {res} not divisible by patch {patch}")
    h = res // patch
    return image.reshape(h, patch, h, patch, 3).mean(axis=(1, 3))


def quantize(features, codebook):
    """Nearest codebook entry per cell (L2, ties to the smallest index)."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != codebook.dim:
        raise ValueError("feature dimension does not match codebook")
    h, w = features.shape[:2]
    flat = features.reshape(-1, codebook.dim)
    # argmin of squared distance; np.argmin already takes the first minimum
    d2 = (
        np.sum(flat * flat, axis=1, keepdims=True)
        - 2.0 * flat @ codebook.entries.T
        + np.sum(codebook.entries * codebook.entries, axis=1)[None, :]
    )
    codes = np.argmin(d2, axis=1).astype(np.int64)
    return TokenGrid(h, w, codes)


def quantize_bruteforce(features, codebook):
    """Exhaustive linear-scan nearest neighbor (independent oracle)."""
    features = np.asarray(features, dtype=np.float64)
    h, w = features.shape[:2]
    flat = features.reshape(-1, codebook.dim)
    codes = np.empty(len(flat), dtype=np.int64)
    for i, f in enumerate(flat):
        best, best_d = 0, np.inf
        for v in range(codebook.size):
            d = float(np.sum((codebook.entries[v] - f) ** 2))
            if d < best_d:
                best, best_d = v, d
        codes[i] = best
    return TokenGrid(h, w, codes)


def decode(tokens, codebook, patch=DEFAULT_PATCH):
    """Fill each patch with its code's RGB value."""
    if tokens.codes.min() < 0 or tokens.codes.max() >= codebook.size:
        raise ValueError("token id outside codebook")
    colors = codebook.entries[tokens.codes].reshape(tokens.h, tokens.w, 3)
    img = np.repeat(np.repeat(colors, patch, axis=0), patch, axis=1)
    return img


def tokenize_image(image, codebook, patch=DEFAULT_PATCH):
    return quantize(encode_features(image, patch), codebook)
