"""Hand-rolled feature stack for 64x64 grayscale patches.

Three blocks, concatenated per patch:
  - 8x8 grid of block-mean intensities, patch-mean subtracted (64)
  - 8-bin gradient orientation histograms over a 4x4 cell grid,
    magnitude weighted (128)
  - gradient magnitude means over the same 4x4 cells (16)
for 208 features total. Everything is plain central differences and
box pooling; no smoothing, no interpolation.
"""

import numpy as np

PATCH = 64
N_ORI_BINS = 8
FEATURE_DIM = 64 + 16 * N_ORI_BINS + 16


def patch_features(patches: np.ndarray) -> np.ndarray:
    """(n, 64, 64) uint8 -> (n, 208) float64."""
    x = np.asarray(patches, dtype=np.float64).reshape(-1, PATCH, PATCH) / 255.0
    n = len(x)

    blocks = x.reshape(n, 8, 8, 8, 8).mean(axis=(2, 4)).reshape(n, 64)
    blocks = blocks - blocks.mean(axis=1, keepdims=True)

    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:, :, 1:-1] = (x[:, :, 2:] - x[:, :, :-2]) * 0.5
    dy[:, 1:-1, :] = (x[:, 2:, :] - x[:, :-2, :]) * 0.5
    mag = np.hypot(dx, dy)
    ori = np.arctan2(dy, dx)

    bins = np.floor((ori + np.pi) / (2.0 * np.pi) * N_ORI_BINS).astype(np.int64)
    np.clip(bins, 0, N_ORI_BINS - 1, out=bins)

    # cell layout: 4x4 cells of 16x16 px
    hist = np.empty((n, 16, N_ORI_BINS))
    cell_mag = mag.reshape(n, 4, 16, 4, 16)
    cell_bins = bins.reshape(n, 4, 16, 4, 16)
    for b in range(N_ORI_BINS):
        w = cell_mag * (cell_bins == b)
        hist[:, :, b] = w.sum(axis=(2, 4)).reshape(n, 16)
    hist /= 16.0 * 16.0

    mag_means = cell_mag.mean(axis=(2, 4)).reshape(n, 16)

    return np.concatenate([blocks, hist.reshape(n, -1), mag_means], axis=1)
