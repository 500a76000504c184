"""HOG descriptors and bag-of-visual-words encodings.

Gradients use centered ``[-1, 0, 1]`` differences with edge replication.
Each pixel votes its gradient magnitude into the two orientation bins
nearest its angle (linear interpolation between bin centers, which sit at
``b * bin_width``; orientations wrap). Blocks of ``block_size x block_size``
cells are L2-hys normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import FeatureMatrix, RawImage
from .jigsaw import to_grayscale
from .kmeans import Codebook, KMeansConfig, assign, lloyd_fit
from .rng import Rng


@dataclass(frozen=True)
class HogConfig:
    cell_size: int = 8
    n_bins: int = 9
    block_size: int = 2
    block_stride: int = 1
    signed: bool = False
    clip: float | None = 0.2

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if self.cell_size < 2:
            raise ValueError("cell_size must be >= 2")
        if self.block_size < 1 or self.block_stride < 1:
            raise ValueError("block_size and block_stride must be >= 1")

    @property
    def span(self) -> float:
        return 360.0 if self.signed else 180.0


@dataclass(frozen=True)
class HogDescriptor:
    cells: np.ndarray  # (cells_y, cells_x, n_bins)
    blocks: np.ndarray  # (blocks_y, blocks_x, block_size**2 * n_bins)

    @property
    def vector(self) -> np.ndarray:
        return self.blocks.reshape(-1)

    @property
    def block_vectors(self) -> np.ndarray:
        return self.blocks.reshape(-1, self.blocks.shape[-1])


def gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical centered differences with replicated borders."""
    p = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx, gy


def orientation_votes(gx, gy, cfg: HogConfig):
    """Per-pixel (low bin, high bin, low weight, high weight)."""
    mag = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % cfg.span
    pos = ang / (cfg.span / cfg.n_bins)
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo %= cfg.n_bins
    hi = (lo + 1) % cfg.n_bins
    return lo, hi, mag * (1.0 - frac), mag * frac


def cell_histograms(img: np.ndarray, cfg: HogConfig) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    ny, nx = img.shape[0] // cfg.cell_size, img.shape[1] // cfg.cell_size
    if ny < 1 or nx < 1:
        raise ValueError(f"image {img.shape} smaller than one cell ({cfg.cell_size})")
    gx, gy = gradients(img)
    lo, hi, wlo, whi = orientation_votes(gx, gy, cfg)
    cs = cfg.cell_size
    hist = np.zeros((ny, nx, cfg.n_bins))
    cy = np.repeat(np.arange(ny), cs)
    cx = np.repeat(np.arange(nx), cs)
    h, w = ny * cs, nx * cs
    rows = np.broadcast_to(cy[:, None], (h, w))
    cols = np.broadcast_to(cx[None, :], (h, w))
    np.add.at(hist, (rows, cols, lo[:h, :w]), wlo[:h, :w])
    np.add.at(hist, (rows, cols, hi[:h, :w]), whi[:h, :w])
    return hist


def l2_hys(v: np.ndarray, clip: float | None) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        return np.zeros_like(v)
    v = v / n
    if clip is None:
        return v
    v = np.minimum(v, clip)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def hog_array(img: np.ndarray, cfg: HogConfig = HogConfig()) -> HogDescriptor:
    """HOG of a 2-D intensity array."""
    hist = cell_histograms(img, cfg)
    ny, nx, _ = hist.shape
    b, s = cfg.block_size, cfg.block_stride
    if ny < b or nx < b:
        raise ValueError(f"image too small: {ny}x{nx} cells, block needs {b}x{b}")
    by, bx = (ny - b) // s + 1, (nx - b) // s + 1
    blocks = np.empty((by, bx, b * b * cfg.n_bins))
    for i in range(by):
        for j in range(bx):
            v = hist[i * s:i * s + b, j * s:j * s + b].reshape(-1)
            blocks[i, j] = l2_hys(v, cfg.clip)
    return HogDescriptor(hist, blocks)


def image_intensity(img: RawImage) -> np.ndarray:
    if img.channels == 3:
        img = to_grayscale(img)
    return img.pixels[:, :, 0].astype(np.float64)


def hog_descriptor(img: RawImage, cfg: HogConfig = HogConfig()) -> HogDescriptor:
    """HOG of an image; color input is converted to BT.601 luma first."""
    return hog_array(image_intensity(img), cfg)


def build_vocab(descriptors_per_image, k: int = 64, seed: int = 0, max_iters: int = 100,
                threads: int = 1) -> Codebook:
    """k-means vocabulary over the block vectors of all images."""
    stacked = np.concatenate([np.asarray(d, dtype=np.float64) for d in descriptors_per_image])
    cfg = KMeansConfig(k=k, max_iters=max_iters, seed=seed)
    return lloyd_fit(stacked, cfg, Rng(seed), threads=threads)


def bow_encode(descriptors_per_image, vocab: Codebook) -> FeatureMatrix:
    """L1-normalized visual-word histogram per image."""
    rows = []
    for i, d in enumerate(descriptors_per_image):
        d = np.asarray(d, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] == 0:
            raise ValueError(f"image {i} has no block vectors")
        if d.shape[1] != vocab.n_dims:
            raise ValueError(f"image {i}: descriptor dim {d.shape[1]} != vocabulary dim {vocab.n_dims}")
        words = assign(d, vocab).labels
        rows.append(np.bincount(words, minlength=vocab.k) / len(words))
    return FeatureMatrix(np.array(rows))
