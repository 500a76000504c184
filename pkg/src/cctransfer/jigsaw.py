"""Occluded jigsaw puzzle samples.

A sample is a square crop cut into a ``grid x grid`` layout of cells; each
cell gives one tile at a random offset inside it. Up to ``max_occluders``
tiles are swapped for tiles cut from a donor image, the tile slots are
reordered by one permutation of the set, and each tile is standardized on
its own.

Random draws per sample, in order: main crop offset, grayscale flag,
occluder count, occluded cells, main tile offsets, permutation index, donor
crop offset, donor tile offsets. Donor draws come last so swapping the
donor image never disturbs anything drawn from the main image.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import BadMagicError, RawImage, TruncatedError, list_images, read_image_pnm
from .permset import PermutationSet
from .rng import Rng

JPP_MAGIC = b"JP1\x00"
_REC = struct.Struct("<IIBBII")


@dataclass(frozen=True)
class PuzzleConfig:
    grid: int = 3
    crop_size: int = 225
    tile_size: int = 64
    max_occluders: int = 2
    grayscale_prob: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.grid < 1 or self.crop_size < self.grid:
            raise ValueError("crop must hold at least one pixel per cell")
        if not 1 <= self.tile_size <= self.cell_size:
            raise ValueError(f"tile_size {self.tile_size} must be within cell_size {self.cell_size}")
        if not 0.0 <= self.grayscale_prob <= 1.0:
            raise ValueError("grayscale_prob must lie in [0, 1]")
        if not 0 <= self.max_occluders < self.grid ** 2:
            raise ValueError("max_occluders must be below the number of tiles")

    @property
    def cell_size(self) -> int:
        return self.crop_size // self.grid

    @property
    def n_tiles(self) -> int:
        return self.grid ** 2


@dataclass(frozen=True)
class PuzzleSample:
    tiles: np.ndarray  # (n_tiles, tile, tile, channels) float32
    perm_index: int
    occ_mask: int  # bit j set when output slot j holds a donor tile
    n_occluders: int
    is_gray: bool
    source_id: int = 0
    donor_id: int = 0

    def __eq__(self, other):
        if not isinstance(other, PuzzleSample):
            return NotImplemented
        return (self.perm_index, self.occ_mask, self.n_occluders, self.is_gray,
                self.source_id, self.donor_id) == (other.perm_index, other.occ_mask,
                other.n_occluders, other.is_gray, other.source_id, other.donor_id) \
            and self.tiles.dtype == other.tiles.dtype and np.array_equal(self.tiles, other.tiles)


def to_grayscale(img: RawImage) -> RawImage:
    """BT.601 luma replicated into all three channels."""
    if img.channels != 3:
        raise ValueError(f"to_grayscale expects 3 channels, got {img.channels}")
    px = img.pixels.astype(np.float64)
    y = np.floor(0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2] + 0.5)
    y = np.clip(y, 0, 255).astype(np.uint8)
    return RawImage(img.height, img.width, 3, np.repeat(y[..., None], 3, axis=2))


def normalize_tile(tile, eps: float = 1e-8) -> np.ndarray:
    """Zero mean, unit (population) std over all entries; constant tiles become zeros."""
    t = np.asarray(tile, dtype=np.float64)
    if t.size == 0:
        raise ValueError("empty tile")
    mu = t.mean()
    centered = t - mu
    sd = np.sqrt(np.mean(centered * centered))
    if sd < eps:
        return np.zeros_like(t)
    return centered / sd


def _match_channels(px: np.ndarray, channels: int) -> np.ndarray:
    if px.shape[2] == channels:
        return px
    if channels == 3:
        return np.repeat(px, 3, axis=2)
    return to_grayscale(RawImage.from_array(px)).pixels[:, :, :1]


def _crop(img: RawImage, size: int, rng: Rng) -> np.ndarray:
    y = rng.below(img.height - size + 1)
    x = rng.below(img.width - size + 1)
    return img.pixels[y:y + size, x:x + size]


def _tile_offsets(cfg: PuzzleConfig, cells, rng: Rng) -> dict:
    slack = cfg.cell_size - cfg.tile_size + 1
    return {c: (rng.below(slack), rng.below(slack)) for c in cells}


def _cut(crop: np.ndarray, cfg: PuzzleConfig, cell: int, off) -> np.ndarray:
    r, c = divmod(cell, cfg.grid)
    y = r * cfg.cell_size + off[0]
    x = c * cfg.cell_size + off[1]
    return crop[y:y + cfg.tile_size, x:x + cfg.tile_size]


def make_puzzle(main: RawImage, donor: RawImage, ps: PermutationSet, cfg: PuzzleConfig, rng: Rng,
                perm_index: int | None = None, source_id: int = 0, donor_id: int = 0) -> PuzzleSample:
    """Build one occluded puzzle sample.

    ``perm_index`` overrides the drawn permutation (the draw still happens so
    the stream stays aligned).
    """
    if len(ps) == 0:
        raise ValueError("empty permutation set")
    if ps.n_tiles != cfg.n_tiles:
        raise ValueError(f"permutation set has {ps.n_tiles} tiles, grid needs {cfg.n_tiles}")
    for name, im in (("main", main), ("donor", donor)):
        if im.height < cfg.crop_size or im.width < cfg.crop_size:
            raise ValueError(f"{name} image {im.height}x{im.width} smaller than crop {cfg.crop_size}")

    crop = _crop(main, cfg.crop_size, rng)
    is_gray = rng.uniform() < cfg.grayscale_prob
    n_occ = rng.below(cfg.max_occluders + 1)
    occluded = rng.sample(cfg.n_tiles, n_occ)
    offsets = _tile_offsets(cfg, range(cfg.n_tiles), rng)
    drawn = rng.below(len(ps))
    if perm_index is None:
        perm_index = drawn
    donor_crop = _crop(donor, cfg.crop_size, rng)
    donor_offsets = _tile_offsets(cfg, occluded, rng)

    channels = main.channels
    donor_crop = _match_channels(donor_crop, channels)
    if is_gray and channels == 3:
        crop = to_grayscale(RawImage.from_array(crop)).pixels
        donor_crop = to_grayscale(RawImage.from_array(donor_crop)).pixels

    cells = []
    for cell in range(cfg.n_tiles):
        if cell in donor_offsets:
            cells.append(_cut(donor_crop, cfg, cell, donor_offsets[cell]))
        else:
            cells.append(_cut(crop, cfg, cell, offsets[cell]))

    perm = ps[perm_index]
    occ_set = set(occluded)
    tiles = np.empty((cfg.n_tiles, cfg.tile_size, cfg.tile_size, channels), dtype=np.float32)
    occ_mask = 0
    for slot in range(cfg.n_tiles):
        src = int(perm[slot])
        tiles[slot] = normalize_tile(cells[src].astype(np.float64) / 255.0)
        if src in occ_set:
            occ_mask |= 1 << slot
    return PuzzleSample(tiles, int(perm_index), occ_mask, n_occ, bool(is_gray), source_id, donor_id)


def iter_samples(images: list[RawImage], ps: PermutationSet, cfg: PuzzleConfig, count: int,
                 seed: int | None = None):
    """Yield ``count`` samples; sample ``i`` uses its own substream of ``seed``.

    Main and donor are drawn uniformly; the donor differs from the main image
    whenever more than one image is available.
    """
    if not images:
        raise ValueError("no images")
    seed = cfg.seed if seed is None else seed
    n = len(images)
    for i in range(count):
        rng = Rng.substream(seed, i)
        src = rng.below(n)
        donor = (src + 1 + rng.below(n - 1)) % n if n > 1 else src
        yield make_puzzle(images[src], images[donor], ps, cfg, rng, source_id=src, donor_id=donor)


def generate_samples(images, ps, cfg, count, seed=None) -> list[PuzzleSample]:
    return list(iter_samples(images, ps, cfg, count, seed))


def emit_shard(samples, path, grid: int | None = None, tile_size: int | None = None,
               channels: int | None = None) -> int:
    """Write samples (any iterable, consumed once) as a JPP1 shard.

    Header: magic, u32 grid, u32 tile_size, u32 channels, u32 count. Each
    record: u32 perm_index, u32 occ_mask, u8 n_occluders, u8 is_gray,
    u32 source_id, u32 donor_id, then the tiles as f32.
    Geometry arguments are only needed for an empty shard. Returns the count.
    """
    it = iter(samples)
    first = next(it, None)
    if first is not None:
        n_t, tile_size, _, channels = first.tiles.shape
        grid = int(round(n_t ** 0.5))
    if grid is None or tile_size is None or channels is None:
        raise ValueError("empty shard needs explicit grid, tile_size and channels")
    shape = (grid * grid, tile_size, tile_size, channels)
    count = 0
    with open(path, "wb") as fh:
        fh.write(JPP_MAGIC + struct.pack("<IIII", grid, tile_size, channels, 0))
        for s in _chain(first, it):
            if s.tiles.shape != shape:
                raise ValueError(f"sample tiles {s.tiles.shape} do not match shard geometry {shape}")
            fh.write(_REC.pack(s.perm_index, s.occ_mask, s.n_occluders, int(s.is_gray),
                               s.source_id, s.donor_id))
            fh.write(np.ascontiguousarray(s.tiles, dtype="<f4").tobytes())
            count += 1
        fh.seek(16)
        fh.write(struct.pack("<I", count))
    return count


def _chain(first, rest):
    if first is not None:
        yield first
        yield from rest


def read_shard(path) -> tuple[dict, list[PuzzleSample]]:
    buf = Path(path).read_bytes()
    if buf[:4] != JPP_MAGIC:
        raise BadMagicError(f"{path}: expected magic {JPP_MAGIC!r}, found {buf[:4]!r}")
    if len(buf) < 20:
        raise TruncatedError(f"{path}: JPP1 header truncated")
    grid, tile, channels, count = struct.unpack("<IIII", buf[4:20])
    shape = (grid * grid, tile, tile, channels)
    tile_bytes = 4 * int(np.prod(shape))
    rec = _REC.size + tile_bytes
    if len(buf) != 20 + count * rec:
        raise TruncatedError(f"{path}: header declares {count} samples, payload holds {(len(buf) - 20) / rec:g}")
    samples = []
    off = 20
    for _ in range(count):
        pi, mask, nocc, gray, src, don = _REC.unpack_from(buf, off)
        off += _REC.size
        tiles = np.frombuffer(buf[off:off + tile_bytes], dtype="<f4").astype(np.float32).reshape(shape)
        off += tile_bytes
        samples.append(PuzzleSample(tiles, pi, mask, nocc, bool(gray), src, don))
    header = {"grid": grid, "tile_size": tile, "channels": channels, "count": count}
    return header, samples


def load_images(images_dir) -> list[RawImage]:
    paths = list_images(images_dir)
    if not paths:
        raise ValueError(f"no .pgm/.ppm images in {images_dir}")
    return [read_image_pnm(p) for p in paths]
