"""On-disk formats and feature-map pooling.

Binary layouts (all little-endian):

* FVE1 feature matrix: magic ``FV1\\0``, u32 n_samples, u32 n_dims, then
  f32 payload, row-major.
* LBL1 label vector: magic ``LB1\\0``, u32 n_samples, u32 n_classes, then
  u32 labels.
* FMP1 feature map: magic ``FM1\\0``, u32 n, channels, height, width, then
  f32 payload in (n, c, h, w) order.
* Images are binary PNM (P5 grayscale, P6 RGB) with maxval 255.

In memory everything is float64; f32 only exists on disk.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FVE_MAGIC = b"FV1\x00"
LBL_MAGIC = b"LB1\x00"
FMP_MAGIC = b"FM1\x00"


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"feature matrix must be 2-D and non-empty, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("feature matrix contains NaN or Inf")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_dims(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"feature map must be 4-D (n, c, h, w) with all dims >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("feature map contains NaN or Inf")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class LabelVector:
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise ValueError("labels must be 1-D")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        labels = labels.astype(np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class RawImage:
    height: int
    width: int
    channels: int
    pixels: np.ndarray  # uint8, shape (height, width, channels)

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.size != self.height * self.width * self.channels:
            raise ValueError("pixel count does not match height*width*channels")
        px = px.reshape(self.height, self.width, self.channels)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, arr) -> "RawImage":
        arr = np.asarray(arr, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(arr.shape[0], arr.shape[1], arr.shape[2], arr)


def _read_exact(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise TruncatedError(f"{what}: need {n} bytes at offset {offset}, file has {len(buf)}")
    return buf[offset:offset + n]


def _check_magic(buf: bytes, magic: bytes, path) -> None:
    if buf[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")


def write_features(fm: FeatureMatrix, path) -> None:
    header = FVE_MAGIC + struct.pack("<II", fm.n_samples, fm.n_dims)
    payload = np.ascontiguousarray(fm.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_features(path) -> FeatureMatrix:
    buf = Path(path).read_bytes()
    _check_magic(buf, FVE_MAGIC, path)
    n, d = struct.unpack("<II", _read_exact(buf, 4, 8, "FVE1 header"))
    payload = _read_exact(buf, 12, 4 * n * d, "FVE1 payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, d)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{path}: non-finite entry in payload")
    return FeatureMatrix(data)


def write_labels(lv: LabelVector, path) -> None:
    header = LBL_MAGIC + struct.pack("<II", lv.n_samples, lv.n_classes)
    Path(path).write_bytes(header + lv.labels.astype("<u4").tobytes())


def read_labels(path) -> LabelVector:
    buf = Path(path).read_bytes()
    _check_magic(buf, LBL_MAGIC, path)
    n, k = struct.unpack("<II", _read_exact(buf, 4, 8, "LBL1 header"))
    payload = _read_exact(buf, 12, 4 * n, "LBL1 payload")
    labels = np.frombuffer(payload, dtype="<u4").astype(np.int64)
    if labels.size and labels.max() >= k:
        raise FormatError(f"{path}: label {labels.max()} out of range for {k} classes")
    return LabelVector(labels, k)


def write_feature_map(fm: FeatureMap, path) -> None:
    header = FMP_MAGIC + struct.pack("<IIII", *fm.data.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(fm.data, dtype="<f4").tobytes())


def read_feature_map(path) -> FeatureMap:
    buf = Path(path).read_bytes()
    _check_magic(buf, FMP_MAGIC, path)
    shape = struct.unpack("<IIII", _read_exact(buf, 4, 16, "FMP1 header"))
    payload = _read_exact(buf, 20, 4 * int(np.prod(shape)), "FMP1 payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{path}: non-finite entry in payload")
    return FeatureMap(data)


def _pnm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Parse ``count`` whitespace-separated header integers, skipping comments.

    Returns the values and the offset of the raster (after one whitespace byte).
    """
    values = []
    i = 2
    while len(values) < count:
        if i >= len(buf):
            raise TruncatedError("PNM header ended early")
        c = buf[i:i + 1]
        if c == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and buf[j:j + 1].isdigit():
                j += 1
            if j == i:
                raise FormatError(f"unexpected byte {c!r} in PNM header")
            values.append(int(buf[i:j]))
            i = j
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise TruncatedError("PNM header not terminated by whitespace")
    return values, i + 1


def read_image_pnm(path) -> RawImage:
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"{path}: only binary P5/P6 are supported, found {magic!r}")
    channels = 1 if magic == b"P5" else 3
    (width, height, maxval), offset = _pnm_tokens(buf, 3)
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: maxval must be 255, found {maxval}")
    n = width * height * channels
    raster = _read_exact(buf, offset, n, "PNM raster")
    return RawImage(height, width, channels, np.frombuffer(raster, dtype=np.uint8))


def write_image_pnm(img: RawImage, path) -> None:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.pixels.tobytes())


def pool_windows(size: int, out: int) -> list[tuple[int, int]]:
    """Half-open windows ``[floor(i*size/out), ceil((i+1)*size/out))``."""
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def adaptive_max_pool(fm: FeatureMap, out_h: int, out_w: int) -> FeatureMatrix:
    """Max-pool each map to ``out_h x out_w`` and flatten.

    Flattened index is ``(c * out_h + i) * out_w + j`` (channel-major, then
    row, then column).
    """
    if not (1 <= out_h <= fm.height and 1 <= out_w <= fm.width):
        raise ValueError(
            f"pool size {out_h}x{out_w} must be within input {fm.height}x{fm.width}"
        )
    x = fm.data
    out = np.empty((fm.n_samples, fm.channels, out_h, out_w))
    for i, (r0, r1) in enumerate(pool_windows(fm.height, out_h)):
        for j, (c0, c1) in enumerate(pool_windows(fm.width, out_w)):
            out[:, :, i, j] = x[:, :, r0:r1, c0:c1].max(axis=(2, 3))
    return FeatureMatrix(out.reshape(fm.n_samples, -1))


def load_manifest(path) -> dict:
    """Read a dataset manifest and resolve its paths relative to the manifest.

    Keys: ``features`` (required), ``labels``, ``inputs``, ``images_dir``
    (each optional / may be null).
    """
    path = Path(path)
    raw = json.loads(path.read_text())
    if "features" not in raw and "images_dir" not in raw:
        raise FormatError(f"{path}: manifest needs 'features' or 'images_dir'")
    out = {"name": raw.get("name", path.stem)}
    for key in ("features", "labels", "inputs", "images_dir"):
        val = raw.get(key)
        out[key] = None if val is None else str((path.parent / val).resolve())
    return out


def write_manifest(path, features=None, labels=None, inputs=None, images_dir=None, name=None) -> None:
    path = Path(path)
    entry = {"features": features, "labels": labels, "images_dir": images_dir}
    if inputs is not None:
        entry["inputs"] = inputs
    if name is not None:
        entry["name"] = name
    for key, val in list(entry.items()):
        if val is not None and key != "name":
            p = Path(val)
            try:
                entry[key] = str(p.resolve().relative_to(path.parent.resolve()))
            except ValueError:
                entry[key] = str(p.resolve())
    path.write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")


def list_images(images_dir) -> list[Path]:
    d = Path(images_dir)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".pnm"))

