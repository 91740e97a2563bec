"""3D grayscale volumes: raw-file IO, block-cached out-of-core access,
local environment extraction, and on-the-fly multiresolution views.

Canonical on-disk format is a little-endian raw dump plus a textual
key-value sidecar (``<base>.raw`` / ``<base>.meta``) declaring dims,
dtype, endianness and voxel spacing.  Array axis order is (x, y, z),
C-contiguous, so the z index varies fastest in the file.
"""

from __future__ import annotations

import os
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2"), "f32": np.dtype("<f4")}
DTYPE_NAMES = {np.dtype("uint8"): "u8", np.dtype("uint16"): "u16", np.dtype("float32"): "f32"}

DEFAULT_BLOCK_SIZE = 64
DEFAULT_MEMORY_BUDGET = 256 * 1024 * 1024
DEFAULT_CACHE_BUDGET = 256 * 1024 * 1024


class VolumeError(Exception):
    """Raised for malformed volume files or inconsistent metadata."""


@dataclass(frozen=True)
class Box:
    """Half-open axis-aligned box: lo <= p < hi componentwise."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ValueError("box corners must be triples")
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(max(0, h - l) for l, h in zip(self.lo, self.hi))

    @property
    def is_empty(self) -> bool:
        return any(h <= l for l, h in zip(self.lo, self.hi))

    def volume(self) -> int:
        s = self.shape
        return s[0] * s[1] * s[2]

    def contains(self, pos) -> bool:
        return all(l <= p < h for p, l, h in zip(pos, self.lo, self.hi))

    def intersect(self, other: "Box") -> "Box":
        return Box(
            tuple(max(a, b) for a, b in zip(self.lo, other.lo)),
            tuple(min(a, b) for a, b in zip(self.hi, other.hi)),
        )

    def overlaps(self, other: "Box") -> bool:
        return not self.intersect(other).is_empty

    def clip(self, dims) -> "Box":
        return self.intersect(Box((0, 0, 0), tuple(dims)))

    def dilate(self, r: int) -> "Box":
        return Box(tuple(l - r for l in self.lo), tuple(h + r for h in self.hi))

    def scale(self, f: int) -> "Box":
        return Box(tuple(l * f for l in self.lo), tuple(h * f for h in self.hi))

    def union_bbox(self, other: "Box") -> "Box":
        return Box(
            tuple(min(a, b) for a, b in zip(self.lo, other.lo)),
            tuple(max(a, b) for a, b in zip(self.hi, other.hi)),
        )

    @staticmethod
    def full(dims) -> "Box":
        return Box((0, 0, 0), tuple(dims))


@dataclass
class LocalEnvironment:
    """A K*K*K cube of voxel values centered on one grid position."""

    center: tuple[int, int, int]
    size: int
    values: np.ndarray  # shape (K, K, K), axis order (x, y, z)


def _check_env_size(size: int) -> int:
    size = int(size)
    if size <= 1 or size % 2 == 0:
        raise ValueError(f"environment size must be odd and > 1, got {size}")
    return size


class VoxelVolume:
    """Dense 3D grayscale grid, in-memory or file-backed."""

    dims: tuple[int, int, int]
    dtype: np.dtype
    spacing: tuple[float, float, float]

    @property
    def dtype_name(self) -> str:
        return DTYPE_NAMES[np.dtype(self.dtype.newbyteorder("="))]

    def read_region(self, box: Box) -> np.ndarray:
        raise NotImplementedError

    def value_at(self, pos) -> float:
        self._check_pos(pos)
        x, y, z = (int(p) for p in pos)
        region = self.read_region(Box((x, y, z), (x + 1, y + 1, z + 1)))
        return region[0, 0, 0].item()

    def __getitem__(self, pos):
        return self.value_at(pos)

    def _check_pos(self, pos) -> None:
        if len(pos) != 3:
            raise IndexError("position must be a triple")
        if not all(0 <= int(p) < d for p, d in zip(pos, self.dims)):
            raise IndexError(f"position {tuple(pos)} outside dims {self.dims}")

    def _check_box(self, box: Box) -> None:
        if box.is_empty:
            raise IndexError(f"empty region {box}")
        inside = box.clip(self.dims)
        if inside.lo != box.lo or inside.hi != box.hi:
            raise IndexError(f"region {box} outside dims {self.dims}")


class InMemoryVolume(VoxelVolume):
    def __init__(self, data: np.ndarray, spacing=(1.0, 1.0, 1.0)):
        data = np.ascontiguousarray(data)
        if data.ndim != 3:
            raise VolumeError("volume data must be 3-dimensional")
        if data.dtype.newbyteorder("=") not in DTYPE_NAMES:
            raise VolumeError(f"unsupported dtype {data.dtype}")
        _validate_values(data)
        self._data = data
        self.dims = tuple(int(d) for d in data.shape)
        self.dtype = data.dtype
        self.spacing = tuple(float(s) for s in spacing)

    def read_region(self, box: Box) -> np.ndarray:
        self._check_box(box)
        (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
        return np.array(self._data[x0:x1, y0:y1, z0:z1])


class FileBackedVolume(VoxelVolume):
    """Raw file accessed through an LRU cache of B*B*B blocks.

    Blocks are loaded with one positioned read per x-layer and cached as
    owned arrays, so resident memory stays bounded by the cache budget
    regardless of volume size.  Reads use os.pread and the cache has its
    own lock, so concurrent readers are safe.
    """

    def __init__(self, path, dims, dtype, spacing=(1.0, 1.0, 1.0),
                 block_size=DEFAULT_BLOCK_SIZE, cache_budget=DEFAULT_CACHE_BUDGET):
        self.path = os.fspath(path)
        self.dims = tuple(int(d) for d in dims)
        self.dtype = np.dtype(dtype)
        self.spacing = tuple(float(s) for s in spacing)
        self.block_size = int(block_size)
        self.cache_budget = int(cache_budget)
        self._fd = os.open(self.path, os.O_RDONLY)
        self._cache: OrderedDict[tuple, np.ndarray] = OrderedDict()
        self._cache_bytes = 0
        self._lock = threading.Lock()

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_fd"] = None
        state["_cache"] = None
        state["_lock"] = None
        state["_cache_bytes"] = 0
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._fd = os.open(self.path, os.O_RDONLY)
        self._cache = OrderedDict()
        self._cache_bytes = 0
        self._lock = threading.Lock()

    def _load_block(self, bx: int, by: int, bz: int) -> np.ndarray:
        B = self.block_size
        dx, dy, dz = self.dims
        x0, y0, z0 = bx * B, by * B, bz * B
        xs, ys, zs = min(B, dx - x0), min(B, dy - y0), min(B, dz - z0)
        item = self.dtype.itemsize
        block = np.empty((xs, ys, zs), dtype=self.dtype)
        span = ((ys - 1) * dz + zs) * item
        for ix in range(xs):
            offset = (((x0 + ix) * dy + y0) * dz + z0) * item
            buf = os.pread(self._fd, span, offset)
            if len(buf) != span:
                raise VolumeError(f"short read in {self.path} at offset {offset}")
            flat = np.frombuffer(buf, dtype=self.dtype)
            rows = np.lib.stride_tricks.as_strided(
                flat, shape=(ys, zs), strides=(dz * item, item))
            block[ix] = rows
        _validate_values(block)
        return block

    def _get_block(self, key: tuple) -> np.ndarray:
        with self._lock:
            block = self._cache.get(key)
            if block is not None:
                self._cache.move_to_end(key)
                return block
        block = self._load_block(*key)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = block
                self._cache_bytes += block.nbytes
                while self._cache_bytes > self.cache_budget and len(self._cache) > 1:
                    _, old = self._cache.popitem(last=False)
                    self._cache_bytes -= old.nbytes
            return self._cache[key]

    def read_region(self, box: Box) -> np.ndarray:
        self._check_box(box)
        B = self.block_size
        (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
        out = np.empty(box.shape, dtype=self.dtype)
        for bx in range(x0 // B, (x1 - 1) // B + 1):
            for by in range(y0 // B, (y1 - 1) // B + 1):
                for bz in range(z0 // B, (z1 - 1) // B + 1):
                    block = self._get_block((bx, by, bz))
                    gx0, gy0, gz0 = max(x0, bx * B), max(y0, by * B), max(z0, bz * B)
                    gx1 = min(x1, bx * B + block.shape[0])
                    gy1 = min(y1, by * B + block.shape[1])
                    gz1 = min(z1, bz * B + block.shape[2])
                    out[gx0 - x0:gx1 - x0, gy0 - y0:gy1 - y0, gz0 - z0:gz1 - z0] = \
                        block[gx0 - bx * B:gx1 - bx * B,
                              gy0 - by * B:gy1 - by * B,
                              gz0 - bz * B:gz1 - bz * B]
        return out


def _validate_values(data: np.ndarray) -> None:
    if data.dtype.kind == "f":
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains non-finite values")
        if np.any(data < 0):
            raise VolumeError("volume contains negative values")


def _resolve_paths(path) -> tuple[str, str]:
    path = os.fspath(path)
    base, ext = os.path.splitext(path)
    if ext in (".raw", ".meta"):
        return base + ".raw", base + ".meta"
    return path + ".raw", path + ".meta"


def write_metadata(path, dims, dtype_name, spacing=(1.0, 1.0, 1.0)) -> None:
    from . import textkv
    textkv.dump({
        "dims": " ".join(str(int(d)) for d in dims),
        "dtype": dtype_name,
        "endianness": "little",
        "spacing": " ".join(repr(float(s)) for s in spacing),
    }, path)


def read_metadata(path) -> dict:
    from . import textkv
    raw = textkv.load(path)
    try:
        dims = tuple(int(v) for v in raw["dims"].split())
        dtype_name = raw["dtype"]
        endianness = raw.get("endianness", "little")
        spacing = tuple(float(v) for v in raw.get("spacing", "1 1 1").split())
    except (KeyError, ValueError) as exc:
        raise VolumeError(f"malformed metadata {path}: {exc}") from exc
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeError(f"metadata {path}: dims must be three positive integers")
    if dtype_name not in DTYPES:
        raise VolumeError(f"metadata {path}: unknown dtype {dtype_name!r}")
    if endianness != "little":
        raise VolumeError(f"metadata {path}: only little-endian raw files are supported")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise VolumeError(f"metadata {path}: spacing must be three positive reals")
    return {"dims": dims, "dtype": dtype_name, "spacing": spacing}


def load_volume(path, memory_budget=DEFAULT_MEMORY_BUDGET,
                block_size=DEFAULT_BLOCK_SIZE,
                cache_budget=DEFAULT_CACHE_BUDGET,
                force_file_backed=False) -> VoxelVolume:
    """Open a raw+meta volume; larger than ``memory_budget`` stays on disk."""
    raw_path, meta_path = _resolve_paths(path)
    if not os.path.exists(meta_path):
        raise VolumeError(f"missing metadata file {meta_path}")
    if not os.path.exists(raw_path):
        raise VolumeError(f"missing raw file {raw_path}")
    meta = read_metadata(meta_path)
    dims, dtype = meta["dims"], DTYPES[meta["dtype"]]
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise VolumeError(
            f"{raw_path}: size mismatch, dims {dims} x {meta['dtype']} "
            f"needs {expected} bytes but file has {actual}")
    if force_file_backed or expected > memory_budget:
        return FileBackedVolume(raw_path, dims, dtype, meta["spacing"],
                                block_size=block_size, cache_budget=cache_budget)
    data = np.fromfile(raw_path, dtype=dtype).reshape(dims)
    return InMemoryVolume(data, meta["spacing"])


def save_volume(data: np.ndarray, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write ``data`` as <base>.raw plus <base>.meta, atomically."""
    raw_path, meta_path = _resolve_paths(path)
    dtype = np.dtype(data.dtype).newbyteorder("=")
    if dtype not in DTYPE_NAMES:
        raise VolumeError(f"unsupported output dtype {data.dtype}")
    _validate_values(data)
    tmp = raw_path + ".tmp"
    np.ascontiguousarray(data, dtype=dtype.newbyteorder("<")).tofile(tmp)
    os.replace(tmp, raw_path)
    write_metadata(meta_path, data.shape, DTYPE_NAMES[dtype], spacing)


def extract_environment(vol, center, size: int) -> LocalEnvironment | None:
    """K*K*K cube around ``center``; None when it does not fit entirely."""
    size = _check_env_size(size)
    half = size // 2
    lo = tuple(int(c) - half for c in center)
    hi = tuple(int(c) + half + 1 for c in center)
    dims = vol.dims
    if any(l < 0 for l in lo) or any(h > d for h, d in zip(hi, dims)):
        return None
    values = vol.read_region(Box(lo, hi))
    return LocalEnvironment(tuple(int(c) for c in center), size, values)


def interior_box(dims, size: int, region: Box | None = None) -> Box:
    """Positions whose K-environment fits, optionally restricted to a box."""
    half = _check_env_size(size) // 2
    box = Box(tuple(half for _ in dims), tuple(d - half for d in dims))
    if region is not None:
        box = box.intersect(region)
    return box


def iterate_positions(vol, size: int, region: Box | None = None):
    """Yield every position with a full environment, row-major order."""
    box = interior_box(vol.dims, size, region)
    if box.is_empty:
        return
    (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
    for x in range(x0, x1):
        for y in range(y0, y1):
            for z in range(z0, z1):
                yield (x, y, z)


def count_positions(dims, size: int, region: Box | None = None) -> int:
    return interior_box(dims, size, region).volume()


# ---------------------------------------------------------------------------
# Multiresolution
# ---------------------------------------------------------------------------

def covered_set(alpha, level: int, source_level: int, dims) -> list[tuple[int, int, int]]:
    """Fine positions averaged into coarse voxel ``alpha``, clipped to the grid."""
    if not 1 <= level <= source_level:
        raise ValueError(f"level {level} out of range [1, {source_level}]")
    f = 2 ** (source_level - level)
    base = tuple(int(a) * f for a in alpha)
    ranges = [range(b, min(b + f, d)) for b, d in zip(base, dims)]
    if any(len(r) == 0 for r in ranges):
        raise ValueError(f"coarse position {tuple(alpha)} outside the grid")
    return [(x, y, z) for x in ranges[0] for y in ranges[1] for z in ranges[2]]


def _pool_axis_sum(arr: np.ndarray, axis: int, factor: int) -> np.ndarray:
    n = arr.shape[axis]
    idx = np.arange(0, n, factor)
    return np.add.reduceat(arr, idx, axis=axis)


class MultiresView:
    """Level-l view of a finer volume; coarse values are Haar means of the
    covered fine voxels, computed on the fly and never stored."""

    def __init__(self, source: VoxelVolume, level: int, source_level: int):
        if not 1 <= level <= source_level:
            raise ValueError(f"level {level} out of range [1, {source_level}]")
        self.source = source
        self.level = int(level)
        self.source_level = int(source_level)
        self.factor = 2 ** (self.source_level - self.level)
        self.dims = tuple(-(-d // self.factor) for d in source.dims)
        self.spacing = tuple(s * self.factor for s in source.spacing)

    def read_region(self, box: Box) -> np.ndarray:
        if box.is_empty:
            raise IndexError(f"empty region {box}")
        if box.clip(self.dims) != box:
            raise IndexError(f"region {box} outside level dims {self.dims}")
        f = self.factor
        if f == 1:
            return self.source.read_region(box).astype(np.float64)
        fine_lo = tuple(l * f for l in box.lo)
        fine_hi = tuple(min(h * f, d) for h, d in zip(box.hi, self.source.dims))
        fine = self.source.read_region(Box(fine_lo, fine_hi)).astype(np.float64)
        sums = fine
        counts = []
        for axis in range(3):
            n = fine.shape[axis]
            sums = _pool_axis_sum(sums, axis, f)
            edges = np.arange(0, n, f)
            counts.append(np.minimum(edges + f, n) - edges)
        denom = counts[0][:, None, None] * counts[1][None, :, None] * counts[2][None, None, :]
        return sums / denom

    def value_at(self, pos) -> float:
        if not all(0 <= int(p) < d for p, d in zip(pos, self.dims)):
            raise IndexError(f"position {tuple(pos)} outside level dims {self.dims}")
        p = tuple(int(v) for v in pos)
        return self.read_region(Box(p, tuple(v + 1 for v in p)))[0, 0, 0].item()

    def __getitem__(self, pos):
        return self.value_at(pos)


def downsample_value(view: MultiresView, alpha) -> float:
    """Arithmetic mean of the fine voxels covered by coarse position alpha."""
    return view.value_at(alpha)
