"""Synthetic test volumes: geometric primitives rasterized into a grayscale
volume plus a per-primitive ground-truth label volume.

The phantom spec is a JSON document:

    {
      "dims": [64, 64, 64],
      "dtype": "u8",
      "background": 30,
      "noise": {"sigma": 10.0, "seed": 7},
      "primitives": [
        {"shape": "slab", "axis": "x", "center": 32, "thickness": 3, "value": 200},
        {"shape": "sphere", "center": [32, 32, 32], "radius": 10, "value": 180},
        {"shape": "box", "lo": [4, 4, 4], "hi": [12, 20, 20], "value": 150},
        {"shape": "cylinder", "axis": "z", "center": [16, 16], "radius": 3, "value": 220},
        {"shape": "helix", "axis": "z", "center": [32, 32], "radius": 20,
         "tube_radius": 2, "pitch": 24, "value": 210}
      ]
    }

Rasterization is deterministic; noise uses the declared seed, so repeated
generation is bit-identical.  Primitive list order defines label ids 1..n.
"""

from __future__ import annotations

import json

import numpy as np

from .volume import DTYPES, InMemoryVolume

_AXES = {"x": 0, "y": 1, "z": 2}


class PhantomError(Exception):
    """Raised for malformed phantom specs or out-of-bounds primitives."""


def _grids(dims):
    return np.meshgrid(
        np.arange(dims[0], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[2], dtype=np.float64),
        indexing="ij",
    )


def _slab_mask(dims, prim):
    thickness = float(prim["thickness"])
    if "normal" in prim:
        normal = np.asarray(prim["normal"], dtype=np.float64)
        normal = normal / np.linalg.norm(normal)
        center = np.asarray(prim["center"], dtype=np.float64)
        gx, gy, gz = _grids(dims)
        dist = (gx - center[0]) * normal[0] + (gy - center[1]) * normal[1] \
            + (gz - center[2]) * normal[2]
        return np.abs(dist) <= thickness / 2.0
    axis = _AXES[prim.get("axis", "x")]
    center = float(prim["center"])
    lo = int(np.ceil(center - thickness / 2.0))
    hi = int(np.floor(center + thickness / 2.0))
    if lo < 0 or hi >= dims[axis]:
        raise PhantomError(f"slab [{lo}, {hi}] exceeds axis extent {dims[axis]}")
    coords = np.arange(dims[axis])
    axmask = (coords >= lo) & (coords <= hi)
    shape = [1, 1, 1]
    shape[axis] = dims[axis]
    return np.broadcast_to(axmask.reshape(shape), dims).copy()


def _sphere_mask(dims, prim):
    center = np.asarray(prim["center"], dtype=np.float64)
    radius = float(prim["radius"])
    if np.any(center - radius < -0.5) or np.any(center + radius > np.asarray(dims) - 0.5):
        raise PhantomError("sphere exceeds volume bounds")
    gx, gy, gz = _grids(dims)
    d2 = (gx - center[0]) ** 2 + (gy - center[1]) ** 2 + (gz - center[2]) ** 2
    return d2 <= radius * radius


def _box_mask(dims, prim):
    lo = [int(v) for v in prim["lo"]]
    hi = [int(v) for v in prim["hi"]]
    if any(l < 0 for l in lo) or any(h > d for h, d in zip(hi, dims)) \
            or any(h <= l for l, h in zip(lo, hi)):
        raise PhantomError(f"box {lo}..{hi} invalid for dims {dims}")
    mask = np.zeros(dims, dtype=bool)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return mask


def _cylinder_mask(dims, prim):
    axis = _AXES[prim.get("axis", "z")]
    radius = float(prim["radius"])
    center = [float(c) for c in prim["center"]]  # the two cross-section coords
    other = [a for a in range(3) if a != axis]
    span = prim.get("span")  # [lo, hi) along the axis; default full extent
    lo, hi = (0, dims[axis]) if span is None else (int(span[0]), int(span[1]))
    if lo < 0 or hi > dims[axis] or hi <= lo:
        raise PhantomError("cylinder span outside volume")
    for c, a in zip(center, other):
        if c - radius < -0.5 or c + radius > dims[a] - 0.5:
            raise PhantomError("cylinder cross-section exceeds volume bounds")
    grids = _grids(dims)
    d2 = (grids[other[0]] - center[0]) ** 2 + (grids[other[1]] - center[1]) ** 2
    mask = d2 <= radius * radius
    axcoord = grids[axis]
    return mask & (axcoord >= lo) & (axcoord < hi)


def _helix_mask(dims, prim):
    axis = _AXES[prim.get("axis", "z")]
    radius = float(prim["radius"])
    tube = float(prim["tube_radius"])
    pitch = float(prim["pitch"])  # axis advance per full turn
    center = [float(c) for c in prim["center"]]
    phase = float(prim.get("phase", 0.0))
    other = [a for a in range(3) if a != axis]
    if any(center[i] - radius - tube < -0.5 or center[i] + radius + tube > dims[other[i]] - 0.5
           for i in range(2)):
        raise PhantomError("helix exceeds volume bounds")
    # Sample the curve densely and mark voxels within the tube radius.
    length = dims[axis]
    turns = length / pitch
    n = max(64, int(turns * radius * 16))
    t = np.linspace(0.0, length, n)
    theta = phase + 2.0 * np.pi * t / pitch
    pts = np.empty((n, 3))
    pts[:, axis] = t
    pts[:, other[0]] = center[0] + radius * np.cos(theta)
    pts[:, other[1]] = center[1] + radius * np.sin(theta)
    mask = np.zeros(dims, dtype=bool)
    for p in pts:
        lo = np.maximum(np.floor(p - tube).astype(int), 0)
        hi = np.minimum(np.ceil(p + tube).astype(int) + 1, dims)
        if np.any(hi <= lo):
            continue
        sub = [np.arange(lo[i], hi[i], dtype=np.float64) for i in range(3)]
        gx, gy, gz = np.meshgrid(*sub, indexing="ij")
        d2 = (gx - p[0]) ** 2 + (gy - p[1]) ** 2 + (gz - p[2]) ** 2
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= d2 <= tube * tube
    return mask


_SHAPES = {
    "slab": _slab_mask,
    "sphere": _sphere_mask,
    "box": _box_mask,
    "cylinder": _cylinder_mask,
    "helix": _helix_mask,
}


def make_phantom(spec: dict) -> tuple[InMemoryVolume, InMemoryVolume]:
    """Rasterize a phantom spec into (grayscale volume, label volume)."""
    try:
        dims = tuple(int(d) for d in spec["dims"])
        dtype_name = spec.get("dtype", "u8")
        background = float(spec.get("background", 0.0))
        prims = spec["primitives"]
    except (KeyError, TypeError) as exc:
        raise PhantomError(f"malformed phantom spec: {exc}") from exc
    if dtype_name not in DTYPES:
        raise PhantomError(f"unknown dtype {dtype_name!r}")
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise PhantomError("dims must be three positive integers")

    gray = np.full(dims, background, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.uint16 if len(prims) > 255 else np.uint8)
    for idx, prim in enumerate(prims, start=1):
        shape = prim.get("shape")
        if shape not in _SHAPES:
            raise PhantomError(f"unknown primitive shape {shape!r}")
        mask = _SHAPES[shape](dims, prim)
        gray[mask] = float(prim["value"])
        labels[mask] = idx

    noise = spec.get("noise")
    if noise:
        sigma = float(noise.get("sigma", 0.0))
        if sigma > 0:
            rng = np.random.default_rng(int(noise.get("seed", 0)))
            gray = gray + rng.normal(0.0, sigma, size=dims)

    dtype = DTYPES[dtype_name]
    if dtype.kind == "u":
        info = np.iinfo(dtype)
        gray = np.clip(np.rint(gray), info.min, info.max)
    else:
        gray = np.clip(gray, 0.0, None)
    vol = InMemoryVolume(gray.astype(dtype.newbyteorder("=")))
    return vol, InMemoryVolume(labels)


def load_spec(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise PhantomError(f"invalid phantom spec {path}: {exc}") from exc


def save_spec(spec: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec, fh, indent=2, sort_keys=True)
        fh.write("\n")
