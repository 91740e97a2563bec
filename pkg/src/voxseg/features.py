"""Structural and geometric descriptors of local voxel environments.

Every feature is a pure function of a K*K*K environment (plus the voxel
position for the position feature).  The heavy lifting happens in batch
functions operating on (n, K, K, K) float64 stacks so that volume-scale
classification stays vectorized; the single-environment operations wrap
those.  Histogram features can optionally be replaced by a Fourier
embedding of their quantile function whose Euclidean distances
approximate the 2-Wasserstein distance between the histograms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import textkv
from .volume import LocalEnvironment

CANONICAL_FEATURES = (
    "moments",
    "position",
    "lbp_top",
    "curvature",
    "line_fit",
    "plane_fit",
    "inertia",
    "center_distance",
    "hog",
)

# Features whose histogram has a scalar value axis and therefore admits the
# Wasserstein embedding.  LBP and HOG bins are categorical/directional.
EMBEDDABLE = ("curvature", "line_fit", "plane_fit", "center_distance")

LBP_BINS = 10
HOG_BINS = 50
# Latitude edges splitting the unit sphere into 5 bands holding 4/14/14/14/4
# azimuthal cells of equal surface area (cell area = 4*pi/50 each).
HOG_Z_EDGES = np.array([-1.0, -0.84, -0.28, 0.28, 0.84, 1.0])
HOG_BAND_BINS = (4, 14, 14, 14, 4)
HOG_BAND_OFFSETS = (0, 4, 18, 32, 46)

_EIG_CLAMP = 1e-12  # relative floor below which eigenvalues count as zero


class FeatureError(Exception):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    features: tuple[str, ...] = ("moments", "inertia")
    env_size: int = 5
    curvature_size: int = 3
    tau: float = 0.0
    gradient_threshold: float = 0.0
    curvature_bins: int = 16
    curvature_range: tuple[float, float] = (-1.0, 1.0)
    fit_bins: int = 16
    distance_bins: int = 16
    curvature_embed: int = 0
    fit_embed: int = 0
    distance_embed: int = 0

    def __post_init__(self):
        feats = tuple(f for f in CANONICAL_FEATURES if f in self.features)
        unknown = set(self.features) - set(CANONICAL_FEATURES)
        if unknown:
            raise FeatureError(f"unknown features: {sorted(unknown)}")
        if not feats:
            raise FeatureError("at least one feature must be enabled")
        object.__setattr__(self, "features", feats)
        K, k = self.env_size, self.curvature_size
        if K <= 1 or K % 2 == 0:
            raise FeatureError(f"env_size must be odd and > 1, got {K}")
        if k <= 1 or k % 2 == 0 or k > K:
            raise FeatureError(f"curvature_size must be odd, > 1 and <= env_size, got {k}")
        for name in ("curvature_bins", "fit_bins", "distance_bins"):
            if getattr(self, name) < 2:
                raise FeatureError(f"{name} must be >= 2")
        for name in ("curvature_embed", "fit_embed", "distance_embed"):
            if getattr(self, name) < 0:
                raise FeatureError(f"{name} must be >= 0")
        lo, hi = self.curvature_range
        if not lo < hi:
            raise FeatureError("curvature_range must be increasing")

    def to_kv(self) -> dict[str, str]:
        return {
            "features": ",".join(self.features),
            "env_size": str(self.env_size),
            "curvature_size": str(self.curvature_size),
            "tau": repr(self.tau),
            "gradient_threshold": repr(self.gradient_threshold),
            "curvature_bins": str(self.curvature_bins),
            "curvature_range": f"{self.curvature_range[0]!r} {self.curvature_range[1]!r}",
            "fit_bins": str(self.fit_bins),
            "distance_bins": str(self.distance_bins),
            "curvature_embed": str(self.curvature_embed),
            "fit_embed": str(self.fit_embed),
            "distance_embed": str(self.distance_embed),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "FeatureConfig":
        """Build a config from key-value text; missing keys keep defaults."""
        kwargs = {}
        if "features" in kv:
            kwargs["features"] = tuple(f for f in kv["features"].split(",") if f)
        for name in ("env_size", "curvature_size", "curvature_bins", "fit_bins",
                     "distance_bins", "curvature_embed", "fit_embed",
                     "distance_embed"):
            if name in kv:
                kwargs[name] = int(kv[name])
        for name in ("tau", "gradient_threshold"):
            if name in kv:
                kwargs[name] = float(kv[name])
        if "curvature_range" in kv:
            lo, hi = (float(v) for v in kv["curvature_range"].split())
            kwargs["curvature_range"] = (lo, hi)
        return cls(**kwargs)

    def serialize(self) -> str:
        return textkv.dumps(self.to_kv())

    @classmethod
    def deserialize(cls, text: str) -> "FeatureConfig":
        return cls.from_kv(textkv.loads(text))


@dataclass
class Histogram:
    edges: np.ndarray   # strictly increasing, length bins + 1
    counts: np.ndarray  # nonnegative, length bins

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.edges.ndim != 1 or self.counts.ndim != 1 \
                or len(self.counts) != len(self.edges) - 1:
            raise FeatureError("histogram counts length must be edges length - 1")
        if np.any(np.diff(self.edges) <= 0):
            raise FeatureError("histogram edges must be strictly increasing")
        if np.any(self.counts < 0):
            raise FeatureError("histogram counts must be nonnegative")

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def uniform_edges(lo: float, hi: float, bins: int) -> np.ndarray:
    return np.linspace(lo, hi, bins + 1)


def _bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    # Out-of-range values are clamped into the edge bins so mass is preserved.
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _rowwise_bincount(row_bins: np.ndarray, bins: int, weights: np.ndarray) -> np.ndarray:
    """Per-row weighted bincount: row_bins and weights are (n, m)."""
    n = row_bins.shape[0]
    offsets = (np.arange(n, dtype=np.int64) * bins)[:, None]
    flat = (row_bins + offsets).ravel()
    out = np.bincount(flat, weights=weights.ravel(), minlength=n * bins)
    return out.reshape(n, bins)


def _as_batch(env) -> np.ndarray:
    if isinstance(env, LocalEnvironment):
        env = env.values
    arr = np.asarray(env, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != arr.shape[2] or arr.shape[1] != arr.shape[3]:
        raise FeatureError(f"expected (n, K, K, K) environments, got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Statistical moments
# ---------------------------------------------------------------------------

def batch_moments(envs: np.ndarray) -> np.ndarray:
    x = envs.reshape(envs.shape[0], -1)
    mean = x.mean(axis=1)
    d = x - mean[:, None]
    m2 = np.mean(d * d, axis=1)
    m3 = np.mean(d ** 3, axis=1)
    m4 = np.mean(d ** 4, axis=1)
    std = np.sqrt(np.maximum(m2, 0.0))
    ok = m2 > 0.0
    skew = np.zeros_like(mean)
    kurt = np.zeros_like(mean)
    skew[ok] = m3[ok] / m2[ok] ** 1.5
    kurt[ok] = m4[ok] / m2[ok] ** 2 - 3.0
    return np.stack([mean, std, skew, kurt], axis=1)


def moments(env) -> tuple[float, float, float, float]:
    """(mean, std, skewness, excess kurtosis), population-normalized."""
    return tuple(batch_moments(_as_batch(env))[0])


def position_feature(center) -> tuple[float, float, float]:
    return tuple(float(c) for c in center)


# ---------------------------------------------------------------------------
# LBP on the three axis projections
# ---------------------------------------------------------------------------

# Circular 8-neighborhood, (row, col) offsets starting East, counterclockwise.
_LBP_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


def build_riu2_lut() -> np.ndarray:
    """Rotation-invariant uniform mapping of 8-bit patterns to 10 codes."""
    lut = np.empty(256, dtype=np.int64)
    for pattern in range(256):
        bits = [(pattern >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        lut[pattern] = sum(bits) if transitions <= 2 else 9
    return lut


_RIU2_LUT = build_riu2_lut()


def _lbp_codes(images: np.ndarray) -> np.ndarray:
    """riu2 codes of all interior pixels of a stack of 2D images (n, K, K)."""
    center = images[:, 1:-1, 1:-1]
    pattern = np.zeros(center.shape, dtype=np.int64)
    for bit, (dr, dc) in enumerate(_LBP_OFFSETS):
        neigh = images[:, 1 + dr:images.shape[1] - 1 + dr, 1 + dc:images.shape[2] - 1 + dc]
        pattern |= (neigh > center).astype(np.int64) << bit
    return _RIU2_LUT[pattern]


def batch_lbp_top(envs: np.ndarray) -> np.ndarray:
    n, K = envs.shape[0], envs.shape[1]
    if K < 3:
        raise FeatureError("lbp_top needs env_size >= 3")
    blocks = []
    for axis in (1, 2, 3):
        codes = _lbp_codes(envs.sum(axis=axis)).reshape(n, -1)
        ones = np.ones_like(codes, dtype=np.float64)
        blocks.append(_rowwise_bincount(codes, LBP_BINS, ones))
    return np.concatenate(blocks, axis=1)


def lbp_top(env) -> np.ndarray:
    """Concatenated 10-bin riu2 histograms of the three projection images."""
    return batch_lbp_top(_as_batch(env))[0]


# ---------------------------------------------------------------------------
# Gradients / curvature / inertia / HOG
# ---------------------------------------------------------------------------

def _interior_slices(envs: np.ndarray, h: int, dx: int, dy: int, dz: int) -> np.ndarray:
    K = envs.shape[1]
    return envs[:, h + dx:K - h + dx, h + dy:K - h + dy, h + dz:K - h + dz]


def _batch_gradients(envs: np.ndarray, h: int = 1):
    s = lambda dx, dy, dz: _interior_slices(envs, h, dx, dy, dz)
    inv = 1.0 / (2.0 * h)
    gx = (s(h, 0, 0) - s(-h, 0, 0)) * inv
    gy = (s(0, h, 0) - s(0, -h, 0)) * inv
    gz = (s(0, 0, h) - s(0, 0, -h)) * inv
    return gx, gy, gz


def batch_curvature(envs: np.ndarray, k: int, gradient_threshold: float) -> np.ndarray:
    """Mean-curvature estimates of the implicit gray surface at every voxel
    with a full k-sub-environment; below-threshold gradients contribute 0."""
    h = k // 2
    K = envs.shape[1]
    if K < k:
        raise FeatureError("curvature sub-environment exceeds environment")
    s = lambda dx, dy, dz: _interior_slices(envs, h, dx, dy, dz)
    c = s(0, 0, 0)
    inv2h = 1.0 / (2.0 * h)
    invh2 = 1.0 / (h * h)
    inv4h2 = 1.0 / (4.0 * h * h)
    gx = (s(h, 0, 0) - s(-h, 0, 0)) * inv2h
    gy = (s(0, h, 0) - s(0, -h, 0)) * inv2h
    gz = (s(0, 0, h) - s(0, 0, -h)) * inv2h
    hxx = (s(h, 0, 0) - 2 * c + s(-h, 0, 0)) * invh2
    hyy = (s(0, h, 0) - 2 * c + s(0, -h, 0)) * invh2
    hzz = (s(0, 0, h) - 2 * c + s(0, 0, -h)) * invh2
    hxy = (s(h, h, 0) - s(h, -h, 0) - s(-h, h, 0) + s(-h, -h, 0)) * inv4h2
    hxz = (s(h, 0, h) - s(h, 0, -h) - s(-h, 0, h) + s(-h, 0, -h)) * inv4h2
    hyz = (s(0, h, h) - s(0, h, -h) - s(0, -h, h) + s(0, -h, -h)) * inv4h2
    g2 = gx * gx + gy * gy + gz * gz
    mag = np.sqrt(g2)
    ghg = (gx * gx * hxx + gy * gy * hyy + gz * gz * hzz
           + 2.0 * (gx * gy * hxy + gx * gz * hxz + gy * gz * hyz))
    trace = hxx + hyy + hzz
    ok = mag > gradient_threshold
    denom = np.where(ok, 2.0 * mag ** 3, 1.0)
    kappa = np.where(ok, (ghg - g2 * trace) / denom, 0.0)
    return kappa.reshape(envs.shape[0], -1)


def batch_curvature_hist(envs, k, gradient_threshold, lo, hi, bins) -> np.ndarray:
    kappa = batch_curvature(envs, k, gradient_threshold)
    idx = _bin_indices(kappa, lo, hi, bins)
    return _rowwise_bincount(idx, bins, np.ones_like(kappa))


def curvature_histogram(env, k: int = 3, gradient_threshold: float = 0.0,
                        value_range=(-1.0, 1.0), bins: int = 16) -> Histogram:
    counts = batch_curvature_hist(_as_batch(env), k, gradient_threshold,
                                  value_range[0], value_range[1], bins)[0]
    return Histogram(uniform_edges(value_range[0], value_range[1], bins), counts)


def batch_inertia(envs: np.ndarray) -> np.ndarray:
    """Shape features from the gradient-based inertia tensor.

    The structure tensor S = sum(g g^T) over interior voxels is transformed
    into the inertia tensor trace(S) I - S, whose descending eigenvalues
    l1 >= l2 >= l3 feed (l1-l2)/l1, (l2-l3)/l1, l3/l1.  Planar regions light
    up the second value, elongated ones the first, isotropic ones the third.
    """
    gx, gy, gz = _batch_gradients(envs)
    n = envs.shape[0]
    g = np.stack([gx.reshape(n, -1), gy.reshape(n, -1), gz.reshape(n, -1)], axis=2)
    S = np.einsum("nvi,nvj->nij", g, g)
    w = np.linalg.eigvalsh(S)  # ascending
    w = np.maximum(w, 0.0)
    s1, s2, s3 = w[:, 2], w[:, 1], w[:, 0]
    clamp = s1 * _EIG_CLAMP
    s2 = np.where(s2 <= clamp, 0.0, s2)
    s3 = np.where(s3 <= clamp, 0.0, s3)
    l1, l2, l3 = s1 + s2, s1 + s3, s2 + s3
    out = np.zeros((n, 3))
    ok = l1 > 0.0
    out[ok, 0] = (l1[ok] - l2[ok]) / l1[ok]
    out[ok, 1] = (l2[ok] - l3[ok]) / l1[ok]
    out[ok, 2] = l3[ok] / l1[ok]
    return out


def inertia_features(env) -> tuple[float, float, float]:
    """(f_l, f_p, f_s): linearity, planarity, isotropy; they sum to one."""
    return tuple(batch_inertia(_as_batch(env))[0])


def sphere_bin(directions: np.ndarray) -> np.ndarray:
    """Map unit direction vectors (n, 3) to the 50 equal-area sphere cells."""
    d = np.asarray(directions, dtype=np.float64)
    z = np.clip(d[..., 2], -1.0, 1.0)
    band = np.clip(np.searchsorted(HOG_Z_EDGES, z, side="right") - 1, 0, 4)
    azimuth = np.arctan2(d[..., 1], d[..., 0]) % (2.0 * np.pi)
    nb = np.asarray(HOG_BAND_BINS)[band]
    off = np.asarray(HOG_BAND_OFFSETS)[band]
    azbin = np.minimum((azimuth / (2.0 * np.pi) * nb).astype(np.int64), nb - 1)
    return off + azbin


def batch_hog(envs: np.ndarray, magnitude_threshold: float) -> np.ndarray:
    n = envs.shape[0]
    gx, gy, gz = _batch_gradients(envs)
    g = np.stack([gx.reshape(n, -1), gy.reshape(n, -1), gz.reshape(n, -1)], axis=2)
    mag = np.sqrt(np.sum(g * g, axis=2))
    valid = mag > magnitude_threshold
    safe = np.where(valid, mag, 1.0)
    bins = sphere_bin(g / safe[..., None])
    weights = np.where(valid, mag, 0.0)
    return _rowwise_bincount(bins, HOG_BINS, weights)


def hog_sphere(env, magnitude_threshold: float = 0.0) -> np.ndarray:
    """50-bin equal-area sphere histogram of gradient orientations,
    incremented by gradient magnitude."""
    return batch_hog(_as_batch(env), magnitude_threshold)[0]


# ---------------------------------------------------------------------------
# Line / plane fitting
# ---------------------------------------------------------------------------

def _offset_grid(K: int) -> np.ndarray:
    half = K // 2
    r = np.arange(-half, half + 1, dtype=np.float64)
    gx, gy, gz = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def batch_fit_structures(envs: np.ndarray, tau: float, bins: int):
    """Least-squares line/plane fits to the voxels above tau.

    Returns (f1_line, f2_line, hist_line, f1_plane, f2_plane, hist_plane);
    the line block needs the point scatter to have rank >= 1, the plane
    block rank >= 2, and fewer than 3 points zero both blocks.
    """
    n, K = envs.shape[0], envs.shape[1]
    half = K // 2
    dmax_possible = 2.0 * np.sqrt(3.0) * half
    P = _offset_grid(K)
    V = P.shape[0]
    norms2 = np.sum(P * P, axis=1)
    PP = (P[:, :, None] * P[:, None, :]).reshape(V, 9)

    mask = (envs.reshape(n, V) > tau).astype(np.float64)
    m = mask.sum(axis=1)
    enough = m >= 3

    centroid = np.zeros((n, 3))
    centroid[enough] = (mask[enough] @ P) / m[enough, None]
    M2 = (mask @ PP).reshape(n, 3, 3)
    scatter = M2 - m[:, None, None] * centroid[:, :, None] * centroid[:, None, :]
    w, vecs = np.linalg.eigh(scatter)  # ascending
    w = np.maximum(w, 0.0)
    u1 = vecs[:, :, 2]  # largest: line direction
    u3 = vecs[:, :, 0]  # smallest: plane normal
    clamp = np.maximum(w[:, 2] * _EIG_CLAMP, 1e-30)
    line_ok = enough & (w[:, 2] > 1e-30)
    plane_ok = line_ok & (w[:, 1] > clamp)

    t = u1 @ P.T  # (n, V) projections onto the line direction
    d_line = np.sqrt(np.maximum(norms2[None, :] - t * t, 0.0))
    d_plane = np.abs(u3 @ P.T)

    def block(dist, ok):
        wsum = np.where(mask > 0, dist, 0.0).sum(axis=1)
        mean = np.divide(wsum, m, out=np.zeros(n), where=m > 0)
        dmax = np.where(mask > 0, dist, -np.inf).max(axis=1)
        dmin = np.where(mask > 0, dist, np.inf).min(axis=1)
        f1 = np.where(ok, np.exp(-mean), 0.0)
        f2 = np.where(ok, (dmax - dmin + 1.0) / dmax_possible, 0.0)
        idx = _bin_indices(dist, 0.0, np.sqrt(3.0) * half, bins)
        hist = _rowwise_bincount(idx, bins, mask)
        hist[~ok] = 0.0
        return f1, f2, hist

    f1l, f2l, hl = block(d_line, line_ok)
    f1p, f2p, hp = block(d_plane, plane_ok)
    return f1l, f2l, hl, f1p, f2p, hp


def fit_structures(env, tau: float = 0.0, bins: int = 16):
    """(f1_L, f2_L, H_L, f1_P, f2_P, H_P) for a single environment."""
    envs = _as_batch(env)
    K = envs.shape[1]
    f1l, f2l, hl, f1p, f2p, hp = batch_fit_structures(envs, tau, bins)
    edges = uniform_edges(0.0, np.sqrt(3.0) * (K // 2), bins)
    return (float(f1l[0]), float(f2l[0]), Histogram(edges, hl[0]),
            float(f1p[0]), float(f2p[0]), Histogram(edges, hp[0]))


# ---------------------------------------------------------------------------
# Center distance histogram
# ---------------------------------------------------------------------------

def batch_center_distance(envs: np.ndarray, tau: float, bins: int) -> np.ndarray:
    n, K = envs.shape[0], envs.shape[1]
    half = K // 2
    dist = np.sqrt(np.sum(_offset_grid(K) ** 2, axis=1))
    idx = _bin_indices(dist, 0.0, np.sqrt(3.0) * half if half else 1.0, bins)
    mask = (envs.reshape(n, -1) > tau).astype(np.float64)
    return _rowwise_bincount(np.broadcast_to(idx, mask.shape), bins, mask)


def center_distance_histogram(env, tau: float = 0.0, bins: int = 16) -> Histogram:
    """Histogram of Euclidean distances of above-threshold voxels to the
    environment center; linear in K^3."""
    envs = _as_batch(env)
    K = envs.shape[1]
    counts = batch_center_distance(envs, tau, bins)[0]
    return Histogram(uniform_edges(0.0, np.sqrt(3.0) * (K // 2), bins), counts)


# ---------------------------------------------------------------------------
# Wasserstein embedding
# ---------------------------------------------------------------------------

def _quantile_segments(hist: Histogram):
    probs = hist.counts / hist.total
    keep = probs > 0
    values = hist.centers[keep]
    cum = np.cumsum(probs[keep])
    cum[-1] = 1.0
    starts = np.concatenate([[0.0], cum[:-1]])
    return starts, cum, values


def _fourier_coefficients(starts, ends, values, dim: int) -> np.ndarray:
    """Exact inner products of a piecewise-constant function on (0,1) with
    the orthonormal Fourier basis {1, sqrt2 cos 2pi x, sqrt2 sin 2pi x, ...}."""
    coeffs = np.empty(dim)
    coeffs[0] = float(np.sum(values * (ends - starts)))
    sqrt2 = np.sqrt(2.0)
    for idx in range(1, dim):
        freq = (idx + 1) // 2
        omega = 2.0 * np.pi * freq
        if idx % 2 == 1:  # cosine term
            integral = (np.sin(omega * ends) - np.sin(omega * starts)) / omega
        else:             # sine term
            integral = (np.cos(omega * starts) - np.cos(omega * ends)) / omega
        coeffs[idx] = sqrt2 * float(np.sum(values * integral))
    return coeffs


def wasserstein_embed(hist: Histogram, dim: int) -> np.ndarray:
    """First ``dim`` Fourier coefficients of the histogram's quantile
    function; Euclidean distances between embeddings approach the
    2-Wasserstein distance between the histograms as ``dim`` grows."""
    if dim < 1:
        raise FeatureError("embedding dimension must be >= 1")
    if hist.total <= 0:
        raise FeatureError("cannot embed a zero-mass histogram")
    starts, ends, values = _quantile_segments(hist)
    return _fourier_coefficients(starts, ends, values, dim)


def _batch_embed(hists: np.ndarray, edges: np.ndarray, dim: int) -> np.ndarray:
    centers = 0.5 * (edges[:-1] + edges[1:])
    out = np.zeros((hists.shape[0], dim))
    totals = hists.sum(axis=1)
    for i in np.nonzero(totals > 0)[0]:
        probs = hists[i] / totals[i]
        keep = probs > 0
        cum = np.cumsum(probs[keep])
        cum[-1] = 1.0
        starts = np.concatenate([[0.0], cum[:-1]])
        out[i] = _fourier_coefficients(starts, cum, centers[keep], dim)
    return out


# ---------------------------------------------------------------------------
# Assembly and scaling
# ---------------------------------------------------------------------------

def _family_length(config: FeatureConfig, name: str) -> int:
    if name == "moments":
        return 4
    if name == "position":
        return 3
    if name == "lbp_top":
        return 3 * LBP_BINS
    if name == "curvature":
        return config.curvature_embed or config.curvature_bins
    if name in ("line_fit", "plane_fit"):
        return 2 + (config.fit_embed or config.fit_bins)
    if name == "inertia":
        return 3
    if name == "center_distance":
        return config.distance_embed or config.distance_bins
    if name == "hog":
        return HOG_BINS
    raise FeatureError(f"unknown feature {name!r}")


def layout_for(config: FeatureConfig) -> list[tuple[str, int, int]]:
    """Ordered (name, offset, length) blocks; identical for every vector
    produced under one config."""
    layout = []
    offset = 0
    for name in config.features:
        length = _family_length(config, name)
        layout.append((name, offset, length))
        offset += length
    return layout


def vector_length(config: FeatureConfig) -> int:
    return sum(length for _, _, length in layout_for(config))


def scaling_groups(config: FeatureConfig) -> list[tuple[int, int]]:
    """(offset, length) slices sharing one (mu, sigma): histogram-derived
    blocks are pooled, scalar entries stand alone."""
    groups = []
    for name, offset, length in layout_for(config):
        if name in ("moments", "position", "inertia"):
            groups.extend((offset + i, 1) for i in range(length))
        elif name in ("line_fit", "plane_fit"):
            groups.append((offset, 1))
            groups.append((offset + 1, 1))
            groups.append((offset + 2, length - 2))
        else:
            groups.append((offset, length))
    return groups


class FeatureExtractor:
    """Batch feature pipeline for one configuration."""

    def __init__(self, config: FeatureConfig):
        self.config = config
        self.layout = layout_for(config)
        self.length = vector_length(config)

    def extract(self, envs: np.ndarray, centers: np.ndarray | None = None) -> np.ndarray:
        cfg = self.config
        envs = _as_batch(envs)
        if envs.shape[1] != cfg.env_size:
            raise FeatureError(
                f"environment size {envs.shape[1]} does not match config {cfg.env_size}")
        n = envs.shape[0]
        blocks: dict[str, np.ndarray] = {}
        for name in cfg.features:
            if name == "moments":
                blocks[name] = batch_moments(envs)
            elif name == "position":
                if centers is None:
                    raise FeatureError("position feature requires voxel centers")
                blocks[name] = np.asarray(centers, dtype=np.float64).reshape(n, 3)
            elif name == "lbp_top":
                blocks[name] = batch_lbp_top(envs)
            elif name == "curvature":
                lo, hi = cfg.curvature_range
                hist = batch_curvature_hist(envs, cfg.curvature_size,
                                            cfg.gradient_threshold, lo, hi,
                                            cfg.curvature_bins)
                if cfg.curvature_embed:
                    edges = uniform_edges(lo, hi, cfg.curvature_bins)
                    hist = _batch_embed(hist, edges, cfg.curvature_embed)
                blocks[name] = hist
            elif name in ("line_fit", "plane_fit"):
                if "line_fit" not in blocks and "plane_fit" not in blocks:
                    f1l, f2l, hl, f1p, f2p, hp = batch_fit_structures(
                        envs, cfg.tau, cfg.fit_bins)
                    edges = uniform_edges(0.0, np.sqrt(3.0) * (cfg.env_size // 2),
                                          cfg.fit_bins)
                    if cfg.fit_embed:
                        hl = _batch_embed(hl, edges, cfg.fit_embed)
                        hp = _batch_embed(hp, edges, cfg.fit_embed)
                    if "line_fit" in cfg.features:
                        blocks["line_fit"] = np.concatenate(
                            [f1l[:, None], f2l[:, None], hl], axis=1)
                    if "plane_fit" in cfg.features:
                        blocks["plane_fit"] = np.concatenate(
                            [f1p[:, None], f2p[:, None], hp], axis=1)
            elif name == "inertia":
                blocks[name] = batch_inertia(envs)
            elif name == "center_distance":
                hist = batch_center_distance(envs, cfg.tau, cfg.distance_bins)
                if cfg.distance_embed:
                    edges = uniform_edges(0.0, np.sqrt(3.0) * (cfg.env_size // 2),
                                          cfg.distance_bins)
                    hist = _batch_embed(hist, edges, cfg.distance_embed)
                blocks[name] = hist
            elif name == "hog":
                blocks[name] = batch_hog(envs, cfg.gradient_threshold)
        out = np.empty((n, self.length))
        for name, offset, length in self.layout:
            out[:, offset:offset + length] = blocks[name]
        return out


def assemble(env, config: FeatureConfig, center=None) -> np.ndarray:
    """Concatenated feature vector of one environment, canonical order."""
    if isinstance(env, LocalEnvironment) and center is None:
        center = env.center
    centers = None if center is None else np.asarray([center], dtype=np.float64)
    return FeatureExtractor(config).extract(_as_batch(env), centers)[0]


@dataclass
class ScalerParams:
    """Per-entry z-score parameters expanded from the conceptual groups."""

    mean: np.ndarray
    std: np.ndarray
    groups: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise FeatureError("scaler mean/std must be 1D and equal length")
        if np.any(self.std <= 0):
            raise FeatureError("scaler std must be positive")

    @staticmethod
    def identity(length: int) -> "ScalerParams":
        return ScalerParams(np.zeros(length), np.ones(length))


def fit_scaler(vectors: np.ndarray, config: FeatureConfig) -> ScalerParams:
    """One (mu, sigma) per conceptual group, pooled over histogram blocks.
    Degenerate groups (sigma = 0) fall back to sigma = 1."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise FeatureError("scaler fit needs at least two vectors")
    if X.shape[1] != vector_length(config):
        raise FeatureError("vector length does not match config")
    groups = scaling_groups(config)
    mean = np.empty(X.shape[1])
    std = np.empty(X.shape[1])
    for offset, length in groups:
        pooled = X[:, offset:offset + length].ravel()
        mu = pooled.mean()
        sigma = pooled.std()
        if sigma == 0.0:
            sigma = 1.0
        mean[offset:offset + length] = mu
        std[offset:offset + length] = sigma
    return ScalerParams(mean, std, groups)


def apply_scaler(params: ScalerParams, vectors: np.ndarray) -> np.ndarray:
    X = np.asarray(vectors, dtype=np.float64)
    return (X - params.mean) / params.std


def vectors_to_csv(vectors: np.ndarray, config: FeatureConfig) -> str:
    """Debug CSV with one column per feature entry, named from the layout."""
    header = []
    for name, _, length in layout_for(config):
        header.extend(f"{name}[{i}]" for i in range(length))
    lines = [",".join(header)]
    for row in np.atleast_2d(np.asarray(vectors, dtype=np.float64)):
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
