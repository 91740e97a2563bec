"""nu-SVM with a Gaussian kernel: decomposition solver for the dual,
Platt-scaled confidences, cross-validated hyperparameter search, and a
versioned binary model container that keeps the unscaled training set
for later retraining.

Dual problem per training run: minimize 0.5 a^T Q a subject to
0 <= a_i <= 1/M, 1^T a >= nu, y^T a = 0 with Q_ij = y_i y_j k(x_i, x_j).
The solver keeps both equality sums fixed (per-class mass nu/2) and takes
SMO-style pair steps inside one class, so feasibility is preserved
exactly; kernel rows are produced on demand through an LRU cache with a
byte budget instead of materializing the M x M matrix.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureConfig, ScalerParams, apply_scaler, fit_scaler, vector_length

DEFAULT_EPS = 1e-3
DEFAULT_CACHE_BYTES = 256 * 1024 * 1024
DEFAULT_MAX_KERNEL_EVALS = 10_000_000

_MODEL_MAGIC = b"VSEGMDL1"
_MODEL_VERSION = 1


class SvmError(Exception):
    pass


class ConvergenceError(SvmError):
    pass


class ModelFormatError(SvmError):
    pass


def nu_max(labels) -> float:
    """Upper bound (2/M) * min(#positive, #negative) for feasible nu."""
    y = np.asarray(labels)
    pos = int(np.sum(y > 0))
    neg = int(np.sum(y < 0))
    if pos == 0 or neg == 0:
        raise SvmError("both classes must be present")
    return 2.0 * min(pos, neg) / len(y)


def gaussian_kernel(x, y, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise SvmError(f"length mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def kernel_matrix(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    """exp(-gamma * squared distances) between row sets A and B."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


class KernelRowCache:
    """LRU cache of kernel rows k(x_i, X) under a byte budget."""

    def __init__(self, X: np.ndarray, gamma: float, budget_bytes: int):
        self.X = X
        self.gamma = gamma
        self.budget = max(int(budget_bytes), X.shape[0] * 8)
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()
        self._bytes = 0
        self.evals = 0

    def row(self, i: int) -> np.ndarray:
        row = self._rows.get(i)
        if row is not None:
            self._rows.move_to_end(i)
            return row
        d = self.X - self.X[i]
        row = np.exp(-self.gamma * np.einsum("ij,ij->i", d, d))
        self.evals += len(row)
        self._rows[i] = row
        self._bytes += row.nbytes
        while self._bytes > self.budget and len(self._rows) > 2:
            _, old = self._rows.popitem(last=False)
            self._bytes -= old.nbytes
        return row


@dataclass
class SolveResult:
    alpha: np.ndarray
    bias: float
    rho: float
    objective: float
    iterations: int
    kernel_evals: int


def _initial_alpha(y: np.ndarray, nu: float, C: float) -> np.ndarray:
    alpha = np.zeros(len(y))
    for cls in (1, -1):
        remaining = nu / 2.0
        for i in np.nonzero(y == cls)[0]:
            take = min(C, remaining)
            alpha[i] = take
            remaining -= take
            if remaining <= 0.0:
                break
        if remaining > 1e-12:
            raise SvmError(f"nu={nu} infeasible: exceeds nu_max={nu_max(y)}")
    return alpha


def solve_nu_svm(X: np.ndarray, y, nu: float, gamma: float,
                 eps: float = DEFAULT_EPS,
                 max_kernel_evals: int = DEFAULT_MAX_KERNEL_EVALS,
                 cache_bytes: int = DEFAULT_CACHE_BYTES,
                 shrinking: bool = True) -> SolveResult:
    """Solve the nu-SVM dual on pre-scaled samples X with labels y.

    Working-set selection is the most-violating pair inside one class
    (second-order gain for the partner), with periodic shrinking of
    variables pinned at their bounds; convergence is always re-checked on
    the full set before returning.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    M = len(y)
    if X.shape[0] != M:
        raise SvmError("sample/label count mismatch")
    if not np.all(np.abs(y) == 1):
        raise SvmError("labels must be +1/-1")
    if gamma <= 0:
        raise SvmError("gamma must be positive")
    cap = nu_max(y)
    if not 0.0 < nu <= cap + 1e-12:
        raise SvmError(f"nu={nu} outside (0, nu_max={cap}]")

    C = 1.0 / M
    alpha = _initial_alpha(y, nu, C)
    cache = KernelRowCache(X, gamma, cache_bytes)

    # G = Q alpha, maintained for all indices; Q[:, j] = y * y_j * k_j.
    G = np.zeros(M)
    for j in np.nonzero(alpha > 0)[0]:
        G += (alpha[j] * y[j]) * cache.row(j)
    G *= y

    pos = y > 0
    active = np.ones(M, dtype=bool)
    tol_b = 1e-12 * C
    shrink_interval = max(100, min(1000, M))
    iterations = 0

    def class_state(mask):
        """(violation, i_up, max_down_G) for one class on the active set."""
        up = mask & (alpha < C - tol_b)
        down = mask & (alpha > tol_b)
        if not up.any() or not down.any():
            return -np.inf, -1, -np.inf
        up_idx = np.nonzero(up)[0]
        i = up_idx[np.argmin(G[up_idx])]
        down_idx = np.nonzero(down)[0]
        gmax = G[down_idx].max()
        return gmax - G[i], i, gmax

    def select_partner(i, mask):
        down_idx = np.nonzero(mask & (alpha > tol_b))[0]
        diff = G[down_idx] - G[i]
        cand = down_idx[diff > 0]
        if len(cand) == 0:
            return -1
        ki = cache.row(i)
        eta = np.maximum(2.0 - 2.0 * ki[cand], 1e-12)
        gain = (G[cand] - G[i]) ** 2 / eta
        return cand[np.argmax(gain)]

    while True:
        vp, ip, _ = class_state(active & pos)
        vn, in_, _ = class_state(active & ~pos)
        violation = max(vp, vn)
        if violation < eps:
            if active.all():
                break
            # Converged on the shrunk set: restore everything and re-check.
            active[:] = True
            continue
        i = ip if vp >= vn else in_
        mask = (active & pos) if vp >= vn else (active & ~pos)
        j = select_partner(i, mask)
        if j < 0:
            break
        ki, kj = cache.row(i), cache.row(j)
        eta = max(2.0 - 2.0 * ki[j], 1e-12)
        delta = (G[j] - G[i]) / eta
        delta = min(delta, C - alpha[i], alpha[j])
        if delta <= 0:
            break
        alpha[i] = min(alpha[i] + delta, C)
        alpha[j] = max(alpha[j] - delta, 0.0)
        if alpha[j] < tol_b:
            alpha[j] = 0.0
        qi = y * (y[i] * ki)
        qj = y * (y[j] * kj)
        G += delta * (qi - qj)
        iterations += 1
        if cache.evals > max_kernel_evals:
            raise ConvergenceError(
                f"no convergence within {max_kernel_evals} kernel evaluations")
        if shrinking and iterations % shrink_interval == 0:
            for mask_c in (pos, ~pos):
                _, _, gmax = class_state(active & mask_c)
                up = active & mask_c & (alpha < C - tol_b)
                if not np.isinf(gmax):
                    gmin = G[np.nonzero(up)[0]].min() if up.any() else np.inf
                    at_zero = active & mask_c & (alpha <= tol_b) & (G >= gmax)
                    at_cap = active & mask_c & (alpha >= C - tol_b) & (G <= gmin)
                    active[at_zero | at_cap] = False

    objective = 0.5 * float(np.dot(alpha, G))
    bias, rho = _recover_bias(alpha, G, y, C)
    return SolveResult(alpha, bias, rho, objective, iterations, cache.evals)


def _recover_bias(alpha, G, y, C):
    """Bias and margin from KKT: free SVs satisfy y_i (u_i + b) = rho."""
    u = y * G
    free_tol = 1e-8 * C

    def class_r(mask):
        free = mask & (alpha > free_tol) & (alpha < C - free_tol)
        if free.any():
            return float(u[free].mean())
        lb = float(u[mask & (alpha >= C - free_tol)].max()) \
            if (mask & (alpha >= C - free_tol)).any() else -np.inf
        ub = float(u[mask & (alpha <= free_tol)].min()) \
            if (mask & (alpha <= free_tol)).any() else np.inf
        if np.isinf(lb):
            return ub
        if np.isinf(ub):
            return lb
        return 0.5 * (lb + ub)

    r1 = class_r(y > 0)   # rho - b
    r2 = class_r(y < 0)   # -rho - b
    bias = -0.5 * (r1 + r2)
    rho = 0.5 * (r1 - r2)
    return bias, rho


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class TrainingSet:
    """Unscaled feature vectors with +1/-1 labels."""

    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise SvmError("training vectors/labels mismatch")
        if len(self.labels) and not np.all(np.abs(self.labels) == 1):
            raise SvmError("labels must be +1/-1")

    @property
    def positives(self) -> int:
        return int(np.sum(self.labels > 0))

    @property
    def negatives(self) -> int:
        return int(np.sum(self.labels < 0))


@dataclass
class SvmModel:
    config: FeatureConfig
    scaler: ScalerParams
    support_vectors: np.ndarray   # scaled
    dual_coef: np.ndarray         # y_i * alpha_i per support vector
    alpha: np.ndarray
    bias: float
    rho: float
    nu: float
    gamma: float
    eps: float = DEFAULT_EPS
    platt: tuple[float, float] | None = None

    def __post_init__(self):
        self.support_vectors = np.ascontiguousarray(self.support_vectors, dtype=np.float64)
        self.dual_coef = np.asarray(self.dual_coef, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)


def _check_layout(model: SvmModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.support_vectors.shape[1]:
        raise SvmError(
            f"feature layout mismatch: {X.shape[1]} entries vs model "
            f"{model.support_vectors.shape[1]}")
    return X


def decision_many(model: SvmModel, X_unscaled: np.ndarray) -> np.ndarray:
    X = apply_scaler(model.scaler, _check_layout(model, X_unscaled))
    K = kernel_matrix(X, model.support_vectors, model.gamma)
    return K @ model.dual_coef + model.bias


def decision(model: SvmModel, x_unscaled) -> float:
    return float(decision_many(model, np.asarray(x_unscaled)[None, :])[0])


def fit_platt(decisions, labels, max_iter: int = 200, grad_tol: float = 1e-8):
    """Damped-Newton fit of P(y=+1 | f) = 1 / (1 + exp(A f + B)) with the
    standard smoothed targets."""
    f = np.asarray(decisions, dtype=np.float64)
    y = np.asarray(labels)
    prior1 = int(np.sum(y > 0))
    prior0 = int(np.sum(y <= 0))
    if prior1 == 0 or prior0 == 0:
        raise SvmError("platt fit needs both classes")
    hi = (prior1 + 1.0) / (prior1 + 2.0)
    lo = 1.0 / (prior0 + 2.0)
    t = np.where(y > 0, hi, lo)

    def objective(a, b):
        z = a * f + b
        # log(1 + e^z) evaluated stably
        log1pe = np.where(z >= 0, z + np.log1p(np.exp(-np.abs(z))),
                          np.log1p(np.exp(z)))
        return float(np.sum(log1pe - (1.0 - t) * z))

    A, B = 0.0, np.log((prior0 + 1.0) / (prior1 + 1.0))
    fval = objective(A, B)
    sigma = 1e-12
    for _ in range(max_iter):
        z = A * f + B
        p = np.where(z >= 0, np.exp(-z) / (1.0 + np.exp(-z)),
                     1.0 / (1.0 + np.exp(z)))
        d1 = t - p
        gA = float(np.dot(f, d1))
        gB = float(np.sum(d1))
        if max(abs(gA), abs(gB)) < grad_tol:
            break
        w = p * (1.0 - p)
        h11 = float(np.dot(f * f, w)) + sigma
        h22 = float(np.sum(w)) + sigma
        h12 = float(np.dot(f, w))
        det = h11 * h22 - h12 * h12
        dA = -(h22 * gA - h12 * gB) / det
        dB = -(-h12 * gA + h11 * gB) / det
        gd = gA * dA + gB * dB
        step = 1.0
        while step >= 1e-10:
            newA, newB = A + step * dA, B + step * dB
            newf = objective(newA, newB)
            if newf < fval + 1e-4 * step * gd:
                A, B, fval = newA, newB, newf
                break
            step /= 2.0
        else:
            break
    else:
        raise ConvergenceError("platt fitting did not converge")
    return float(A), float(B)


def _sigmoid_confidence(A: float, B: float, f: np.ndarray) -> np.ndarray:
    z = A * f + B
    return np.where(z >= 0, np.exp(-z) / (1.0 + np.exp(-z)), 1.0 / (1.0 + np.exp(z)))


def predict_confidence_many(model: SvmModel, X_unscaled: np.ndarray) -> np.ndarray:
    if model.platt is None:
        raise SvmError("model is not calibrated")
    return _sigmoid_confidence(*model.platt, decision_many(model, X_unscaled))


def predict_confidence(model: SvmModel, x_unscaled) -> float:
    return float(predict_confidence_many(model, np.asarray(x_unscaled)[None, :])[0])


def train_model(train: TrainingSet, config: FeatureConfig, nu: float, gamma: float,
                eps: float = DEFAULT_EPS, cache_bytes: int = DEFAULT_CACHE_BYTES,
                scaler: ScalerParams | None = None, calibrate: bool = True) -> SvmModel:
    """Fit scaler (unless given), solve the dual, and Platt-calibrate."""
    if train.positives == 0 or train.negatives == 0:
        raise SvmError("both classes must be present")
    if scaler is None:
        scaler = fit_scaler(train.vectors, config)
    Xs = apply_scaler(scaler, train.vectors)
    res = solve_nu_svm(Xs, train.labels, nu, gamma, eps=eps, cache_bytes=cache_bytes)
    sv = res.alpha > 0
    model = SvmModel(
        config=config, scaler=scaler,
        support_vectors=Xs[sv],
        dual_coef=(train.labels[sv] * res.alpha[sv]),
        alpha=res.alpha[sv],
        bias=res.bias, rho=res.rho, nu=nu, gamma=gamma, eps=eps)
    if calibrate:
        model.platt = fit_platt(decision_many(model, train.vectors), train.labels)
    return model


# ---------------------------------------------------------------------------
# Hyperparameter grid search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperGrid:
    nus: tuple[float, ...]
    gammas: tuple[float, ...]
    folds: int = 7

    def __post_init__(self):
        if not self.nus or not self.gammas:
            raise SvmError("empty hyperparameter grid")
        if any(g <= 0 for g in self.gammas):
            raise SvmError("gamma grid must be positive")
        if self.folds < 2:
            raise SvmError("cross validation needs >= 2 folds")


def default_grid(train: TrainingSet, config: FeatureConfig,
                 n_nu: int = 8, gamma_exponents=None, folds: int = 7) -> HyperGrid:
    """nu sampled equidistantly in (0, nu_max]; gamma = 2^e / median
    pairwise squared distance of the scaled vectors, e in gamma_exponents
    (default -8..0)."""
    if gamma_exponents is None:
        gamma_exponents = range(-8, 1)
    cap = nu_max(train.labels)
    nus = tuple(cap * (i + 1) / n_nu for i in range(n_nu))
    scaler = fit_scaler(train.vectors, config)
    Xs = apply_scaler(scaler, train.vectors)
    n = len(Xs)
    iu = np.triu_indices(n, k=1)
    sq = ((Xs[iu[0]] - Xs[iu[1]]) ** 2).sum(axis=1)
    med = float(np.median(sq)) if len(sq) else 1.0
    if med <= 0:
        med = 1.0
    gammas = tuple(2.0 ** e / med for e in gamma_exponents)
    folds = min(folds, min(train.positives, train.negatives))
    return HyperGrid(nus, gammas, max(folds, 2))


@dataclass
class CvReport:
    entries: list = field(default_factory=list)  # (nu, gamma, fold_accs, mean)
    best: tuple[float, float] | None = None
    folds: int = 0
    seed: int = 0


def _stratified_folds(labels: np.ndarray, folds: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(folds)]
    for cls in (1, -1):
        idx = np.nonzero(labels == cls)[0]
        rng.shuffle(idx)
        for k, i in enumerate(idx):
            parts[k % folds].append(i)
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def _cv_point(Xs, y, folds_idx, nu, gamma, eps, cache_bytes):
    accs = []
    all_idx = np.arange(len(y))
    for test_idx in folds_idx:
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[test_idx] = False
        tr = all_idx[train_mask]
        if not (np.any(y[tr] > 0) and np.any(y[tr] < 0)) or len(test_idx) == 0:
            accs.append(0.0)
            continue
        nu_eff = min(nu, nu_max(y[tr]))
        res = solve_nu_svm(Xs[tr], y[tr], nu_eff, gamma, eps=eps,
                           cache_bytes=cache_bytes)
        sv = res.alpha > 0
        K = kernel_matrix(Xs[test_idx], Xs[tr][sv], gamma)
        dec = K @ (y[tr][sv] * res.alpha[sv]) + res.bias
        pred = np.where(dec >= 0, 1, -1)
        accs.append(float(np.mean(pred == y[test_idx])))
    return tuple(accs)


def grid_search(train: TrainingSet, config: FeatureConfig,
                grid: HyperGrid | None = None, workers: int = 1,
                cv_seed: int = 0, eps: float = DEFAULT_EPS,
                cache_bytes: int = DEFAULT_CACHE_BYTES):
    """(nu*, gamma*, CvReport) by stratified C-fold cross validation.

    Grid points are evaluated independently (optionally in parallel); ties
    break deterministically toward higher accuracy, then smaller nu, then
    smaller gamma, so the result never depends on the worker count.
    """
    if train.positives == 0 or train.negatives == 0:
        raise SvmError("both classes must be present")
    if grid is None:
        grid = default_grid(train, config)
    elif isinstance(grid, dict):
        grid = default_grid(train, config, **grid)
    folds = min(grid.folds, min(train.positives, train.negatives))
    if folds < 2:
        raise SvmError("not enough samples per class for cross validation")
    scaler = fit_scaler(train.vectors, config)
    Xs = apply_scaler(scaler, train.vectors)
    y = train.labels
    folds_idx = _stratified_folds(y, folds, cv_seed)
    cap = nu_max(y)
    points = [(nu, gamma) for nu in grid.nus for gamma in grid.gammas
              if 0.0 < nu <= cap + 1e-12]
    if not points:
        raise SvmError("every grid point is infeasible")

    def run(point):
        nu, gamma = point
        return _cv_point(Xs, y, folds_idx, nu, gamma, eps, cache_bytes)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, points))
    else:
        results = [run(p) for p in points]

    report = CvReport(folds=folds, seed=cv_seed)
    best_key = None
    best_point = None
    for (nu, gamma), accs in zip(points, results):
        mean = float(np.mean(accs))
        report.entries.append((nu, gamma, accs, mean))
        key = (-mean, nu, gamma)
        if best_key is None or key < best_key:
            best_key = key
            best_point = (nu, gamma)
    report.best = best_point
    return best_point[0], best_point[1], report


def fit_with_grid_search(train: TrainingSet, config: FeatureConfig,
                         grid: HyperGrid | None = None, workers: int = 1,
                         cv_seed: int = 0, eps: float = DEFAULT_EPS,
                         cache_bytes: int = DEFAULT_CACHE_BYTES):
    nu, gamma, report = grid_search(train, config, grid, workers, cv_seed,
                                    eps, cache_bytes)
    model = train_model(train, config, nu, gamma, eps=eps, cache_bytes=cache_bytes)
    return model, report


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _pack_array(arr: np.ndarray) -> tuple[dict, bytes]:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    blob = arr.astype(dt, copy=False).tobytes()
    return {"dtype": dt.str, "shape": list(arr.shape)}, blob


def serialize_model(model: SvmModel, train: TrainingSet, path) -> None:
    """Single little-endian container: header, config, scaler, model arrays,
    and the full unscaled training set for retraining."""
    arrays = [
        ("scaler_mean", model.scaler.mean),
        ("scaler_std", model.scaler.std),
        ("support_vectors", model.support_vectors),
        ("dual_coef", model.dual_coef),
        ("alpha", model.alpha),
        ("train_vectors", train.vectors),
        ("train_labels", train.labels.astype(np.int8)),
        ("scalars", np.array([model.bias, model.rho, model.nu, model.gamma,
                              model.eps,
                              model.platt[0] if model.platt else 0.0,
                              model.platt[1] if model.platt else 0.0])),
    ]
    descriptors = []
    blobs = []
    for name, arr in arrays:
        desc, blob = _pack_array(arr)
        desc["name"] = name
        descriptors.append(desc)
        blobs.append(blob)
    header = {
        "version": _MODEL_VERSION,
        "calibrated": model.platt is not None,
        "feature_config": model.config.to_kv(),
        "arrays": descriptors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", _MODEL_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def deserialize_model(path) -> tuple[SvmModel, TrainingSet]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(_MODEL_MAGIC) + 16 or not data.startswith(_MODEL_MAGIC):
        raise ModelFormatError(f"{path}: not a model file")
    off = len(_MODEL_MAGIC)
    version, = struct.unpack_from("<I", data, off)
    off += 4
    if version != _MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    payload_len, = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) != off + payload_len + 4:
        raise ModelFormatError(f"{path}: truncated or oversized model file")
    payload = data[off:off + payload_len]
    crc, = struct.unpack_from("<I", data, off + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ModelFormatError(f"{path}: checksum mismatch, file corrupt")
    hlen, = struct.unpack_from("<I", payload, 0)
    try:
        header = json.loads(payload[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: malformed header") from exc
    arrays = {}
    pos = 4 + hlen
    for desc in header["arrays"]:
        dt = np.dtype(desc["dtype"])
        count = int(np.prod(desc["shape"])) if desc["shape"] else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(payload):
            raise ModelFormatError(f"{path}: array data out of bounds")
        arrays[desc["name"]] = np.frombuffer(
            payload, dtype=dt, count=count, offset=pos).reshape(desc["shape"]).copy()
        pos += nbytes
    if pos != len(payload):
        raise ModelFormatError(f"{path}: trailing bytes in model file")
    config = FeatureConfig.from_kv(header["feature_config"])
    scalars = arrays["scalars"]
    model = SvmModel(
        config=config,
        scaler=ScalerParams(arrays["scaler_mean"], arrays["scaler_std"]),
        support_vectors=arrays["support_vectors"],
        dual_coef=arrays["dual_coef"],
        alpha=arrays["alpha"],
        bias=float(scalars[0]), rho=float(scalars[1]),
        nu=float(scalars[2]), gamma=float(scalars[3]), eps=float(scalars[4]),
        platt=(float(scalars[5]), float(scalars[6])) if header["calibrated"] else None)
    train = TrainingSet(arrays["train_vectors"], arrays["train_labels"].astype(np.int64))
    if train.vectors.shape[1] != vector_length(config):
        raise ModelFormatError(f"{path}: training vectors do not match feature config")
    return model, train
