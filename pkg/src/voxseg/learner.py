"""Active-learning segmentation loop: seed accumulation, per-level model
training, chunked voxelwise classification, uncertainty volumes, and the
coarse-to-fine candidate pruning pass.

Classification is deterministic and worker-count independent: positions
are enumerated in global row-major order and cut into fixed-size chunks,
each chunk is evaluated as one batch with identical shapes no matter
which worker runs it, and outputs land in disjoint regions.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import multiprocessing as mp

import numpy as np
from scipy import ndimage

from . import textkv
from .features import FeatureConfig, FeatureExtractor
from .svm import (CvReport, HyperGrid, SvmModel, TrainingSet,
                  deserialize_model, fit_with_grid_search,
                  predict_confidence_many, serialize_model)
from .volume import Box, MultiresView, VoxelVolume, interior_box, load_volume, save_volume

DEFAULT_CHUNK = 8192
_CLAMP = 0.5 - 1e-9


class LearnerError(Exception):
    pass


# ---------------------------------------------------------------------------
# Uncertainty (confidence -> oracle guidance)
# ---------------------------------------------------------------------------

def log_uncertainty(confidence, delta: float):
    """log U = -delta * tan(pi * |S - 1/2|), with the argument clamped just
    below 1/2 where the tangent diverges."""
    s = np.asarray(confidence, dtype=np.float64)
    t = np.minimum(np.abs(s - 0.5), _CLAMP)
    return -delta * np.tan(np.pi * t)


def uncertainty(confidence: float, delta: float) -> float:
    """U = exp(-delta * tan(pi |S - 1/2|)): 1 at S = 1/2, decaying to 0 at
    the confident extremes; delta controls the width of the bell."""
    if not 0.0 <= confidence <= 1.0:
        raise LearnerError(f"confidence {confidence} outside [0, 1]")
    if delta < 0.0:
        raise LearnerError("delta must be >= 0")
    return float(np.exp(log_uncertainty(confidence, delta)))


def uncertainty_volume(confidence_percent: np.ndarray, delta: float) -> np.ndarray:
    """Voxelwise uncertainty of a quantized confidence volume (integer
    percent), stored as float32."""
    s = np.asarray(confidence_percent, dtype=np.float64) / 100.0
    return np.exp(log_uncertainty(s, delta)).astype(np.float32)


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Seed:
    position: tuple[int, int, int]
    label: int
    level: int = 0  # resolution level the oracle picked it on; 0 = native

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise LearnerError(f"seed label must be +1/-1, got {self.label}")
        object.__setattr__(self, "position", tuple(int(c) for c in self.position))


def parse_seed_line(line: str) -> Seed:
    parts = line.split()
    if len(parts) != 4:
        raise LearnerError(f"malformed seed line: {line!r}")
    x, y, z = (int(v) for v in parts[:3])
    if parts[3] not in ("+1", "-1", "1"):
        raise LearnerError(f"invalid seed label {parts[3]!r}")
    return Seed((x, y, z), 1 if parts[3] in ("+1", "1") else -1)


def parse_seed_file(path) -> list[Seed]:
    seeds = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            seeds.append(parse_seed_line(line))
    return seeds


def format_seeds(seeds) -> str:
    return "".join(
        f"{s.position[0]} {s.position[1]} {s.position[2]} "
        f"{'+1' if s.label > 0 else '-1'}\n"
        for s in seeds)


def write_seed_file(seeds, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_seeds(seeds))


def check_seed_conflicts(existing, new) -> None:
    labels = {s.position: s.label for s in existing}
    for s in new:
        old = labels.get(s.position)
        if old is not None and old != s.label:
            raise LearnerError(f"conflicting label for seed at {s.position}")
        labels[s.position] = s.label


# ---------------------------------------------------------------------------
# Chunked classification engine
# ---------------------------------------------------------------------------

def _normalize_boxes(dims, boxes):
    if boxes is None:
        return [Box.full(dims)]
    return [b.clip(dims) for b in boxes if not b.clip(dims).is_empty]


def iter_chunks(dims, env_size: int, boxes, chunk: int = DEFAULT_CHUNK):
    """Deterministic chunks of classifiable positions (row-major order)."""
    interior = interior_box(dims, env_size)
    boxes = _normalize_boxes(dims, boxes)
    buf: list[np.ndarray] = []
    count = 0
    for x in range(interior.lo[0], interior.hi[0]):
        mask = np.zeros((dims[1], dims[2]), dtype=bool)
        hit = False
        for b in boxes:
            bi = b.intersect(interior)
            if bi.is_empty or not bi.lo[0] <= x < bi.hi[0]:
                continue
            mask[bi.lo[1]:bi.hi[1], bi.lo[2]:bi.hi[2]] = True
            hit = True
        if not hit:
            continue
        ys, zs = np.nonzero(mask)
        if len(ys) == 0:
            continue
        pos = np.empty((len(ys), 3), dtype=np.int32)
        pos[:, 0] = x
        pos[:, 1] = ys
        pos[:, 2] = zs
        buf.append(pos)
        count += len(ys)
        while count >= chunk:
            allpos = buf[0] if len(buf) == 1 else np.concatenate(buf)
            yield allpos[:chunk]
            buf = [allpos[chunk:]]
            count = len(buf[0])
    if count:
        yield buf[0] if len(buf) == 1 else np.concatenate(buf)


def count_chunk_positions(dims, env_size: int, boxes) -> int:
    interior = interior_box(dims, env_size)
    boxes = _normalize_boxes(dims, boxes)
    total = 0
    for x in range(interior.lo[0], interior.hi[0]):
        mask = np.zeros((dims[1], dims[2]), dtype=bool)
        for b in boxes:
            bi = b.intersect(interior)
            if not bi.is_empty and bi.lo[0] <= x < bi.hi[0]:
                mask[bi.lo[1]:bi.hi[1], bi.lo[2]:bi.hi[2]] = True
        total += int(mask.sum())
    return total


def gather_environments(source, positions: np.ndarray, env_size: int) -> np.ndarray:
    """(n, K, K, K) float64 stack of environments around ``positions``."""
    half = env_size // 2
    pos = np.asarray(positions, dtype=np.int64)
    lo = pos.min(axis=0) - half
    hi = pos.max(axis=0) + half + 1
    region = np.asarray(source.read_region(Box(tuple(lo), tuple(hi))), dtype=np.float64)
    windows = np.lib.stride_tricks.sliding_window_view(
        region, (env_size, env_size, env_size))
    local = pos - lo - half
    return windows[local[:, 0], local[:, 1], local[:, 2]]


_WORKER: dict = {}


def _worker_init(source, model, quantize, threshold):
    _WORKER["source"] = source
    _WORKER["extractor"] = FeatureExtractor(model.config)
    _WORKER["model"] = model
    _WORKER["quantize"] = quantize
    _WORKER["threshold"] = threshold


def _eval_positions(source, extractor, model, positions, quantize, threshold):
    envs = gather_environments(source, positions, model.config.env_size)
    feats = extractor.extract(envs, centers=positions.astype(np.float64))
    conf = predict_confidence_many(model, feats)
    if quantize:
        return np.minimum(np.floor(100.0 * conf), 100.0).astype(np.uint8)
    if threshold is not None:
        return positions[conf > threshold]
    return conf.astype(np.float32)


def _worker_eval(positions):
    return _eval_positions(_WORKER["source"], _WORKER["extractor"], _WORKER["model"],
                           positions, _WORKER["quantize"], _WORKER["threshold"])


def _map_chunks(source, model, chunks, workers, quantize, threshold=None,
                progress=None, total=None):
    """Yield (positions, result) per chunk; chunk content never depends on
    the worker count, only the scheduling does."""
    done = 0
    if workers <= 1:
        extractor = FeatureExtractor(model.config)
        for pos in chunks:
            yield pos, _eval_positions(source, extractor, model, pos,
                                       quantize, threshold)
            done += 1
            if progress and total:
                progress(done / total)
        return
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                             initializer=_worker_init,
                             initargs=(source, model, quantize, threshold)) as pool:
        pending = []
        inflight = 2 * workers
        for pos in chunks:
            pending.append((pos, pool.submit(_worker_eval, pos)))
            if len(pending) >= inflight:
                p, fut = pending.pop(0)
                yield p, fut.result()
                done += 1
                if progress and total:
                    progress(done / total)
        for p, fut in pending:
            yield p, fut.result()
            done += 1
            if progress and total:
                progress(done / total)


def classify_region(source, model: SvmModel, boxes=None, workers: int = 1,
                    chunk: int = DEFAULT_CHUNK, progress=None) -> np.ndarray:
    """Quantized confidence volume floor(100 S) over every position with a
    full environment inside ``boxes``; everything else is 0."""
    if model.platt is None:
        raise LearnerError("model is not calibrated")
    dims = source.dims
    out = np.zeros(dims, dtype=np.uint8)
    total = None
    if progress is not None:
        total = -(-count_chunk_positions(dims, model.config.env_size, boxes) // chunk)
    chunks = iter_chunks(dims, model.config.env_size, boxes, chunk)
    for pos, values in _map_chunks(source, model, chunks, workers, True,
                                   progress=progress, total=total):
        out[pos[:, 0], pos[:, 1], pos[:, 2]] = values
    return out


def keep_above_threshold(source, model: SvmModel, boxes, rho: float,
                         workers: int = 1, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Positions whose unquantized confidence exceeds rho, (n, 3) int32."""
    if model.platt is None:
        raise LearnerError("model is not calibrated")
    kept = []
    chunks = iter_chunks(source.dims, model.config.env_size, boxes, chunk)
    for _, positions in _map_chunks(source, model, chunks, workers, False,
                                    threshold=rho):
        if len(positions):
            kept.append(positions)
    if not kept:
        return np.empty((0, 3), dtype=np.int32)
    return np.concatenate(kept)


# ---------------------------------------------------------------------------
# Multiresolution candidates
# ---------------------------------------------------------------------------

def confidence_threshold(pos_confidences, neg_confidences) -> float:
    """Exact minimizer of the class-balanced misclassification sum over the
    midpoint scan set; ties break toward the smallest threshold so coarse
    levels favor recall."""
    pos = np.asarray(pos_confidences, dtype=np.float64)
    neg = np.asarray(neg_confidences, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise LearnerError("both classes need at least one confidence value")
    values = np.unique(np.concatenate([pos, neg]))
    candidates = [0.0]
    candidates.extend(0.5 * (values[:-1] + values[1:]))
    candidates.append(1.0)
    best_rho, best_err = None, None
    for rho in candidates:
        # Heaviside with H(0) = 1 on both class terms
        err = float(np.mean(pos <= rho) + np.mean(neg >= rho))
        if best_err is None or err < best_err - 1e-15:
            best_rho, best_err = float(rho), err
    return best_rho


def _merge_overlapping(boxes: list[Box]) -> list[Box]:
    boxes = list(boxes)
    changed = True
    while changed:
        changed = False
        out: list[Box] = []
        for b in boxes:
            merged = b
            rest = []
            for o in out:
                if merged.overlaps(o):
                    merged = merged.union_bbox(o)
                    changed = True
                else:
                    rest.append(o)
            rest.append(merged)
            out = rest
        boxes = out
    return sorted(boxes, key=lambda b: (b.lo, b.hi))


def find_candidates(view, prev_boxes, model: SvmModel, rho: float,
                    workers: int = 1, chunk: int = DEFAULT_CHUNK) -> list[Box]:
    """One pruning step: classify level voxels inside the previous candidate
    boxes, keep confidences strictly above rho, group the survivors into
    26-connected components, dilate their bounding boxes by K//2, and scale
    the result to the next (finer) level's grid."""
    if view.factor < 2:
        raise LearnerError("find_candidates needs a view above the finest level")
    kept = keep_above_threshold(view, model, prev_boxes, rho, workers, chunk)
    if len(kept) == 0:
        return []
    mask = np.zeros(view.dims, dtype=bool)
    mask[kept[:, 0], kept[:, 1], kept[:, 2]] = True
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    next_dims = tuple(-(-d // (view.factor // 2)) for d in view.source.dims)
    dilation = model.config.env_size // 2
    boxes = []
    for sl in ndimage.find_objects(labels):
        b = Box(tuple(s.start for s in sl), tuple(s.stop for s in sl))
        b = b.dilate(dilation).clip(view.dims).scale(2).clip(next_dims)
        if not b.is_empty:
            boxes.append(b)
    return _merge_overlapping(boxes)


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------

@dataclass
class Session:
    """State of one interactive segmentation: accumulated seeds, per-level
    models and thresholds, and the latest confidence/uncertainty volumes."""

    source: VoxelVolume
    config: FeatureConfig
    delta: float = 1.0
    levels: int = 1
    grid: HyperGrid | dict | None = None  # dict = default_grid(**dict) per fit
    cv_seed: int = 0
    workers: int = 1
    chunk: int = DEFAULT_CHUNK
    cache_bytes: int = 256 * 1024 * 1024  # solver kernel-row cache budget
    seeds: list[Seed] = field(default_factory=list)
    training: dict[int, TrainingSet] = field(default_factory=dict)
    models: dict[int, SvmModel] = field(default_factory=dict)
    thresholds: dict[int, float] = field(default_factory=dict)
    reports: dict[int, CvReport] = field(default_factory=dict)
    candidates: dict[int, list[Box]] = field(default_factory=dict)
    confidence: np.ndarray | None = None
    uncertainty_values: np.ndarray | None = None
    iteration: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise LearnerError("levels must be >= 1")
        if self.delta < 0:
            raise LearnerError("delta must be >= 0")

    def view(self, level: int):
        if not 1 <= level <= self.levels:
            raise LearnerError(f"level {level} outside [1, {self.levels}]")
        if level == self.levels:
            return self.source
        return MultiresView(self.source, level, self.levels)

    def level_position(self, position, level: int) -> tuple[int, int, int]:
        f = 2 ** (self.levels - level)
        return tuple(int(p) // f for p in position)


def _validate_seed_environments(session: Session, seeds) -> None:
    half = session.config.env_size // 2
    for level in range(1, session.levels + 1):
        dims = session.view(level).dims
        for s in seeds:
            p = session.level_position(s.position, level)
            if any(c - half < 0 or c + half >= d for c, d in zip(p, dims)):
                raise LearnerError(
                    f"seed at {s.position} has no full environment at level {level}")


def train_iteration(session: Session, new_seeds) -> Session:
    """Append labeled seeds, extract their features on every resolution
    level, and retrain model + Platt calibration + threshold per level."""
    new_seeds = [s if isinstance(s, Seed) else Seed(tuple(s[0]), int(s[1]))
                 for s in new_seeds]
    check_seed_conflicts(session.seeds, new_seeds)
    for s in new_seeds:
        session.source._check_pos(s.position)
    _validate_seed_environments(session, new_seeds)

    all_labels = [s.label for s in session.seeds] + [s.label for s in new_seeds]
    if not (any(l > 0 for l in all_labels) and any(l < 0 for l in all_labels)):
        raise LearnerError("training needs seeds of both classes")

    extractor = FeatureExtractor(session.config)
    if new_seeds:
        for level in range(1, session.levels + 1):
            view = session.view(level)
            positions = np.asarray(
                [session.level_position(s.position, level) for s in new_seeds],
                dtype=np.int64)
            envs = gather_environments(view, positions, session.config.env_size)
            feats = extractor.extract(envs, centers=positions.astype(np.float64))
            labels = np.asarray([s.label for s in new_seeds], dtype=np.int64)
            prev = session.training.get(level)
            if prev is None:
                session.training[level] = TrainingSet(feats, labels)
            else:
                session.training[level] = TrainingSet(
                    np.vstack([prev.vectors, feats]),
                    np.concatenate([prev.labels, labels]))
        session.seeds.extend(new_seeds)

    for level in range(1, session.levels + 1):
        train = session.training[level]
        model, report = fit_with_grid_search(
            train, session.config, grid=session.grid,
            workers=session.workers, cv_seed=session.cv_seed,
            cache_bytes=session.cache_bytes)
        session.models[level] = model
        session.reports[level] = report
        conf = predict_confidence_many(model, train.vectors)
        session.thresholds[level] = confidence_threshold(
            conf[train.labels > 0], conf[train.labels < 0])
    session.iteration += 1
    return session


def classify_volume(session: Session, region: Box | None = None,
                    progress=None) -> np.ndarray:
    """Single-level (finest) classification pass; updates session state."""
    model = session.models.get(session.levels)
    if model is None:
        raise LearnerError("session has no trained model")
    boxes = None if region is None else [region]
    conf = classify_region(session.source, model, boxes,
                           workers=session.workers, chunk=session.chunk,
                           progress=progress)
    session.confidence = conf
    session.uncertainty_values = uncertainty_volume(conf, session.delta)
    return conf


def multires_segment(session: Session, progress=None) -> np.ndarray:
    """Coarse-to-fine segmentation: prune candidate regions level by level,
    then classify only the surviving voxels at the finest resolution."""
    for level in range(1, session.levels + 1):
        if level not in session.models:
            raise LearnerError(f"level {level} has no trained model")
    if session.levels == 1:
        return classify_volume(session, progress=progress)

    boxes = [Box.full(session.view(1).dims)]
    session.candidates = {0: boxes}
    steps = session.levels
    for level in range(1, session.levels):
        boxes = find_candidates(session.view(level), boxes,
                                session.models[level],
                                session.thresholds[level],
                                workers=session.workers, chunk=session.chunk)
        session.candidates[level] = boxes
        if progress:
            progress(level / steps)
        if not boxes:
            conf = np.zeros(session.source.dims, dtype=np.uint8)
            session.confidence = conf
            session.uncertainty_values = uncertainty_volume(conf, session.delta)
            return conf
    sub = None
    if progress:
        sub = lambda f: progress((steps - 1 + f) / steps)
    conf = classify_region(session.source, session.models[session.levels],
                           boxes, workers=session.workers, chunk=session.chunk,
                           progress=sub)
    session.confidence = conf
    session.uncertainty_values = uncertainty_volume(conf, session.delta)
    return conf


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(session: Session, directory, volume_path=None) -> None:
    os.makedirs(directory, exist_ok=True)
    params = {
        "delta": repr(session.delta),
        "levels": str(session.levels),
        "iteration": str(session.iteration),
        "cv_seed": str(session.cv_seed),
        "workers": str(session.workers),
        "chunk": str(session.chunk),
    }
    if volume_path is not None:
        params["volume"] = os.fspath(volume_path)
    for level, rho in session.thresholds.items():
        params[f"threshold_{level}"] = repr(rho)
    textkv.dump(params, os.path.join(directory, "session.kv"))
    with open(os.path.join(directory, "feature_config.kv"), "w",
              encoding="utf-8") as fh:
        fh.write(session.config.serialize())
    write_seed_file(session.seeds, os.path.join(directory, "seeds.txt"))
    for level, model in session.models.items():
        serialize_model(model, session.training[level],
                        os.path.join(directory, f"model_level{level}.bin"))
    if session.confidence is not None:
        save_volume(session.confidence, os.path.join(directory, "confidence"),
                    session.source.spacing)
    if session.uncertainty_values is not None:
        save_volume(session.uncertainty_values,
                    os.path.join(directory, "uncertainty"),
                    session.source.spacing)


def load_checkpoint(directory, source: VoxelVolume | None = None) -> Session:
    params = textkv.load(os.path.join(directory, "session.kv"))
    if source is None:
        if "volume" not in params:
            raise LearnerError("checkpoint lacks a volume path; pass one explicitly")
        source = load_volume(params["volume"])
    with open(os.path.join(directory, "feature_config.kv"), encoding="utf-8") as fh:
        config = FeatureConfig.deserialize(fh.read())
    session = Session(
        source=source, config=config,
        delta=float(params["delta"]), levels=int(params["levels"]),
        cv_seed=int(params.get("cv_seed", "0")),
        workers=int(params.get("workers", "1")),
        chunk=int(params.get("chunk", str(DEFAULT_CHUNK))))
    session.iteration = int(params.get("iteration", "0"))
    session.seeds = parse_seed_file(os.path.join(directory, "seeds.txt"))
    for level in range(1, session.levels + 1):
        path = os.path.join(directory, f"model_level{level}.bin")
        if os.path.exists(path):
            model, train = deserialize_model(path)
            session.models[level] = model
            session.training[level] = train
        key = f"threshold_{level}"
        if key in params:
            session.thresholds[level] = float(params[key])
    conf_path = os.path.join(directory, "confidence.raw")
    if os.path.exists(conf_path):
        vol = load_volume(conf_path)
        session.confidence = vol.read_region(Box.full(vol.dims))
    unc_path = os.path.join(directory, "uncertainty.raw")
    if os.path.exists(unc_path):
        vol = load_volume(unc_path)
        session.uncertainty_values = vol.read_region(Box.full(vol.dims))
    return session


def retrain_from_file(path, new_vectors, new_labels, config=None, grid=None,
                      workers: int = 1, cv_seed: int = 0):
    """Load a serialized model, merge the stored unscaled training set with
    new samples, and retrain from scratch (grid search included)."""
    model, train = deserialize_model(path)
    cfg = config or model.config
    merged = TrainingSet(
        np.vstack([train.vectors, np.atleast_2d(new_vectors)]),
        np.concatenate([train.labels, np.asarray(new_labels, dtype=np.int64)]))
    return fit_with_grid_search(merged, cfg, grid=grid, workers=workers,
                                cv_seed=cv_seed), merged
