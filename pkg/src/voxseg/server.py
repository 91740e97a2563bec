"""HTTP API for driving a live segmentation session: slice views with
confidence/uncertainty overlays, seed submission, asynchronous iteration
jobs with polling, and artifact export.

All non-image bodies are key-value text documents (see ``textkv``);
errors carry a machine-readable ``code`` plus ``message``.  Long-running
work (train + classify) runs as a per-session background job; layers are
swapped atomically on completion, so readers never observe a
half-updated volume.
"""

from __future__ import annotations

import io
import os
import tarfile
import tempfile
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import PlainTextResponse, Response
from PIL import Image

from . import textkv
from .features import FeatureConfig
from .learner import (LearnerError, Seed, Session, check_seed_conflicts,
                      classify_volume, format_seeds, multires_segment,
                      train_iteration)
from .svm import serialize_model
from .volume import Box, load_volume, save_volume

_AXES = {"x": 0, "y": 1, "z": 2}


def _kv_response(entries: dict, status: int = 200) -> PlainTextResponse:
    return PlainTextResponse(textkv.dumps({k: str(v) for k, v in entries.items()}),
                             status_code=status)


def _error(status: int, code: str, message: str) -> PlainTextResponse:
    return _kv_response({"code": code, "message": message.replace("\n", " ")}, status)


@dataclass
class SessionHandle:
    session: Session
    volume_path: str
    state: str = "idle"            # idle | training | classifying
    progress: float = 0.0
    error: str = ""
    pending: list[Seed] = field(default_factory=list)
    layers: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    def __init__(self, workers: int = 1):
        self.workers = workers
        self._sessions: dict[str, SessionHandle] = {}
        self._lock = threading.Lock()

    def create(self, handle: SessionHandle) -> str:
        sid = uuid.uuid4().hex[:12]
        with self._lock:
            self._sessions[sid] = handle
        return sid

    def get(self, sid: str) -> SessionHandle | None:
        with self._lock:
            return self._sessions.get(sid)

    def remove(self, sid: str) -> bool:
        with self._lock:
            return self._sessions.pop(sid, None) is not None


def _run_job(handle: SessionHandle, seeds: list[Seed]) -> None:
    session = handle.session
    try:
        handle.state = "training"
        handle.progress = 0.0
        train_iteration(session, seeds)
        handle.state = "classifying"
        handle.progress = 0.5

        def on_progress(f: float) -> None:
            handle.progress = max(handle.progress, 0.5 + 0.5 * min(f, 1.0))

        if session.levels > 1:
            conf = multires_segment(session, progress=on_progress)
        else:
            conf = classify_volume(session, progress=on_progress)
        with handle.lock:
            handle.layers = {"confidence": conf,
                             "uncertainty": session.uncertainty_values}
            handle.progress = 1.0
            handle.state = "idle"
    except Exception as exc:
        with handle.lock:
            handle.error = str(exc)
            handle.state = "idle"


def _render_slice(data: np.ndarray, vmin: float, vmax: float) -> bytes:
    span = vmax - vmin
    if span <= 0:
        span = 1.0
    img = np.clip((data.astype(np.float64) - vmin) / span, 0.0, 1.0)
    png = Image.fromarray(np.round(img * 255.0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    png.save(buf, format="PNG")
    return buf.getvalue()


def create_app(workers: int = 1) -> FastAPI:
    app = FastAPI(title="voxseg", docs_url=None, redoc_url=None)
    store = SessionStore(workers=workers)
    app.state.store = store

    @app.post("/sessions")
    async def create_session(request: Request):
        try:
            body = textkv.loads((await request.body()).decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            return _error(400, "bad_request", f"malformed body: {exc}")
        if "checkpoint" in body:
            try:
                from .learner import load_checkpoint
                source = load_volume(body["volume"]) if "volume" in body else None
                session = load_checkpoint(body["checkpoint"], source)
                session.workers = workers
            except Exception as exc:
                return _error(400, "bad_checkpoint", str(exc))
            handle = SessionHandle(session=session,
                                   volume_path=body.get("volume", ""))
            if session.confidence is not None:
                handle.layers = {"confidence": session.confidence,
                                 "uncertainty": session.uncertainty_values}
            return _kv_response({"id": store.create(handle)}, status=201)
        if "volume" not in body:
            return _error(400, "bad_request", "missing volume path")
        try:
            source = load_volume(body["volume"])
            config = FeatureConfig.from_kv(body)
            session = Session(
                source=source, config=config,
                delta=float(body.get("delta", "1.0")),
                levels=int(body.get("levels", "1")),
                cv_seed=int(body.get("cv_seed", "0")),
                workers=workers)
        except Exception as exc:
            return _error(400, "bad_volume", str(exc))
        sid = store.create(SessionHandle(session=session, volume_path=body["volume"]))
        return _kv_response({"id": sid}, status=201)

    def _handle(sid: str) -> SessionHandle | None:
        return store.get(sid)

    @app.get("/sessions/{sid}/status")
    def status(sid: str):
        handle = _handle(sid)
        if handle is None:
            return _error(404, "unknown_session", f"no session {sid}")
        session = handle.session
        with handle.lock:
            entries = {
                "id": sid,
                "state": handle.state,
                "progress": repr(round(handle.progress, 4)),
                "iteration": session.iteration,
                "levels": session.levels,
                "delta": repr(session.delta),
                "dims": " ".join(str(d) for d in session.source.dims),
                "seeds": len(session.seeds),
                "pending": len(handle.pending),
                "layers": ",".join(sorted(handle.layers)) or "-",
            }
            if handle.error:
                entries["error"] = handle.error
        return _kv_response(entries)

    @app.get("/sessions/{sid}/slice")
    def get_slice(sid: str, axis: str = "z", index: int = 0,
                  layer: str = "gray", min: float | None = None,
                  max: float | None = None):
        handle = _handle(sid)
        if handle is None:
            return _error(404, "unknown_session", f"no session {sid}")
        if axis not in _AXES:
            return _error(400, "bad_axis", f"axis must be x/y/z, got {axis!r}")
        session = handle.session
        ax = _AXES[axis]
        dims = session.source.dims
        if not 0 <= index < dims[ax]:
            return _error(400, "bad_index", f"index {index} outside [0, {dims[ax]})")
        if layer == "gray":
            lo = [0, 0, 0]
            hi = list(dims)
            lo[ax] = index
            hi[ax] = index + 1
            data = session.source.read_region(Box(tuple(lo), tuple(hi)))
            data = np.squeeze(data, axis=ax)
            if min is None and max is None and data.dtype.kind == "u":
                vmin, vmax = 0.0, float(np.iinfo(data.dtype).max)
            else:
                vmin = float(min) if min is not None else float(data.min())
                vmax = float(max) if max is not None else float(data.max())
        elif layer in ("confidence", "uncertainty"):
            with handle.lock:
                vol = handle.layers.get(layer)
            if vol is None:
                return _error(409, "layer_not_computed",
                              f"layer {layer} is not available before an iteration")
            data = np.take(vol, index, axis=ax)
            default_hi = 100.0 if layer == "confidence" else 1.0
            vmin = float(min) if min is not None else 0.0
            vmax = float(max) if max is not None else default_hi
        else:
            return _error(400, "bad_layer", f"unknown layer {layer!r}")
        return Response(content=_render_slice(data, vmin, vmax), media_type="image/png")

    @app.post("/sessions/{sid}/seeds")
    async def post_seeds(sid: str, request: Request):
        handle = _handle(sid)
        if handle is None:
            return _error(404, "unknown_session", f"no session {sid}")
        if handle.state != "idle":
            return _error(409, "busy", "session is busy")
        session = handle.session
        text = (await request.body()).decode("utf-8")
        accepted, rejected, reasons = 0, 0, []
        half = session.config.env_size // 2
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                from .learner import parse_seed_line
                seed = parse_seed_line(line)
                if any(c - half < 0 or c + half >= d
                       for c, d in zip(seed.position, session.source.dims)):
                    raise LearnerError(
                        f"seed at {seed.position} has no full environment")
                check_seed_conflicts(session.seeds + handle.pending, [seed])
                handle.pending.append(seed)
                accepted += 1
            except (LearnerError, ValueError) as exc:
                rejected += 1
                if len(reasons) < 5:
                    reasons.append(str(exc))
        entries = {"accepted": accepted, "rejected": rejected}
        if reasons:
            entries["reason"] = "; ".join(reasons)
        return _kv_response(entries)

    @app.post("/sessions/{sid}/iterate")
    def iterate(sid: str):
        handle = _handle(sid)
        if handle is None:
            return _error(404, "unknown_session", f"no session {sid}")
        if handle.state != "idle":
            return _error(409, "busy", "a job is already running")
        session = handle.session
        labels = [s.label for s in session.seeds] + [s.label for s in handle.pending]
        if not (any(l > 0 for l in labels) and any(l < 0 for l in labels)):
            return _error(409, "single_class",
                          "need at least one positive and one negative seed")
        seeds, handle.pending = handle.pending, []
        handle.error = ""
        handle.state = "training"
        handle.progress = 0.0
        thread = threading.Thread(target=_run_job, args=(handle, seeds), daemon=True)
        thread.start()
        return _kv_response({"accepted": "1", "iteration": session.iteration + 1}, 202)

    @app.get("/sessions/{sid}/export")
    def export(sid: str, what: str = "confidence"):
        handle = _handle(sid)
        if handle is None:
            return _error(404, "unknown_session", f"no session {sid}")
        session = handle.session
        if what == "seeds":
            seeds = session.seeds + handle.pending
            return PlainTextResponse(format_seeds(seeds), media_type="text/plain")
        if what == "model":
            model = session.models.get(session.levels)
            if model is None:
                return _error(409, "missing_artifact", "no trained model yet")
            with tempfile.TemporaryDirectory() as tmp:
                path = os.path.join(tmp, "model.bin")
                serialize_model(model, session.training[session.levels], path)
                with open(path, "rb") as fh:
                    blob = fh.read()
            return Response(content=blob, media_type="application/octet-stream")
        if what in ("confidence", "uncertainty"):
            with handle.lock:
                vol = handle.layers.get(what)
            if vol is None:
                return _error(409, "missing_artifact", f"{what} not computed yet")
            with tempfile.TemporaryDirectory() as tmp:
                base = os.path.join(tmp, what)
                save_volume(vol, base, session.source.spacing)
                buf = io.BytesIO()
                with tarfile.open(fileobj=buf, mode="w") as tar:
                    tar.add(base + ".raw", arcname=f"{what}.raw")
                    tar.add(base + ".meta", arcname=f"{what}.meta")
            return Response(content=buf.getvalue(), media_type="application/x-tar")
        return _error(400, "bad_request", f"unknown export {what!r}")

    @app.post("/sessions/{sid}/checkpoint")
    async def checkpoint(sid: str, request: Request):
        handle = _handle(sid)
        if handle is None:
            return _error(404, "unknown_session", f"no session {sid}")
        if handle.state != "idle":
            return _error(409, "busy", "cannot checkpoint a busy session")
        try:
            body = textkv.loads((await request.body()).decode("utf-8"))
            directory = body["dir"]
        except (UnicodeDecodeError, ValueError, KeyError) as exc:
            return _error(400, "bad_request", f"malformed body: {exc}")
        from .learner import save_checkpoint
        save_checkpoint(handle.session, directory,
                        volume_path=handle.volume_path or None)
        return _kv_response({"saved": directory})

    @app.delete("/sessions/{sid}")
    def delete(sid: str):
        handle = _handle(sid)
        if handle is not None and handle.state != "idle":
            return _error(409, "busy", "cannot delete a busy session")
        if not store.remove(sid):
            return _error(404, "unknown_session", f"no session {sid}")
        return _kv_response({"deleted": sid})

    ui_dir = os.environ.get("VOXSEG_UI_DIR", os.path.join("frontend", "dist"))
    if os.path.isdir(ui_dir):
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app
