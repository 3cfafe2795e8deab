"""HTTP annotation service around checkpoint-backed sessions.

All model work runs on a single worker thread (torch is configured
single-threaded); request handlers submit closures and wait on futures, so
session mutations are serialized. Every mutation appends to the session's
event log and rewrites its JSON record atomically. After a restart, a
session is restored lazily by replaying its event log against the same
checkpoint, which reproduces the live state exactly.

Only instances scoring above the exposure threshold are addressable over
the API; the exposure list is frozen when the session is created and the
translation to raw query indices happens here, never in the library layer.
"""

from __future__ import annotations

import io
import json
import queue
import threading
import time
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from concurrent.futures import Future

from fastapi import FastAPI, HTTPException, UploadFile
from fastapi.responses import JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from .config import ServiceConfig
from .core import BoundingBox, Pose, Skeleton, Visibility
from .dataset_io import build_coco_dict
from .model import KeypointDetector
from .session import AnnotationSession, SessionStateError, regularize_box

__all__ = ["SESSION_RECORD_FORMAT", "create_app"]

SESSION_RECORD_FORMAT = "clickloop-session-1"


class ClickRequest(BaseModel):
    instance_index: int
    keypoint_index: int
    x: float = Field(ge=0.0, le=1.0)
    y: float = Field(ge=0.0, le=1.0)
    loop: bool = True


@dataclass
class _Handle:
    session: AnnotationSession
    exposed: list[int]
    original_dims: tuple[int, int]
    image_file: str
    finalized: bool = False
    final_state: Optional[dict] = None
    annotation_id: Optional[str] = None
    created_at: float = field(default_factory=time.time)


class _Worker:
    """Runs submitted closures one at a time on a dedicated thread."""

    def __init__(self) -> None:
        self._q: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while True:
            item = self._q.get()
            if item is None:
                return
            fn, fut = item
            if not fut.set_running_or_notify_cancel():
                continue
            try:
                fut.set_result(fn())
            except BaseException as exc:  # surfaced via the future
                fut.set_exception(exc)

    def submit(self, fn: Callable):
        fut: Future = Future()
        self._q.put((fn, fut))
        return fut.result()

    def stop(self) -> None:
        self._q.put(None)


def _decode_upload(data: bytes, canvas: tuple[int, int]) -> tuple[np.ndarray, tuple[int, int]]:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise HTTPException(status_code=400, detail=f"cannot decode image: {exc}")
    original = img.size  # (W, H)
    stretched = img.convert("RGB").resize(canvas, Image.BILINEAR)
    return np.asarray(stretched, dtype=np.uint8), original


def create_app(
    model: KeypointDetector,
    skeleton: Skeleton,
    data_dir: str | Path,
    cfg: ServiceConfig = ServiceConfig(),
    static_dir: Optional[str | Path] = None,
) -> FastAPI:
    data_dir = Path(data_dir)
    sessions_dir = data_dir / "sessions"
    images_dir = data_dir / "images"
    sessions_dir.mkdir(parents=True, exist_ok=True)
    images_dir.mkdir(parents=True, exist_ok=True)
    store_path = data_dir / "annotations.jsonl"

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        worker.stop()

    app = FastAPI(title="keypoint annotation service", lifespan=lifespan)
    worker = _Worker()
    handles: dict[str, _Handle] = {}

    # -- persistence ---------------------------------------------------------

    def _record_path(session_id: str) -> Path:
        return sessions_dir / f"{session_id}.json"

    def _state_payload(handle: _Handle) -> list[dict]:
        s = handle.session
        poses = s.poses_numpy()
        boxes = s.boxes_numpy()
        scores = s.scores_numpy()
        kscores = s.kpt_scores_numpy()
        out = []
        for i, raw in enumerate(handle.exposed):
            out.append(
                {
                    "index": i,
                    "box": [float(v) for v in boxes[raw]],
                    "score": float(scores[raw]),
                    "keypoints": [
                        [float(x), float(y), float(c)]
                        for (x, y), c in zip(poses[raw], kscores[raw])
                    ],
                }
            )
        return out

    def _persist(session_id: str, handle: _Handle) -> None:
        record = {
            "format": SESSION_RECORD_FORMAT,
            "session_id": session_id,
            "image_file": handle.image_file,
            "original_dims": list(handle.original_dims),
            "exposed": handle.exposed,
            "finalized": handle.finalized,
            "events": handle.session.event_log,
            "state": _state_payload(handle),
            "final_state": handle.final_state,
            "annotation_id": handle.annotation_id,
            "created_at": handle.created_at,
            "updated_at": time.time(),
        }
        path = _record_path(session_id)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(record))
        tmp.replace(path)

    def _restore(session_id: str) -> _Handle:
        path = _record_path(session_id)
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        record = json.loads(path.read_text())
        if record.get("format") != SESSION_RECORD_FORMAT:
            raise HTTPException(status_code=400, detail="unrecognized session record format")
        data = (images_dir / record["image_file"]).read_bytes()
        pixels, _ = _decode_upload(data, cfg.canvas)
        session = AnnotationSession.replay(model, pixels, record["events"])
        handle = _Handle(
            session=session,
            exposed=list(record["exposed"]),
            original_dims=tuple(record["original_dims"]),
            image_file=record["image_file"],
            finalized=record["finalized"],
            final_state=record.get("final_state"),
            annotation_id=record.get("annotation_id"),
            created_at=record.get("created_at", 0.0),
        )
        handles[session_id] = handle
        return handle

    def _get_handle(session_id: str) -> _Handle:
        if session_id in handles:
            return handles[session_id]
        return _restore(session_id)

    def _session_response(session_id: str, handle: _Handle) -> dict:
        return {
            "session_id": session_id,
            "instances": _state_payload(handle),
            "click_count": len(handle.session.clicks),
            "loop_count": handle.session.loop_count,
            "finalized": handle.finalized,
            "original_dims": list(handle.original_dims),
        }

    # -- endpoints ------------------------------------------------------------

    @app.get("/api/skeleton")
    def get_skeleton() -> dict:
        return {
            "name": skeleton.name,
            "names": list(skeleton.keypoint_names),
            "flip_pairs": [list(p) for p in skeleton.flip_pairs],
            "limb_edges": [list(e) for e in skeleton.limb_edges],
        }

    @app.post("/api/sessions", status_code=201)
    def create_session(image: UploadFile) -> dict:
        data = image.file.read()

        def work() -> dict:
            pixels, original = _decode_upload(data, cfg.canvas)
            session_id = uuid.uuid4().hex[:12]
            image_file = f"{session_id}.png"
            Image.open(io.BytesIO(data)).convert("RGB").save(images_dir / image_file)
            session = AnnotationSession.start(model, pixels)
            scores = session.scores_numpy()
            exposed = [int(i) for i in np.argsort(-scores, kind="stable") if scores[i] >= cfg.score_threshold]
            if not exposed:
                exposed = [int(np.argmax(scores))]
            handle = _Handle(
                session=session,
                exposed=exposed,
                original_dims=original,
                image_file=image_file,
            )
            handles[session_id] = handle
            _persist(session_id, handle)
            return _session_response(session_id, handle)

        return worker.submit(work)

    @app.get("/api/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        def work() -> dict:
            return _session_response(session_id, _get_handle(session_id))

        return worker.submit(work)

    @app.post("/api/sessions/{session_id}/clicks")
    def post_click(session_id: str, click: ClickRequest) -> dict:
        def work() -> dict:
            handle = _get_handle(session_id)
            if handle.finalized:
                raise HTTPException(status_code=409, detail="session is finalized")
            if not 0 <= click.instance_index < len(handle.exposed):
                raise HTTPException(
                    status_code=400,
                    detail=f"instance index {click.instance_index} outside "
                    f"[0, {len(handle.exposed)})",
                )
            raw = handle.exposed[click.instance_index]
            try:
                handle.session.click(raw, click.keypoint_index, click.x, click.y)
                if click.loop:
                    handle.session.loop_refine()
            except (IndexError, ValueError) as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            _persist(session_id, handle)
            return _session_response(session_id, handle)

        return worker.submit(work)

    @app.post("/api/sessions/{session_id}/undo")
    def post_undo(session_id: str) -> dict:
        def work() -> dict:
            handle = _get_handle(session_id)
            if handle.finalized:
                raise HTTPException(status_code=409, detail="session is finalized")
            try:
                handle.session.undo_click()
            except SessionStateError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            _persist(session_id, handle)
            return _session_response(session_id, handle)

        return worker.submit(work)

    @app.post("/api/sessions/{session_id}/finalize")
    def post_finalize(session_id: str) -> dict:
        def work() -> dict:
            handle = _get_handle(session_id)
            if not handle.finalized:
                poses = handle.session.poses_numpy()
                k = poses.shape[1]
                instances = []
                for i, raw in enumerate(handle.exposed):
                    vis = np.full(k, int(Visibility.LABELED_VISIBLE))
                    box = regularize_box(poses[raw], vis)
                    instances.append(
                        {
                            "index": i,
                            "box": [box.cx, box.cy, box.w, box.h],
                            "keypoints": [[float(x), float(y)] for x, y in poses[raw]],
                        }
                    )
                handle.finalized = True
                handle.final_state = {"instances": instances}
                handle.annotation_id = uuid.uuid4().hex[:12]
                entry = {
                    "annotation_id": handle.annotation_id,
                    "image_id": session_id,
                    "persons": [
                        {"box": inst["box"], "pose": inst["keypoints"]}
                        for inst in instances
                    ],
                    "click_count": len(handle.session.clicks),
                    "wall_time": time.time() - handle.created_at,
                }
                # append-only store; a repeat finalize returns the same record
                with store_path.open("a") as fh:
                    fh.write(json.dumps(entry) + "\n")
                _persist(session_id, handle)
            return _session_response(session_id, handle) | {
                "annotation_id": handle.annotation_id,
                "final": handle.final_state,
            }

        return worker.submit(work)

    def _iter_finalized_records() -> list[dict]:
        records = []
        for path in sorted(sessions_dir.glob("*.json")):
            record = json.loads(path.read_text())
            if record.get("format") == SESSION_RECORD_FORMAT and record.get("finalized"):
                records.append(record)
        return records

    @app.get("/api/export")
    def export(format: str = "coco_json"):
        if format not in ("coco_json", "jsonl"):
            raise HTTPException(status_code=400, detail=f"unknown export format {format!r}")
        records = _iter_finalized_records()
        if format == "jsonl":
            lines = []
            for record in records:
                persons = [
                    {
                        "box": inst["box"],
                        "pose": [[x, y, int(Visibility.LABELED_VISIBLE)] for x, y in inst["keypoints"]],
                        "id": f"{record['session_id']}:{inst['index']}",
                    }
                    for inst in record["final_state"]["instances"]
                ]
                lines.append(json.dumps({"image_id": record["session_id"], "persons": persons}))
            return PlainTextResponse("\n".join(lines) + ("\n" if lines else ""))

        images = [
            (r["session_id"], r["original_dims"][0], r["original_dims"][1], r["image_file"])
            for r in records
        ]
        annotations = []
        ann_id = 1
        for record in records:
            for inst in record["final_state"]["instances"]:
                coords = np.asarray(inst["keypoints"], dtype=np.float64)
                vis = np.full(len(coords), int(Visibility.LABELED_VISIBLE))
                pose = Pose(coords=coords, visibility=vis)
                bx = inst["box"]
                box = BoundingBox(cx=bx[0], cy=bx[1], w=bx[2], h=bx[3])
                annotations.append((ann_id, record["session_id"], pose, box))
                ann_id += 1
        return JSONResponse(build_coco_dict(images, annotations, skeleton))

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
