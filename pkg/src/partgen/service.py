"""HTTP service for interactive generation and editing.

Sessions are persisted to a store directory (one document per session) so a
restart preserves state; corrupt session files are quarantined rather than
taking the service down. Edits use optimistic concurrency: a commit with a
stale base revision is rejected with a 409 so the client can refresh.
"""

from __future__ import annotations

import threading
import uuid
import warnings
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .checkpoint import CheckpointError
from .data import SampleError
from .labelmap import label_map_png_bytes, rgb_png_bytes
from .pipeline import (
    ConflictError,
    EditCommand,
    EditError,
    PipelineBundle,
    deserialize_session,
    serialize_session,
    session_snapshot,
)


class CreateSessionBody(BaseModel):
    category: int | str
    part_list: list[int | str] | None = None
    seed: int = 0


class EditBody(BaseModel):
    kind: str
    payload: dict = {}
    base_revision: int


class SessionStore:
    """Disk-backed session map with per-session write locks."""

    def __init__(self, bundle: PipelineBundle, store_dir: Path):
        self.bundle = bundle
        self.store_dir = store_dir
        self.store_dir.mkdir(parents=True, exist_ok=True)
        self.sessions = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        for path in sorted(self.store_dir.glob("*.json")):
            try:
                session = deserialize_session(path.read_text(), bundle.p)
                self.sessions[session.session_id] = session
            except Exception as e:  # quarantine, keep serving
                quarantined = path.with_suffix(".corrupt")
                path.rename(quarantined)
                warnings.warn(f"quarantined corrupt session file {path} -> {quarantined}: {e}")

    def lock(self, session_id: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(session_id, threading.Lock())

    def put(self, session) -> None:
        self.sessions[session.session_id] = session
        (self.store_dir / f"{session.session_id}.json").write_text(serialize_session(session))

    def get(self, session_id: str):
        return self.sessions.get(session_id)


def create_app(bundle_dir: str | Path, store_dir: str | Path) -> FastAPI:
    bundle = PipelineBundle.load(bundle_dir)
    store = SessionStore(bundle, Path(store_dir))
    app = FastAPI(title="partgen")

    @app.exception_handler(ConflictError)
    async def conflict_handler(request: Request, exc: ConflictError):
        return JSONResponse(status_code=409, content={"error": str(exc)})

    @app.exception_handler(EditError)
    async def edit_error_handler(request: Request, exc: EditError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(SampleError)
    async def sample_error_handler(request: Request, exc: SampleError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "checkpoints": bundle.checkpoint_hashes}

    @app.get("/schema")
    def schema():
        return {
            "p": bundle.p,
            "categories": [
                {
                    "category_id": s.category_id,
                    "name": s.name,
                    "parts": [
                        {"name": n, "slot": slot}
                        for n, slot in zip(s.part_names, s.part_slots)
                    ],
                }
                for s in bundle.schemas
            ],
        }

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        session_id = uuid.uuid4().hex[:12]
        session = bundle.generate(
            body.category, body.part_list, seed=body.seed, session_id=session_id
        )
        store.put(session)
        return session_snapshot(session, bundle.schemas, url_prefix="")

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        session = store.get(session_id)
        if session is None:
            return JSONResponse(status_code=404, content={"error": "no such session"})
        return session_snapshot(session, bundle.schemas, url_prefix="")

    @app.post("/sessions/{session_id}/edits")
    def post_edit(session_id: str, body: EditBody):
        with store.lock(session_id):
            session = store.get(session_id)
            if session is None:
                return JSONResponse(status_code=404, content={"error": "no such session"})
            command = EditCommand(
                kind=body.kind, payload=body.payload, base_revision=body.base_revision
            )
            session = bundle.apply_edit(session, command)
            store.put(session)
            return session_snapshot(session, bundle.schemas, url_prefix="")

    @app.get("/sessions/{session_id}/label_map.png")
    def get_label_map(session_id: str):
        session = store.get(session_id)
        if session is None:
            return JSONResponse(status_code=404, content={"error": "no such session"})
        return Response(content=label_map_png_bytes(session.label_map), media_type="image/png")

    @app.get("/sessions/{session_id}/image.png")
    def get_image(session_id: str):
        session = store.get(session_id)
        if session is None or session.image is None:
            return JSONResponse(status_code=404, content={"error": "no rendered image"})
        return Response(content=rgb_png_bytes(session.image), media_type="image/png")

    return app


def serve(bundle_dir: str | Path, store_dir: str | Path, host: str = "127.0.0.1", port: int = 8008):
    """Run the service; a busy port or missing checkpoints fail startup."""
    import uvicorn

    app = create_app(bundle_dir, store_dir)  # raises CheckpointError when incomplete
    uvicorn.run(app, host=host, port=port)
