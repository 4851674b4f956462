"""HTTP job service: content-addressed assets plus an async edit queue.

Jobs run on a bounded thread pool; results are stored as new assets and
referenced from the job record. Replaying a submission with the same
idempotency key and body returns the original job without recomputation.
"""

from __future__ import annotations

import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from fastapi import FastAPI, File, Header, Request, Response, UploadFile
from fastapi.responses import JSONResponse

from morphix import audio
from morphix.config import AppConfig
from morphix.editor import EditEngine, EditRequestError, edit_request_from_dict
from morphix.store import AssetStore, UnknownAssetError

_MEDIA = {
    "waveform": "audio/wav",
    "spectrogram": "application/octet-stream",
    "latent": "application/octet-stream",
    "bank": "application/octet-stream",
    "checkpoint": "application/octet-stream",
    "blob": "application/octet-stream",
}


@dataclass
class Job:
    id: str
    request: dict
    state: str = "queued"  # queued -> running -> done | failed
    result: dict = field(default_factory=dict)
    error: str = ""
    trace_csv: str = ""
    created: float = field(default_factory=time.time)
    finished: float = 0.0

    def to_dict(self) -> dict:
        out = {"id": self.id, "state": self.state, "created": self.created}
        if self.state == "done":
            out["result"] = self.result
        if self.state == "failed":
            out["error"] = self.error
        return out


class JobRunner:
    def __init__(self, cfg: AppConfig, store: AssetStore):
        self.cfg = cfg
        self.store = store
        self.jobs: dict[str, Job] = {}
        self.by_key: dict[str, tuple[str, str]] = {}  # idem key -> (request hash, job id)
        self.lock = threading.Lock()
        self.pool = ThreadPoolExecutor(max_workers=max(1, cfg.service.workers))
        self.engine = EditEngine(cfg.build_model(), cfg.schedule)

    def _resolve_asset(self, asset_id: str) -> audio.Spectrogram:
        data = self.store.get(asset_id)
        kind = self.store.info(asset_id).kind
        if kind == "spectrogram":
            return audio.spectrogram_from_bytes(data)
        if kind == "waveform":
            return audio.stft(audio.waveform_from_bytes(data), self.cfg.stft)
        raise EditRequestError(f"asset {asset_id} has kind {kind}, need audio")

    def submit(self, request_obj: dict, idempotency_key: Optional[str]):
        req = edit_request_from_dict(request_obj)  # validate before queueing
        req_hash = req.canonical_hash(self.cfg.schedule)
        with self.lock:
            if idempotency_key is not None and idempotency_key in self.by_key:
                prev_hash, prev_job = self.by_key[idempotency_key]
                if prev_hash != req_hash:
                    return None, "idempotency key reused with a different request"
                return self.jobs[prev_job], None
            job = Job(id=uuid.uuid4().hex, request=request_obj)
            self.jobs[job.id] = job
            if idempotency_key is not None:
                self.by_key[idempotency_key] = (req_hash, job.id)
        self.pool.submit(self._run, job.id)
        return job, None

    def _run(self, job_id: str) -> None:
        job = self.jobs[job_id]
        job.state = "running"
        try:
            req = edit_request_from_dict(job.request)
            assets = {}
            for key in ("source", "reference", "reference_out"):
                asset_id = getattr(req, key)
                if asset_id is not None:
                    assets[asset_id] = self._resolve_asset(asset_id)
            result = self.engine.run(req, assets)
            spg_id = self.store.put(audio.spectrogram_to_bytes(result.spectrogram),
                                    kind="spectrogram", meta={"job": job.id})
            wav = audio.griffin_lim(result.spectrogram, seed=req.sampler.seed)
            wav_id = self.store.put(audio.waveform_to_bytes(wav), kind="waveform",
                                    meta={"job": job.id})
            job.trace_csv = result.trace_csv()
            job.result = {"spectrogram": spg_id, "waveform": wav_id,
                          "provenance": result.provenance}
            job.state = "done"
        except UnknownAssetError as exc:
            job.error = f"unknown asset: {exc}"
            job.state = "failed"
        except Exception as exc:  # noqa: BLE001 - job failures become state, not crashes
            job.error = str(exc)
            job.state = "failed"
        finally:
            job.finished = time.time()


def create_app(cfg: AppConfig) -> FastAPI:
    from fastapi.middleware.cors import CORSMiddleware

    app = FastAPI(title="morphix", version="0.1.0")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    store = AssetStore(cfg.service.data_dir)
    runner = JobRunner(cfg, store)
    app.state.store = store
    app.state.runner = runner

    @app.get("/health")
    def health():
        return {"ok": True}

    @app.post("/assets", status_code=201)
    async def upload_asset(file: UploadFile = File(...)):
        data = await file.read()
        if not data:
            return JSONResponse({"detail": "empty upload"}, status_code=400)
        asset_id = store.put(data, meta={"filename": file.filename or ""})
        return {"id": asset_id, "kind": store.info(asset_id).kind}

    @app.get("/assets/{asset_id}")
    def get_asset(asset_id: str):
        try:
            data = store.get(asset_id)
            info = store.info(asset_id)
        except UnknownAssetError:
            return JSONResponse({"detail": "unknown asset"}, status_code=404)
        return Response(content=data, media_type=_MEDIA.get(info.kind, "application/octet-stream"),
                        headers={"Cache-Control": "public, max-age=31536000, immutable"})

    @app.get("/assets/{asset_id}/render.png")
    def render_asset(asset_id: str, vmin: Optional[float] = None,
                     vmax: Optional[float] = None):
        try:
            spec = runner._resolve_asset(asset_id)
        except UnknownAssetError:
            return JSONResponse({"detail": "unknown asset"}, status_code=404)
        except (audio.AudioFormatError, EditRequestError) as exc:
            return JSONResponse({"detail": str(exc)}, status_code=400)
        png = audio.render_png(spec, vmin=vmin, vmax=vmax)
        return Response(content=png, media_type="image/png",
                        headers={"Cache-Control": "public, max-age=31536000, immutable"})

    @app.post("/edits", status_code=202)
    async def submit_edit(request: Request,
                          idempotency_key: Optional[str] = Header(default=None)):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"detail": "body is not valid JSON"}, status_code=400)
        if not isinstance(body, dict):
            return JSONResponse({"detail": "request body must be a JSON object"}, status_code=400)
        try:
            job, conflict = runner.submit(body, idempotency_key)
        except (EditRequestError, ValueError, KeyError, TypeError) as exc:
            return JSONResponse({"detail": f"invalid edit request: {exc}"}, status_code=400)
        if conflict:
            return JSONResponse({"detail": conflict}, status_code=409)
        return {"job_id": job.id}

    @app.get("/edits/{job_id}")
    def get_edit(job_id: str):
        job = runner.jobs.get(job_id)
        if job is None:
            return JSONResponse({"detail": "unknown job"}, status_code=404)
        return job.to_dict()

    @app.get("/edits/{job_id}/trace")
    def get_trace(job_id: str):
        job = runner.jobs.get(job_id)
        if job is None:
            return JSONResponse({"detail": "unknown job"}, status_code=404)
        return Response(content=job.trace_csv or "step,energy\n", media_type="text/csv")

    return app
