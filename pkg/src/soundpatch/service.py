"""HTTP generation service: scene browsing, mask/attention-conditioned audio
generation, attention inspection. Stateless per request; a bounded worker
pool caps concurrent samplings; every request's RNG derives from its own seed.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import io
import time
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field, model_validator

from .dsp import wav_bytes
from .grounding import heatmap_png
from .scenes import load_manifest, load_scene

API_PREFIX = "/v1"


class GenerateRequest(BaseModel):
    scene_id: str
    object_ids: list[int] | None = None
    patch_vector: list[float] | None = None
    mode: Literal["attention", "mask"] = "mask"
    guidance: float = Field(default=2.0, ge=0.0, allow_inf_nan=False)
    seed: int = 0
    caption: list[str] | None = None
    gl_iters: int | None = None

    @model_validator(mode="after")
    def _exactly_one_selection(self):
        if self.mode == "mask":
            if (self.object_ids is None) == (self.patch_vector is None):
                raise ValueError(
                    "mask mode needs exactly one of object_ids or patch_vector")
        return self


class ServiceState:
    def __init__(self, checkpoint_path: Path | None, dataset_dir: Path,
                 max_concurrent: int = 2):
        from .pipeline import Pipeline
        self.dataset_dir = Path(dataset_dir)
        self.pipeline = None
        self.checkpoint_path = checkpoint_path
        if checkpoint_path is not None:
            self.pipeline = Pipeline.load_stage(checkpoint_path, "full")
        self.scenes = {}
        for split in ("train", "test"):
            try:
                manifest = load_manifest(self.dataset_dir, split)
            except FileNotFoundError:
                continue
            for sid in manifest.scene_ids:
                self.scenes[sid] = None      # lazy-load scene files
        self.semaphore = asyncio.Semaphore(max_concurrent)

    def scene(self, scene_id: str):
        if scene_id not in self.scenes:
            raise HTTPException(status_code=404, detail=f"unknown scene {scene_id}")
        if self.scenes[scene_id] is None:
            self.scenes[scene_id] = load_scene(scene_id, self.dataset_dir)
        return self.scenes[scene_id]

    def require_pipeline(self):
        if self.pipeline is None:
            raise HTTPException(status_code=409, detail="checkpoint not loaded")
        return self.pipeline


def create_app(checkpoint_path: Path | None, dataset_dir: Path,
               max_concurrent: int = 2, static_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title="soundpatch", version="0.1.0")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    state = ServiceState(checkpoint_path, dataset_dir, max_concurrent)
    app.state.service = state

    @app.get(f"{API_PREFIX}/health")
    def health():
        return {"status": "ok", "checkpoint_loaded": state.pipeline is not None,
                "n_scenes": len(state.scenes)}

    @app.get(f"{API_PREFIX}/checkpoint")
    def checkpoint_info():
        pipe = state.require_pipeline()
        return {
            "stage": pipe.stage,
            "config_hash": pipe.config.config_hash(),
            "checkpoint_sha256": hashlib.sha256(
                Path(state.checkpoint_path).read_bytes()).hexdigest(),
            "stats": {k: v for k, v in pipe.stats.items()
                      if isinstance(v, (int, float, str, type(None)))},
        }

    @app.get(f"{API_PREFIX}/scenes")
    def list_scenes():
        out = []
        for sid in sorted(state.scenes):
            scene = state.scene(sid)
            out.append({"scene_id": sid, "caption": scene.caption,
                        "n_objects": len(scene.objects)})
        return {"scenes": out}

    @app.get(f"{API_PREFIX}/scenes/{{scene_id}}")
    def scene_bundle(scene_id: str):
        scene = state.scene(scene_id)
        png = io.BytesIO()
        from PIL import Image
        Image.fromarray((np.clip(scene.image, 0, 1) * 255).round().astype(np.uint8)
                        ).save(png, format="PNG")
        return {
            "scene_id": scene.scene_id,
            "caption": scene.caption,
            "grid": scene.grid,
            "objects": [{"index": i, "class_id": o.class_id,
                         "class_name": o.class_name, "patches": o.patches,
                         "extent": o.extent, "gain": o.gain}
                        for i, o in enumerate(scene.objects)],
            "masks": scene.masks.tolist(),
            "image_png_base64": base64.b64encode(png.getvalue()).decode(),
        }

    @app.post(f"{API_PREFIX}/generate")
    async def generate(req: GenerateRequest, request: Request):
        pipe = state.require_pipeline()
        scene = state.scene(req.scene_id)
        patch_vector = None
        if req.patch_vector is not None:
            if len(req.patch_vector) != pipe.config.data.n_patches:
                raise HTTPException(
                    status_code=422,
                    detail=f"patch vector must have length {pipe.config.data.n_patches}")
            if any(v < 0 for v in req.patch_vector):
                raise HTTPException(status_code=422,
                                    detail="patch vector must be non-negative")
            patch_vector = np.asarray(req.patch_vector, dtype=np.float64)

        def run():
            from .pipeline import UnknownObjectError
            t0 = time.time()
            try:
                res = pipe.generate(
                    scene, mode=req.mode, object_ids=req.object_ids,
                    patch_vector=patch_vector, caption_override=req.caption,
                    guidance=req.guidance, seed=req.seed, gl_iters=req.gl_iters)
            except UnknownObjectError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            except ValueError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            return res, time.time() - t0

        async with state.semaphore:
            res, elapsed = await asyncio.to_thread(run)

        audio = wav_bytes(res.waveform)
        if "audio/wav" in request.headers.get("accept", ""):
            return Response(content=audio, media_type="audio/wav",
                            headers={"X-Audio-SHA256": hashlib.sha256(audio).hexdigest()})
        heatmap = heatmap_png(res.map_used.weights, pipe.config.data.grid,
                              pipe.config.data.image_size)
        return JSONResponse({
            "scene_id": scene.scene_id,
            "mode": req.mode,
            "seed": req.seed,
            "guidance": req.guidance,
            "audio_wav_base64": base64.b64encode(audio).decode(),
            "audio_sha256": hashlib.sha256(audio).hexdigest(),
            "attention_map": res.map_used.weights.tolist(),
            "map_kind": res.map_used.kind,
            "heatmap_png_base64": base64.b64encode(heatmap).decode(),
            "timing_s": elapsed,
        })

    if static_dir is not None and Path(static_dir).exists():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
