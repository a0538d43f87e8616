"""FastAPI application computing the prompt-contrast loss for images.

Protocol:
    POST /v1/loss        {"image_png_b64": str, "classes": [str]}
                         -> 200 {"loss": float, "n_classes": int}
    GET  /v1/health      -> 200 {"model": tag, "status": "ok"} (503 while loading)
    GET  /v1/debug_sims  same body as /v1/loss
                         -> 200 {"positive_sims": [...], "negative_sims": [...]}
Errors: 400 {"error": str} for malformed queries, 413 for oversize payloads.
"""

from __future__ import annotations

import base64
import binascii
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .encoders import make_encoder

NEGATIVE_PROMPT = "a bad, saturated, blacked out photo of nothing"
POSITIVE_TEMPLATE = "a good photo of {}"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8731
    model_tag: str = "RN50"
    device: str = "cpu"
    encoder: str = "rn50"
    max_request_bytes: int = 8 * 1024 * 1024
    logit_scale: float | None = None  # e.g. 100.0 to scale similarities; default raw cosines


class LossRequest(BaseModel):
    image_png_b64: str
    classes: list[str]


def dedupe(classes):
    seen, unique = set(), []
    for name in classes:
        key = name.lower()
        if key not in seen:
            seen.add(key)
            unique.append(name)
    return unique


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    state = {"encoder": None}
    text_cache: dict = {}
    inference_lock = threading.Lock()

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        state["encoder"] = make_encoder(config.encoder, device=config.device)
        yield

    app = FastAPI(title="clip-loss-service", lifespan=lifespan)

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": f"malformed request: {exc.errors()}"})

    def error(status: int, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"error": message})

    def embed_text(prompt: str) -> np.ndarray:
        cached = text_cache.get(prompt)
        if cached is None:
            cached = state["encoder"].encode_text(prompt)
            text_cache[prompt] = cached
        return cached

    def similarities(body: LossRequest):
        """Decode, embed, and return (positive sims, negative sims, n_classes) or an error response."""
        if state["encoder"] is None:
            return error(503, "model is still loading")
        if len(body.image_png_b64) > config.max_request_bytes:
            return error(413, f"payload exceeds {config.max_request_bytes} bytes")
        classes = dedupe([c for c in body.classes if c.strip()])
        if not classes:
            return error(400, "need at least one non-empty class name")
        try:
            raw = base64.b64decode(body.image_png_b64, validate=True)
        except (binascii.Error, ValueError) as exc:
            return error(400, f"image_png_b64 is not valid base64: {exc}")
        from .encoders import decode_png

        try:
            img = decode_png(raw)
        except ValueError as exc:
            return error(400, str(exc))

        with inference_lock:
            image_embed = state["encoder"].encode_image(img)
            negative = embed_text(NEGATIVE_PROMPT)
            positives = [embed_text(POSITIVE_TEMPLATE.format(name)) for name in classes]
        scale = config.logit_scale if config.logit_scale is not None else 1.0
        pos_sims = np.array([float(np.dot(p, image_embed)) for p in positives]) * scale
        neg_sim = float(np.dot(negative, image_embed)) * scale
        return pos_sims, np.full(len(classes), neg_sim), len(classes)

    @app.post("/v1/loss")
    def handle_loss(body: LossRequest):
        result = similarities(body)
        if isinstance(result, JSONResponse):
            return result
        pos, neg, n_classes = result
        loss = float(np.mean(np.logaddexp(0.0, neg - pos)))
        return {"loss": loss, "n_classes": n_classes}

    @app.get("/v1/health")
    def handle_health():
        if state["encoder"] is None:
            return error(503, "model is still loading")
        return {"model": config.model_tag, "status": "ok"}

    @app.get("/v1/debug_sims")
    @app.post("/v1/debug_sims")
    def handle_debug_sims(body: LossRequest):
        result = similarities(body)
        if isinstance(result, JSONResponse):
            return result
        pos, neg, _ = result
        return {"positive_sims": pos.tolist(), "negative_sims": neg.tolist()}

    return app
