"""HTTP API over the assistant.

Endpoints (JSON): POST /session, /chat, /report, /vqa, /generate and
GET /health. Weights are immutable after load; sessions are independently
locked so one turn is in flight per session. Every response carries the
effective config hash in the `X-Config-Hash` header.
"""

from __future__ import annotations

import base64
import binascii
import io
import logging
import threading
import uuid

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

from .assistant import Assistant, GeneratedImage, Session

log = logging.getLogger("cxrkit.server")


class ChatRequest(BaseModel):
    session_id: str
    text: str
    image_b64: str | None = None


class ReportRequest(BaseModel):
    image_b64: str


class VqaRequest(BaseModel):
    image_b64: str
    question: str
    report: str | None = None


class GenerateRequest(BaseModel):
    prompt: str
    seed: int = 0


class _ApiError(Exception):
    def __init__(self, status: int, detail: str):
        self.status = status
        self.detail = detail


def _decode_image(b64: str, size: int) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("L")
    except (binascii.Error, ValueError, OSError) as exc:
        raise _ApiError(400, f"invalid image payload: {exc}") from exc
    if img.size != (size, size):
        raise _ApiError(422, f"expected {size}x{size} image, got "
                             f"{img.size[0]}x{img.size[1]}")
    return np.asarray(img, dtype=np.float64) / 255.0


def _png_b64(pixels: np.ndarray) -> str:
    png = GeneratedImage(id="", prompt="", pixels=pixels).png_bytes()
    return base64.b64encode(png).decode("ascii")


def create_app(workspace=None, assistant: Assistant | None = None) -> FastAPI:
    """Build the API. With `assistant` given, the app starts ready;
    otherwise checkpoints load from `workspace` on startup."""
    app = FastAPI(title="cxrkit")
    state = {"assistant": assistant, "ready": assistant is not None}
    sessions: dict[str, Session] = {}
    locks: dict[str, threading.Lock] = {}
    registry_lock = threading.Lock()
    config = assistant.config if assistant else workspace.config

    @app.on_event("startup")
    def _load() -> None:
        if state["assistant"] is None:
            state["assistant"] = workspace.build_assistant()
        state["ready"] = True

    @app.middleware("http")
    async def _config_hash_header(request: Request, call_next):
        response = await call_next(request)
        response.headers["X-Config-Hash"] = config.hash()
        return response

    @app.exception_handler(_ApiError)
    async def _api_error(request: Request, exc: _ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"detail": exc.detail})

    @app.exception_handler(RequestValidationError)
    async def _validation(request: Request, exc: RequestValidationError):
        # malformed JSON body is a 400; schema violations stay 422
        kinds = {e.get("type") for e in exc.errors()}
        status = 400 if "json_invalid" in kinds else 422
        return JSONResponse(status_code=status,
                            content={"detail": exc.errors()})

    @app.exception_handler(Exception)
    async def _internal(request: Request, exc: Exception):
        error_id = uuid.uuid4().hex[:12]
        log.exception("request failed [%s]", error_id)
        return JSONResponse(status_code=500, content={"error_id": error_id})

    def _assistant() -> Assistant:
        if not state["ready"]:
            raise _ApiError(503, "checkpoints still loading")
        return state["assistant"]

    @app.get("/health")
    def health():
        if not state["ready"]:
            raise _ApiError(503, "loading")
        return {"status": "ok", "config_hash": config.hash()}

    @app.post("/session")
    def create_session():
        _assistant()
        session = Session.create()
        with registry_lock:
            sessions[session.id] = session
            locks[session.id] = threading.Lock()
        return {"session_id": session.id}

    @app.post("/chat")
    def chat(req: ChatRequest):
        bot = _assistant()
        with registry_lock:
            session = sessions.get(req.session_id)
            lock = locks.get(req.session_id)
        if session is None:
            raise _ApiError(404, f"unknown session {req.session_id!r}")
        image = (None if req.image_b64 is None
                 else _decode_image(req.image_b64, config.image_size))
        with lock:
            reply = bot.handle_turn(session, req.text, image=image)
        return {"text": reply.text,
                "images": [{"png_b64": base64.b64encode(i.png_bytes()).decode(
                    "ascii"), "prompt": i.prompt} for i in reply.images],
                "task": reply.task}

    @app.post("/report")
    def report(req: ReportRequest):
        bot = _assistant()
        features = bot.aligner.encode_image(
            _decode_image(req.image_b64, config.image_size)).tokens
        return {"text": bot.report(features)}

    @app.post("/vqa")
    def vqa(req: VqaRequest):
        bot = _assistant()
        if not req.question.strip():
            raise _ApiError(422, "question must be non-empty")
        features = bot.aligner.encode_image(
            _decode_image(req.image_b64, config.image_size)).tokens
        answer, _ = bot.answer(features, req.question, report=req.report)
        return {"answer": answer}

    @app.post("/generate")
    def generate(req: GenerateRequest):
        bot = _assistant()
        if bot.sd_model is None:
            raise _ApiError(422, "image generator not loaded")
        if not req.prompt.strip():
            raise _ApiError(422, "prompt must be non-empty")
        from . import diffusion
        px = diffusion.sample(bot.sd_model, bot.sd_schedule, bot.aligner,
                              req.prompt, seed=req.seed,
                              guidance=bot.config.sd_guidance,
                              guidance_stride=bot.config.sd_guidance_stride)[0]
        return {"png_b64": _png_b64(px)}

    return app
