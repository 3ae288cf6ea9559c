"""FastAPI app exposing the wire protocol over any runtime.

  POST /v1/generate  {"prompt", "image", "forced_prefix", "max_new_tokens"}
  POST /v1/logprobs  {"prefix_tokens"|null, "prefix_text"|null,
                      "candidates", "image"?}
  POST /v1/encode    {"text"}
  GET  /v1/vocab
  GET  /v1/health

Failures come back as {"error": str} with status 400.
"""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .table import TableError


class GenerateRequest(BaseModel):
    prompt: str
    image: str | None = None
    forced_prefix: str | None = None
    max_new_tokens: int = 512


class LogprobsRequest(BaseModel):
    prefix_tokens: list[int] | None = None
    prefix_text: str | None = None
    candidates: list[int]
    image: str | None = None


class EncodeRequest(BaseModel):
    text: str


def create_app(runtime) -> FastAPI:
    app = FastAPI(title="choicegate-server")

    @app.exception_handler(TableError)
    async def table_error(_, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(ValueError)
    async def value_error(_, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(RuntimeError)
    async def runtime_error(_, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.get("/v1/health")
    def health():
        return {"status": "ok"}

    @app.get("/v1/vocab")
    def vocab():
        return runtime.vocab_body()

    @app.post("/v1/encode")
    def encode(req: EncodeRequest):
        return {"tokens": runtime.encode(req.text)}

    @app.post("/v1/logprobs")
    def logprobs(req: LogprobsRequest):
        out, logsumexp_all = runtime.logprobs(
            req.prefix_tokens, req.prefix_text, req.candidates, image=req.image
        )
        return {
            "logprobs": {str(tid): lp for tid, lp in out.items()},
            "logsumexp_all": logsumexp_all,
        }

    @app.post("/v1/generate")
    def generate(req: GenerateRequest):
        text = runtime.generate(
            req.prompt,
            image=req.image,
            forced_prefix=req.forced_prefix,
            max_new_tokens=req.max_new_tokens,
        )
        return {"text": text}

    return app
