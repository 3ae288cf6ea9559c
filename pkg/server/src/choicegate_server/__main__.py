"""Run the server: table mode for conformance testing, model mode for real
inference."""

from __future__ import annotations

import argparse

import uvicorn

from .app import create_app
from .table import TableRuntime


def main() -> int:
    parser = argparse.ArgumentParser(prog="choicegate-server")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--table", help="serve a deterministic table config")
    source.add_argument("--model", help="serve a causal LM checkpoint by id")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8321)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-new-tokens", type=int, default=512)
    args = parser.parse_args()

    if args.table:
        runtime = TableRuntime.from_file(args.table)
    else:
        from .model import ModelRuntime

        runtime = ModelRuntime.from_pretrained(
            args.model, device=args.device, max_new_tokens_default=args.max_new_tokens
        )
    uvicorn.run(create_app(runtime), host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
