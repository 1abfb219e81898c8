"""FastAPI service exposing the six image tools over the wire contract:
``POST /tools/<name>`` with a JSON body, response
``{"status", "payload"}`` or ``{"status": "error", "error_code", "message"}``.

Each tool runs on a configured backend: ``reference`` (deterministic,
default) or ``external`` (a user-supplied model loaded from an artifact
path through an entry point). /health reports build and backend info.
"""

from __future__ import annotations

import argparse
import importlib
import json
import sys
import threading
from pathlib import Path
from typing import Any, Literal

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, field_validator

from .codec import ImageError
from .reference import TOOL_NAMES, ReferenceBackend

SERVICE_NAME = "ehrseek-image-service"
SERVICE_VERSION = "0.1.0"

DEFAULT_REQUEST_CAP_BYTES = 32 * 1024 * 1024


class BackendSelection(BaseModel):
    kind: Literal["reference", "external"] = "reference"
    artifact_path: str | None = None
    entry: str | None = None  # "package.module:factory" for external backends

    @field_validator("artifact_path")
    @classmethod
    def _artifact_exists(cls, value, info):
        if value is not None and not Path(value).exists():
            raise ValueError(f"artifact path does not exist: {value}")
        return value


class ServiceConfig(BaseModel):
    host: str = "127.0.0.1"
    port: int = Field(default=8330, ge=1, le=65535)
    request_cap_bytes: int = Field(default=DEFAULT_REQUEST_CAP_BYTES, ge=1)
    auth_token: str | None = None
    artifact_dir: str | None = None
    model_workers: int = Field(default=1, ge=1)
    backends: dict[str, BackendSelection] = Field(default_factory=dict)

    @field_validator("backends")
    @classmethod
    def _known_tools_and_complete_externals(cls, value):
        for tool, selection in value.items():
            if tool not in TOOL_NAMES:
                raise ValueError(f"unknown tool in backends: {tool}")
            if selection.kind == "external":
                if not selection.entry or not selection.artifact_path:
                    raise ValueError(f"external backend for {tool} needs entry and artifact_path")
        return value


class ToolRequest(BaseModel):
    image_path: str | None = None
    image_base64: str | None = None
    image_name: str | None = None
    phrase: str | None = None
    structures: list[str] | str | None = None


def _load_external(selection: BackendSelection):
    module_name, _, attribute = (selection.entry or "").partition(":")
    if not module_name or not attribute:
        raise ValueError(f"bad entry point {selection.entry!r}; expected 'module:factory'")
    module = importlib.import_module(module_name)
    factory = getattr(module, attribute)
    return factory(selection.artifact_path)


def _error_response(status_code: int, error_code: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status_code,
        content={"status": "error", "error_code": error_code, "message": message},
    )


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    reference = ReferenceBackend(artifact_dir=config.artifact_dir)
    backends: dict[str, Any] = {}
    for tool in TOOL_NAMES:
        selection = config.backends.get(tool, BackendSelection())
        backends[tool] = _load_external(selection) if selection.kind == "external" else reference

    inference_gate = threading.Semaphore(config.model_workers)
    app = FastAPI(title=SERVICE_NAME, version=SERVICE_VERSION)
    app.state.config = config

    @app.get("/health")
    def health() -> dict[str, Any]:
        return {
            "status": "ok",
            "service": SERVICE_NAME,
            "version": SERVICE_VERSION,
            "tools": {
                tool: ("reference" if backends[tool] is reference else "external")
                for tool in TOOL_NAMES
            },
        }

    @app.post("/tools/{tool_name:path}")
    async def run_tool(tool_name: str, request: Request):
        if config.auth_token is not None:
            if request.headers.get("X-Auth-Token") != config.auth_token:
                return _error_response(401, "unauthorized", "missing or wrong auth token")
        body = await request.body()
        if len(body) > config.request_cap_bytes:
            return _error_response(
                413, "request_too_large",
                f"request body of {len(body)} bytes exceeds cap {config.request_cap_bytes}",
            )
        if tool_name not in TOOL_NAMES:
            return _error_response(404, "not_found", f"no tool named {tool_name!r}")
        try:
            args = ToolRequest.model_validate_json(body or b"{}")
        except ValueError as exc:
            return _error_response(422, "malformed_request", str(exc))
        try:
            with inference_gate:
                payload = backends[tool_name].run(
                    tool_name, args.model_dump(exclude_none=True)
                )
        except ImageError as exc:
            return _error_response(200, exc.code, exc.message)
        except Exception as exc:  # backend bugs must not kill the server
            return _error_response(500, "backend_unavailable", f"{type(exc).__name__}: {exc}")
        return {"status": "ok", "payload": payload}

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    try:
        uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="warning")
    except OSError as exc:
        raise SystemExit(f"bind_failure: cannot listen on {config.host}:{config.port}: {exc}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog=SERVICE_NAME, description=__doc__)
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--host", default=None)
    parser.add_argument("--port", type=int, default=None)
    args = parser.parse_args(argv)
    data: dict[str, Any] = {}
    if args.config:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if args.host is not None:
        data["host"] = args.host
    if args.port is not None:
        data["port"] = args.port
    serve(ServiceConfig.model_validate(data))
    return 0


if __name__ == "__main__":
    sys.exit(main())
