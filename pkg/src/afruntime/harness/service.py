"""HTTP services: the stub web-service counterpart and the runtime control service."""

from __future__ import annotations

import asyncio
import base64
import socket
import threading
import time
from typing import Optional

import uvicorn
from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

from ..engine import Runtime
from ..messaging import new_request
from ..policy import ContextSnapshot, PolicyError
from .transforms import TRANSFORMS, FrameError, apply, display_ack

OCTET = "application/octet-stream"


class HealthResponse(BaseModel):
    status: str = "ok"
    transform: Optional[str] = None


class ErrorResponse(BaseModel):
    detail: str


class StubStats(BaseModel):
    processed: int
    displayed: int


def create_stub_app(default_effect: str = "identity") -> FastAPI:
    """Remote Process/Display counterpart.

    ``POST|GET /process?effect=<id>&w=<int>&h=<int>`` answers transform(body),
    ``POST /display`` answers the display acknowledgement for body.
    """
    if default_effect not in TRANSFORMS:
        raise ValueError(f"unknown transform {default_effect!r}")
    app = FastAPI(title="function stub service")
    app.state.processed = 0
    app.state.displayed = 0
    app.state.lock = threading.Lock()

    @app.get("/healthz", response_model=HealthResponse)
    def healthz():
        return HealthResponse(transform=default_effect)

    @app.get("/stats", response_model=StubStats)
    def stats():
        return StubStats(processed=app.state.processed, displayed=app.state.displayed)

    @app.api_route("/process", methods=["GET", "POST"],
                   responses={400: {"model": ErrorResponse}})
    async def process(request: Request, effect: Optional[str] = None,
                      w: Optional[int] = Query(None), h: Optional[int] = Query(None)):
        body = await request.body()
        try:
            out = apply(effect or default_effect, body, w, h)
        except FrameError as exc:
            return JSONResponse(status_code=400, content=ErrorResponse(detail=str(exc)).model_dump())
        with app.state.lock:
            app.state.processed += 1
        return Response(out, media_type=OCTET, headers=_echo_id(request))

    @app.post("/display")
    async def display(request: Request):
        body = await request.body()
        with app.state.lock:
            app.state.displayed += 1
        return Response(display_ack(body), media_type=OCTET, headers=_echo_id(request))

    @app.post("/display/control")
    async def display_control(request: Request):
        # side-channel messages from Control; acknowledged, never counted as frames
        body = await request.body()
        return Response(display_ack(body), media_type=OCTET, headers=_echo_id(request))

    return app


def _echo_id(request: Request) -> dict[str, str]:
    rid = request.headers.get("x-reqid")
    return {"X-Reqid": rid} if rid else {}


# -- runtime control service ----------------------------------------------------------

class ContextIn(BaseModel):
    network_id: Optional[str] = None
    connected: bool = False
    battery_level: float = Field(100.0, ge=0, le=100)
    plugged: bool = False
    cpu_utilization: float = Field(0.0, ge=0, le=1)
    memory_utilization: float = Field(0.0, ge=0, le=1)
    location_tag: Optional[str] = None
    timestamp: Optional[float] = None


class ActionOut(BaseModel):
    kind: str
    address: str


class RecordOut(BaseModel):
    address: str
    scope: str
    comm_methods: list[str]


class InvokeOut(BaseModel):
    request_id: str
    status: int
    placement: str
    body_b64: str


def create_runtime_app(runtime: Runtime) -> FastAPI:
    """Expose a live runtime: catalogue, placements, context ingestion, invocation."""
    app = FastAPI(title="function runtime")
    app.state.runtime = runtime

    @app.get("/healthz", response_model=HealthResponse)
    def healthz():
        return HealthResponse()

    @app.get("/catalogue", response_model=list[RecordOut])
    def catalogue():
        return [RecordOut(address=r.address, scope=r.scope.value, comm_methods=list(r.comm_methods))
                for r in runtime.catalogue.records()]

    @app.get("/placements", response_model=dict[str, str])
    def placements():
        return {addr: runtime.placement(addr).value for addr in sorted(runtime.handles)}

    @app.post("/context", response_model=list[ActionOut])
    def context(ctx: ContextIn):
        values = ctx.model_dump()
        if values["timestamp"] is None:
            values["timestamp"] = time.monotonic()
        try:
            actions = runtime.ingest(ContextSnapshot.from_fields(**values))
        except PolicyError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return [ActionOut(kind=a.kind, address=a.address) for a in actions]

    @app.post("/invoke/{target:path}", response_model=InvokeOut)
    async def invoke(target: str, request: Request):
        body = await request.body()
        if request.url.query:
            target = f"{target}?{request.url.query}"
        placement = runtime.placement(target.split("?")[0].split("/")[0]).value
        req = new_request("POST", target, body or None, ids=runtime.ids)
        resp = await asyncio.wrap_future(runtime.submit(req))
        return InvokeOut(request_id=resp.request_id, status=resp.status, placement=placement,
                         body_b64=base64.b64encode(resp.body).decode())

    @app.get("/metrics")
    def metrics():
        s = runtime.heap.stats()
        c = runtime.counters
        return {"heap_used_bytes": s.used_bytes, "heap_free_bytes": s.free_bytes_in_blocks,
                "block_count": s.block_count, "dispatched_local": c.dispatched_local,
                "dispatched_remote": c.dispatched_remote, "completed": c.completed,
                "bytes_copied": runtime.lcm.counters.bytes_copied}

    return app


# -- embedding -------------------------------------------------------------------------

class ServerThread:
    """Run an ASGI app with uvicorn on a background thread."""

    def __init__(self, app, host: str = "127.0.0.1", port: int = 0):
        self.app = app
        self.host = host
        self.port = port
        self._server: uvicorn.Server | None = None
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self, timeout: float = 10.0) -> "ServerThread":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        self.port = sock.getsockname()[1]
        config = uvicorn.Config(self.app, log_level="warning", access_log=False)
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, kwargs={"sockets": [sock]},
                                        name="uvicorn", daemon=True)
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if time.monotonic() > deadline or not self._thread.is_alive():
                raise RuntimeError("embedded server failed to start")
            time.sleep(0.01)
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.should_exit = True
            self._thread.join(timeout=10)

    def __enter__(self) -> "ServerThread":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(app, host: str = "127.0.0.1", port: int = 8080) -> None:
    uvicorn.run(app, host=host, port=port, log_level="info")


__all__ = ["create_stub_app", "create_runtime_app", "ServerThread", "serve"]
