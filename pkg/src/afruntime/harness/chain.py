"""Control -> Process -> Display chain used by the harness.

The driver plays the Control role: it feeds source frames to Process, hands
the result to Display and optionally sends Display a short control message
per frame. Process and Display are ordinary functions on a Runtime, so
their placement follows the policy like any other function.
"""

from __future__ import annotations

import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Optional
from urllib.parse import parse_qs, urlencode, urlsplit

import numpy as np

from ..catalogue import Scope, split_target
from ..engine import Runtime
from ..messaging import Message, RequestTimeout
from ..transport import HEAP_REF
from .transforms import FrameError, apply, display_ack

CONTROL_SUFFIX = "/control"


@dataclass(frozen=True)
class FrameSettings:
    width: int = 360
    height: int = 640
    effect: str = "identity"
    size: Optional[int] = None
    seed: int = 0
    in_flight: int = 1
    control: Optional[tuple[int, int]] = None

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "FrameSettings":
        known = {k: values[k] for k in cls.__dataclass_fields__ if k in values}
        return cls(**known)

    @property
    def frame_bytes(self) -> int:
        if self.size is not None:
            return self.size
        return self.width * self.height * 3

    def validate(self) -> None:
        if self.effect != "identity" and self.frame_bytes != self.width * self.height * 3:
            raise FrameError(f"{self.effect} needs size == width*height*3")
        apply(self.effect, bytes(3 * self.width * self.height), self.width, self.height)


def source_frame(settings: FrameSettings, index: int) -> bytes:
    return np.random.default_rng([settings.seed, index]).bytes(settings.frame_bytes)


def control_message(settings: FrameSettings, index: int) -> bytes | None:
    if settings.control is None:
        return None
    rnd = random.Random(f"{settings.seed}:{index}:control")
    lo, hi = settings.control
    return rnd.randbytes(rnd.randint(lo, hi))


@dataclass(frozen=True)
class FrameOutcome:
    index: int
    process_status: int
    display_status: Optional[int]  # None when Process failed and Display was not reached
    control_status: Optional[int]
    ok: bool  # Display acknowledged exactly transform(source)

    @property
    def statuses(self) -> tuple[int, ...]:
        s = (self.process_status, self.display_status, self.control_status)
        return tuple(x for x in s if x is not None)


class Chain:
    """Registers Process and Display on ``runtime`` and drives frames through them."""

    def __init__(self, runtime: Runtime, process: str, display: str, *,
                 keep_frames: bool = False,
                 comm_methods: dict[str, tuple[str, ...]] | None = None,
                 scopes: dict[str, Scope] | None = None):
        self.runtime = runtime
        self.process = process
        self.display = display
        self.keep_frames = keep_frames
        self.observed: list[bytes] = []  # frames (or their digests) seen by the local Display
        self._lock = threading.Lock()
        comm_methods = comm_methods or {}
        scopes = scopes or {}
        for addr, handler in ((process, self._process), (display, self._display)):
            runtime.function(addr, handler, comm_methods.get(addr, (HEAP_REF,)),
                             scopes.get(addr, Scope.LOCAL_APP))

    # -- functions -----------------------------------------------------------------

    @staticmethod
    def _process(request: Message) -> bytes:
        _, suffix = split_target(request.url)
        q = {k: v[-1] for k, v in parse_qs(urlsplit(suffix).query).items()}
        w = int(q["w"]) if "w" in q else None
        h = int(q["h"]) if "h" in q else None
        return apply(q.get("effect", "identity"), request.body, w, h)

    def _display(self, request: Message) -> bytes:
        _, suffix = split_target(request.url)
        body = request.body
        if not suffix.startswith(CONTROL_SUFFIX):
            with self._lock:
                self.observed.append(body if self.keep_frames else display_ack(body))
        return display_ack(body)

    # -- driver ----------------------------------------------------------------------

    def process_target(self, settings: FrameSettings) -> str:
        query = {"effect": settings.effect}
        if settings.effect != "identity":
            query.update(w=settings.width, h=settings.height)
        return f"{self.process}?{urlencode(query)}"

    def _call(self, url: str, body: bytes) -> tuple[int, bytes]:
        """POST and wait; a caller-side timeout is reported as status 0."""
        try:
            resp = self.runtime.request("POST", url, body)
        except RequestTimeout:
            return 0, b""
        return resp.status, resp.body

    def run_frame(self, settings: FrameSettings, index: int) -> FrameOutcome:
        src = source_frame(settings, index)
        control_status = None
        ctl = control_message(settings, index)
        if ctl is not None:
            control_status, _ = self._call(self.display + CONTROL_SUFFIX, ctl)
        status, processed = self._call(self.process_target(settings), src)
        if status != 200:
            return FrameOutcome(index, status, None, control_status, False)
        shown_status, ack = self._call(self.display, processed)
        expected = display_ack(apply(settings.effect, src, settings.width, settings.height))
        ok = shown_status == 200 and ack == expected
        return FrameOutcome(index, status, shown_status, control_status, ok)

    def run(self, settings: FrameSettings, count: int, start: int = 0,
            on_frame: Callable[[FrameOutcome], None] | None = None) -> list[FrameOutcome]:
        """Drive ``count`` frames with up to ``settings.in_flight`` in flight."""
        settings.validate()

        def one(i: int) -> FrameOutcome:
            out = self.run_frame(settings, i)
            if on_frame is not None:
                on_frame(out)
            return out

        indices = range(start, start + count)
        if settings.in_flight <= 1:
            return [one(i) for i in indices]
        with ThreadPoolExecutor(settings.in_flight, thread_name_prefix="control") as pool:
            return list(pool.map(one, indices))
