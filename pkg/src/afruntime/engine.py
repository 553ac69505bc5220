"""Execution engine and function lifecycle.

Requests go into one FIFO queue drained by a single dispatcher thread. The
placement table is read at dispatch time, so switching between the local bus
and the network happens request by request. Completions run concurrently and
are matched back to callers through the correlation table.
"""

from __future__ import annotations

import enum
import logging
import queue
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Iterable

from .catalogue import AddressMapper, Catalogue, FunctionRecord, Registry, Scope, split_target
from .heap import DEFAULT_CAPACITY, ContiguousHeap
from .messaging import (
    DEFAULT_TIMEOUT,
    CorrelationTable,
    Message,
    MessageError,
    Reaper,
    RequestIdGenerator,
    new_request,
    new_response,
)
from .policy import (
    INIT,
    OFFLOAD,
    ContextSnapshot,
    OffloadDecisionEngine,
    Placement,
    PlacementRule,
    PlacementTable,
    TransitionAction,
)
from .transport import HEAP_REF, Handler, HttpStack, LocalCommunicationManager, LocalStack

log = logging.getLogger(__name__)


class EngineError(Exception):
    pass


class HandleState(enum.Enum):
    STOPPED = "stopped"
    RUNNING = "running"


@dataclass(eq=False)
class FunctionHandle:
    """Developer-facing wrapper: an address plus the request handler serving it."""

    address: str
    handler: Handler
    comm_methods: tuple[str, ...] = (HEAP_REF,)
    scope: Scope = Scope.LOCAL_APP
    state: HandleState = HandleState.STOPPED

    @property
    def record(self) -> FunctionRecord:
        return FunctionRecord(self.address, self.comm_methods, self.scope)

    @property
    def running(self) -> bool:
        return self.state is HandleState.RUNNING


@dataclass
class EngineCounters:
    submitted: int = 0
    dispatched_local: int = 0
    dispatched_remote: int = 0
    completed: int = 0
    errors: int = 0
    peak_in_flight: int = 0
    latencies: list[float] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def in_flight(self) -> int:
        return self.submitted - self.completed


class Runtime:
    """Everything one application needs: heap, catalogue, transports, policy, engine."""

    def __init__(
        self,
        *,
        heap_capacity: int = DEFAULT_CAPACITY,
        merge: bool = True,
        rules: Iterable[PlacementRule] = (),
        stacks: Iterable[LocalStack] = (),
        remote_overrides: dict[str, str] | None = None,
        scheme: str = "http",
        remote_port: int | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        http_max_in_flight: int = 8,
        fallback_remote: bool = False,
        global_registry: Registry | None = None,
        copy_retain_limit: int | None = None,
    ):
        self.heap = ContiguousHeap(heap_capacity, auto_merge=merge)
        self.catalogue = Catalogue(global_registry)
        self.lcm = LocalCommunicationManager(self.heap, copy_retain_limit=copy_retain_limit)
        for stack in stacks:
            self.lcm.register_stack(stack)
        self.http = HttpStack(timeout=timeout, max_in_flight=http_max_in_flight)
        self.mapper = AddressMapper(scheme=scheme, port=remote_port, overrides=dict(remote_overrides or {}))
        self.table = CorrelationTable(default_timeout=timeout)
        self.fallback_remote = fallback_remote
        self.ids = RequestIdGenerator()
        self.counters = EngineCounters()
        self.handles: dict[str, FunctionHandle] = {}

        self.decisions = OffloadDecisionEngine(rules)
        self.decisions.subscribe(self.apply_transitions)
        self._placement = PlacementTable()
        self._placement_lock = threading.RLock()

        self._queue: queue.Queue[tuple[Message, float] | None] = queue.Queue()
        self._submit_lock = threading.Lock()
        self.enqueue_log: list[str] = []
        self.dispatch_log: list[str] = []
        self.completion_log: list[str] = []
        self._submitted_at: dict[str, float] = {}

        self._reaper = Reaper(self.table)
        self._reaper.start()
        self._dispatcher = threading.Thread(target=self._dispatch_loop, name="dispatcher", daemon=True)
        self._dispatcher.start()
        self._closed = False

    # -- lifecycle -------------------------------------------------------------

    def function(self, address: str, handler: Handler, comm_methods: Iterable[str] = (HEAP_REF,),
                 scope: Scope = Scope.LOCAL_APP, *, start: bool = True) -> FunctionHandle:
        """Wrap ``handler`` as a function at ``address`` and (by default) start it."""
        if address in self.handles:
            raise EngineError(f"a handle for {address} already exists")
        handle = FunctionHandle(address, handler, tuple(comm_methods), scope)
        self.handles[address] = handle
        if start:
            self.start(handle)
        return handle

    def start(self, handle: FunctionHandle) -> None:
        if handle.running:
            raise EngineError(f"{handle.address} is already running")
        self.catalogue.register(handle.record)
        try:
            self.lcm.attach(handle.address, handle.handler)
        except Exception:
            self.catalogue.deregister(handle.address, handle.scope)
            raise
        self.handles.setdefault(handle.address, handle)
        handle.state = HandleState.RUNNING

    def stop(self, handle: FunctionHandle | str, *, drain: bool = False) -> int:
        """Deregister and detach. Queued requests get 503 unless ``drain``.

        Returns the number of requests answered 503.
        """
        if isinstance(handle, str):
            if handle not in self.handles:
                raise EngineError(f"unknown function {handle}")
            handle = self.handles[handle]
        if not handle.running:
            raise EngineError(f"{handle.address} is not running")
        self.catalogue.deregister(handle.address, handle.scope)
        handle.state = HandleState.STOPPED
        return self.lcm.detach(handle.address, drain=drain)

    # -- placement ---------------------------------------------------------------

    @property
    def placements(self) -> PlacementTable:
        return self._placement

    def placement(self, address: str) -> Placement:
        return self._placement[address]

    def set_placement(self, address: str, placement: Placement) -> None:
        with self._placement_lock:
            self._placement = self._placement.updated(address, placement)

    def ingest(self, snapshot: ContextSnapshot) -> list[TransitionAction]:
        return self.decisions.ingest(snapshot)

    def apply_transitions(self, actions: Iterable[TransitionAction]) -> None:
        for action in actions:
            handle = self.handles.get(action.address)
            if handle is None:
                log.warning("%s: no local handle, skipped", action)
                continue
            if action.kind == OFFLOAD:
                # new requests go remote right away; queued local ones finish first
                self.set_placement(action.address, Placement.REMOTE)
                if handle.running:
                    self.stop(handle, drain=True)
            elif action.kind == INIT:
                # stay remote until the local instance is live
                if not handle.running:
                    self.start(handle)
                self.set_placement(action.address, Placement.LOCAL)
            else:
                log.warning("unknown transition %s, skipped", action)

    # -- requests ------------------------------------------------------------------

    def submit(self, request: Message, timeout: float | None = None) -> Future:
        if not request.is_request:
            raise MessageError("submit takes requests")
        if self._closed:
            raise EngineError("runtime is closed")
        with self._submit_lock:
            fut = self.table.register(request, timeout)
            self.enqueue_log.append(request.request_id)
            self._submitted_at[request.request_id] = time.perf_counter()
            with self.counters._lock:
                self.counters.submitted += 1
                self.counters.peak_in_flight = max(self.counters.peak_in_flight, self.counters.in_flight)
            self._queue.put((request, time.monotonic()))
        return fut

    def request(self, method: str, url: str, body: bytes | None = None,
                timeout: float | None = None) -> Message:
        """Submit and wait. Raises RequestTimeout when nothing came back in time."""
        fut = self.submit(new_request(method, url, body, ids=self.ids), timeout)
        return fut.result()

    def _dispatch_loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            request, _ = item
            try:
                fut = self._dispatch(request)
            except Exception:
                log.exception("dispatch of %s failed", request.request_id)
                fut = Future()
                fut.set_result(new_response(request, 500))
            fut.add_done_callback(lambda f, r=request: self._complete(r, f))

    def _dispatch(self, request: Message) -> Future:
        self.dispatch_log.append(request.request_id)
        address, _ = split_target(request.url)
        with self._placement_lock:
            placement = self._placement[address]
            if placement is Placement.LOCAL:
                record = self.catalogue.lookup(address)
                if record is not None or not self.fallback_remote:
                    with self.counters._lock:
                        self.counters.dispatched_local += 1
                    if record is None:
                        fut: Future = Future()
                        fut.set_result(new_response(request, 404))
                        return fut
                    return self.lcm.send_local(request, record)
        with self.counters._lock:
            self.counters.dispatched_remote += 1
        return self.http.send_remote(request, self.mapper.to_remote_url(request.url))

    def _complete(self, request: Message, fut: Future) -> None:
        try:
            response = fut.result()
        except Exception:
            log.exception("transport failed for %s", request.request_id)
            response = new_response(request, 500)
        started = self._submitted_at.pop(request.request_id, None)
        with self.counters._lock:
            self.counters.completed += 1
            self.completion_log.append(request.request_id)
            if response.status >= 400:
                self.counters.errors += 1
            if started is not None:
                self.counters.latencies.append(time.perf_counter() - started)
        self.table.correlate(response)

    def drain(self, timeout: float = 30.0) -> bool:
        """Wait until every submitted request has completed."""
        deadline = time.monotonic() + timeout
        while self.counters.in_flight > 0:
            if time.monotonic() > deadline:
                return False
            time.sleep(0.001)
        return True

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._queue.put(None)
        self._dispatcher.join(timeout=5)
        self.lcm.close()
        self.http.close()
        self._reaper.stop()

    def __enter__(self) -> "Runtime":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
