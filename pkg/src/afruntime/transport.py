"""Local Communication Manager, local stacks and the HTTP stack.

Both local modes hand the handler plain bytes. What differs is the transit
form: COPY duplicates the payload into a marshalled envelope and again into
the receiver's inbox, HEAP_REF stores it once in the heap and moves only a
``PayloadRef``. Transport faults come back as status-bearing responses
(404 no handler, 503 not deliverable, 504 network failure).
"""

from __future__ import annotations

import enum
import logging
import queue
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Union

import httpx

from .catalogue import FunctionRecord
from .heap import ContiguousHeap, HeapExhaustedError
from .messaging import Message, MessageError, PayloadRef, new_response

log = logging.getLogger(__name__)

HandlerResult = Union[Message, bytes, bytearray, memoryview, None]
Handler = Callable[[Message], HandlerResult]

COPY = "copy"
HEAP_REF = "heap_ref"


class TransportError(Exception):
    pass


class NoStackError(TransportError, LookupError):
    pass


class DuplicateStackError(TransportError):
    pass


class NetworkBoundaryError(TransportError):
    """A heap reference tried to leave the process."""


class StackCrashed(TransportError):
    """COPY stack exceeded its emulated retention budget."""


class StackMode(enum.Enum):
    COPY = "copy"
    HEAP_REF = "heap_ref"


def _dup(data: bytes) -> bytes:
    # bytes(b) returns b itself for bytes input; going through a view forces a real copy
    return bytes(memoryview(data))


@dataclass
class TransportCounters:
    """Byte accounting shared by the stacks of one runtime.

    ``bytes_copied`` counts payload bytes duplicated into transit buffers
    (envelope, inbox copy, heap block). Handing a payload to its consumer
    is counted separately in ``bytes_delivered``, in both modes.
    """

    bytes_copied: int = 0
    bytes_delivered: int = 0
    copy_resident_bytes: int = 0
    copy_resident_peak: int = 0
    copy_retained_bytes: int = 0
    local_messages: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, *, copied: int = 0, delivered: int = 0, resident: int = 0, retained: int = 0,
            messages: int = 0) -> None:
        with self._lock:
            self.local_messages += messages
            self.bytes_copied += copied
            self.bytes_delivered += delivered
            self.copy_resident_bytes += resident
            self.copy_retained_bytes += retained
            if self.copy_resident_bytes > self.copy_resident_peak:
                self.copy_resident_peak = self.copy_resident_bytes

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {k: v for k, v in vars(self).items() if not k.startswith("_")}


class LocalStack:
    """One in-process transport mechanism.

    ``encode`` turns a message into its transit form on the sender side,
    ``decode`` materializes it on the receiver side and releases transit
    resources, ``release`` drops an undelivered transit message.
    """

    def __init__(self, id: str, mode: StackMode, heap: ContiguousHeap | None = None,
                 counters: TransportCounters | None = None, retain_limit: int | None = None):
        if mode is StackMode.HEAP_REF and heap is None:
            raise ValueError("heap_ref stack needs a heap")
        self.id = id
        self.mode = mode
        self.heap = heap
        self.counters = counters or TransportCounters()
        self.retain_limit = retain_limit

    def __repr__(self):
        return f"LocalStack({self.id!r}, {self.mode.name})"

    def encode(self, message: Message) -> Message:
        if message.payload is None:
            return message
        n = len(message.payload)
        if self.mode is StackMode.HEAP_REF:
            ref = self.heap.store(message.payload)
            self.counters.add(copied=n)
            return message.with_ref(PayloadRef(ref, n))
        if self.retain_limit is not None:
            if self.counters.copy_retained_bytes + n > self.retain_limit:
                raise StackCrashed(f"{self.id}: retained bytes would exceed {self.retain_limit}")
            self.counters.add(retained=n)
        envelope = _dup(message.payload)
        self.counters.add(copied=n, resident=n)
        inbox_copy = _dup(envelope)
        self.counters.add(copied=n, resident=n)
        del envelope
        self.counters.add(resident=-n)
        return message.with_payload(inbox_copy)

    def decode(self, message: Message) -> Message:
        if message.payload_ref is not None:
            ref = message.payload_ref
            data = self.heap.take(ref.reference, ref.length)
            self.counters.add(delivered=ref.length)
            return message.with_payload(data)
        if message.payload is not None:
            n = len(message.payload)
            self.counters.add(delivered=n, resident=-n)
        return message

    def release(self, message: Message) -> None:
        if message.payload_ref is not None:
            self.heap.free(message.payload_ref.reference)
        elif message.payload is not None:
            self.counters.add(resident=-len(message.payload))


def normalize_result(request: Message, result: HandlerResult) -> Message:
    if isinstance(result, Message):
        if result.is_request or result.request_id != request.request_id:
            raise MessageError("handler must answer with a response to the same request")
        return result
    if result is None:
        return new_response(request, 200)
    return new_response(request, 200, bytes(result))


@dataclass
class _Item:
    transit: Message
    stack: LocalStack
    future: Future


class Inbox:
    """FIFO inbox for one address, drained by a dedicated worker thread."""

    def __init__(self, address: str, handler: Handler):
        self.address = address
        self.handler = handler
        self._queue: queue.Queue[_Item | None] = queue.Queue()
        self._lock = threading.Lock()
        self._closed = False
        self.delivered = 0
        self._worker = threading.Thread(target=self._run, name=f"inbox:{address}", daemon=True)
        self._worker.start()

    @property
    def pending(self) -> int:
        return self._queue.qsize()

    def put(self, item: _Item) -> bool:
        with self._lock:
            if self._closed:
                return False
            self._queue.put(item)
            return True

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            try:
                if item is None:
                    return
                self._process(item)
            finally:
                self._queue.task_done()

    def _process(self, item: _Item) -> None:
        stack = item.stack
        request = stack.decode(item.transit)
        self.delivered += 1
        try:
            response = normalize_result(request, self.handler(request))
        except Exception:
            log.exception("handler for %s failed", self.address)
            response = new_response(request, 500)
        try:
            transit = stack.encode(response)
        except (HeapExhaustedError, StackCrashed) as exc:
            log.warning("response for %s not deliverable: %s", request.request_id, exc)
            transit = new_response(request, 503)
        item.future.set_result(stack.decode(transit))

    def drain(self) -> None:
        """Block until everything queued so far has been handled."""
        self._queue.join()

    def close(self) -> list[_Item]:
        """Stop accepting; return items that were never handled."""
        with self._lock:
            self._closed = True
            leftovers: list[_Item] = []
            while True:
                try:
                    item = self._queue.get_nowait()
                except queue.Empty:
                    break
                self._queue.task_done()
                if item is not None:
                    leftovers.append(item)
            self._queue.put(None)
        return leftovers


def _done(message: Message) -> Future:
    fut: Future = Future()
    fut.set_result(message)
    return fut


class LocalCommunicationManager:
    """Picks a local stack per function record and runs request/response over it."""

    def __init__(self, heap: ContiguousHeap, counters: TransportCounters | None = None,
                 copy_retain_limit: int | None = None):
        self.heap = heap
        self.counters = counters or TransportCounters()
        self._stacks: dict[str, LocalStack] = {}
        self._inboxes: dict[str, Inbox] = {}
        self._lock = threading.RLock()
        self.register_stack(LocalStack(COPY, StackMode.COPY, counters=self.counters,
                                       retain_limit=copy_retain_limit))
        self.register_stack(LocalStack(HEAP_REF, StackMode.HEAP_REF, heap, self.counters))

    @property
    def stacks(self) -> dict[str, LocalStack]:
        return dict(self._stacks)

    def register_stack(self, stack: LocalStack) -> None:
        with self._lock:
            if stack.id in self._stacks:
                raise DuplicateStackError(stack.id)
            self._stacks[stack.id] = stack

    def select_stack(self, record: FunctionRecord) -> LocalStack:
        # highest developer-set priority wins
        for method in record.comm_methods:
            stack = self._stacks.get(method)
            if stack is not None:
                return stack
        raise NoStackError(f"{record.address}: none of {list(record.comm_methods)} is registered")

    # -- handler attachment ----------------------------------------------------

    def attach(self, address: str, handler: Handler) -> None:
        with self._lock:
            if address in self._inboxes:
                raise TransportError(f"handler already attached for {address}")
            self._inboxes[address] = Inbox(address, handler)

    def detach(self, address: str, *, drain: bool = False) -> int:
        """Remove the handler; queued requests get 503 unless ``drain``.

        Returns how many requests were answered 503.
        """
        with self._lock:
            inbox = self._inboxes.pop(address, None)
        if inbox is None:
            return 0
        if drain:
            inbox.drain()
        leftovers = inbox.close()
        for item in leftovers:
            item.stack.release(item.transit)
            item.future.set_result(new_response(item.transit, 503))
        return len(leftovers)

    def attached(self, address: str) -> bool:
        return address in self._inboxes

    def inbox(self, address: str) -> Inbox | None:
        return self._inboxes.get(address)

    # -- sending -----------------------------------------------------------------

    def send_local(self, request: Message, record: FunctionRecord) -> Future:
        inbox = self._inboxes.get(record.address)
        if not record.live or inbox is None:
            return _done(new_response(request, 404))
        try:
            stack = self.select_stack(record)
        except NoStackError as exc:
            log.error("%s", exc)
            return _done(new_response(request, 503))
        try:
            transit = stack.encode(request)
        except (HeapExhaustedError, StackCrashed) as exc:
            log.warning("request %s not delivered: %s", request.request_id, exc)
            return _done(new_response(request, 503))
        fut: Future = Future()
        self.counters.add(messages=1)
        if not inbox.put(_Item(transit, stack, fut)):
            stack.release(transit)
            return _done(new_response(request, 404))
        return fut

    def close(self) -> None:
        for address in list(self._inboxes):
            self.detach(address)


class HttpStack:
    """Sends requests as HTTP/1.1 exchanges on a bounded worker pool."""

    def __init__(self, timeout: float = 30.0, max_in_flight: int = 8,
                 client: httpx.Client | None = None):
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self._client = client or httpx.Client(timeout=timeout)
        self._pool = ThreadPoolExecutor(max_workers=max_in_flight, thread_name_prefix="http")
        self.sent = 0
        self.transport_errors = 0
        self._lock = threading.Lock()

    def send_remote(self, request: Message, url: str) -> Future:
        if request.payload_ref is not None:
            raise NetworkBoundaryError(f"request {request.request_id} carries a heap reference")
        if not request.is_request:
            raise MessageError("only requests can be sent")
        with self._lock:
            self.sent += 1
        return self._pool.submit(self._exchange, request, url)

    def _exchange(self, request: Message, url: str) -> Message:
        headers = {"X-Reqid": request.request_id, "Content-Type": "application/octet-stream"}
        try:
            resp = self._client.request(request.method, url, content=request.payload or b"",
                                        headers=headers)
        except httpx.HTTPError as exc:
            log.warning("%s %s failed: %s", request.method, url, exc)
            with self._lock:
                self.transport_errors += 1
            return new_response(request, 504)
        return new_response(request, resp.status_code, resp.content)

    def close(self) -> None:
        self._pool.shutdown(wait=True)
        self._client.close()
