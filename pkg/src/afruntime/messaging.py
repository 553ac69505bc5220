"""Request/response envelope shared by the local bus and the HTTP stack."""

from __future__ import annotations

import base64
import enum
import heapq
import itertools
import json
import logging
import secrets
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field, replace
from typing import Callable

log = logging.getLogger(__name__)

METHODS = frozenset({"GET", "POST", "PUT", "DELETE", "PATCH", "HEAD", "OPTIONS"})
DEFAULT_TIMEOUT = 30.0

# canonical key order of the bus record
BUS_KEYS = ("Reqid", "Method", "URL", "Status", "Payload", "PaylRef")


class MessageError(ValueError):
    pass


class Kind(enum.Enum):
    REQUEST = "request"
    RESPONSE = "response"


@dataclass(frozen=True)
class PayloadRef:
    """Heap reference plus payload length."""

    reference: int
    length: int


@dataclass(frozen=True)
class Message:
    request_id: str
    kind: Kind
    method: str | None = None
    url: str | None = None
    status: int | None = None
    payload: bytes | None = None
    payload_ref: PayloadRef | None = None

    def __post_init__(self):
        if self.payload is not None and self.payload_ref is not None:
            raise MessageError("payload and payload_ref are mutually exclusive")
        if self.payload is not None and len(self.payload) == 0:
            raise MessageError("empty bodies carry neither payload nor payload_ref")
        if self.kind is Kind.REQUEST:
            if self.method is None or not self.url:
                raise MessageError("requests need method and url")
            if self.status is not None:
                raise MessageError("requests carry no status")
        else:
            if self.status is None:
                raise MessageError("responses need a status")
            if self.method is not None or self.url is not None:
                raise MessageError("responses carry no method/url")

    @property
    def is_request(self) -> bool:
        return self.kind is Kind.REQUEST

    @property
    def body(self) -> bytes:
        """Materialized body; raises for heap-reference messages."""
        if self.payload_ref is not None:
            raise MessageError("body lives on the heap; resolve payload_ref first")
        return self.payload or b""

    @property
    def body_length(self) -> int:
        if self.payload_ref is not None:
            return self.payload_ref.length
        return len(self.payload or b"")

    @property
    def ok(self) -> bool:
        return self.status is not None and 200 <= self.status < 300

    def with_payload(self, payload: bytes | None) -> "Message":
        return replace(self, payload=payload or None, payload_ref=None)

    def with_ref(self, ref: PayloadRef) -> "Message":
        return replace(self, payload=None, payload_ref=ref)


class RequestIdGenerator:
    """Random per-instance nonce joined with a 64-bit counter."""

    def __init__(self, nonce: str | None = None):
        self.nonce = nonce or secrets.token_hex(8)
        self._counter = itertools.count(1)
        self._lock = threading.Lock()

    def __call__(self) -> str:
        with self._lock:
            n = next(self._counter)
        return f"{self.nonce}-{n & 0xFFFFFFFFFFFFFFFF:016x}"


_default_ids = RequestIdGenerator()


def new_request(method: str, url: str, body: bytes | None = None,
                *, ids: Callable[[], str] = _default_ids) -> Message:
    method = method.upper()
    if method not in METHODS:
        raise MessageError(f"unsupported method {method!r}")
    if not url:
        raise MessageError("url must be non-empty")
    return Message(ids(), Kind.REQUEST, method=method, url=url, payload=bytes(body) if body else None)


def new_response(request: Message, status: int, body: bytes | None = None) -> Message:
    if request.kind is not Kind.REQUEST:
        raise MessageError("can only respond to a request")
    return Message(request.request_id, Kind.RESPONSE, status=int(status),
                   payload=bytes(body) if body else None)


# -- bus form ---------------------------------------------------------------

def to_bus(message: Message) -> dict[str, object]:
    """Key-value record in canonical key order; absent fields are omitted."""
    record: dict[str, object] = {"Reqid": message.request_id}
    if message.kind is Kind.REQUEST:
        record["Method"] = message.method
        record["URL"] = message.url
    else:
        record["Status"] = message.status
    if message.payload is not None:
        record["Payload"] = message.payload
    elif message.payload_ref is not None:
        record["PaylRef"] = (message.payload_ref.reference, message.payload_ref.length)
    return record


def from_bus(record: dict[str, object]) -> Message:
    unknown = set(record) - set(BUS_KEYS)
    if unknown:
        raise MessageError(f"unknown bus keys {sorted(unknown)}")
    ref = record.get("PaylRef")
    kind = Kind.RESPONSE if "Status" in record else Kind.REQUEST
    return Message(
        request_id=str(record["Reqid"]),
        kind=kind,
        method=record.get("Method"),
        url=record.get("URL"),
        status=record.get("Status"),
        payload=record.get("Payload"),
        payload_ref=PayloadRef(*ref) if ref is not None else None,
    )


def encode_bus(message: Message) -> bytes:
    """Byte-exact dump of the bus record (JSON, payload base64)."""
    record = to_bus(message)
    if "Payload" in record:
        record["Payload"] = base64.b64encode(record["Payload"]).decode("ascii")
    if "PaylRef" in record:
        record["PaylRef"] = list(record["PaylRef"])
    return json.dumps(record, separators=(",", ":")).encode()


def decode_bus(data: bytes) -> Message:
    record = json.loads(data)
    if "Payload" in record:
        record["Payload"] = base64.b64decode(record["Payload"])
    return from_bus(record)


# -- correlation ---------------------------------------------------------------

@dataclass
class _Slot:
    future: Future
    deadline: float


@dataclass
class CorrelationTable:
    """Pending request ids mapped to completion slots.

    Every entry leaves the table exactly once: response, timeout or cancel.
    Responses that find no entry are counted in ``orphaned`` and dropped.
    """

    default_timeout: float = DEFAULT_TIMEOUT
    clock: Callable[[], float] = time.monotonic
    orphaned: int = 0
    completed: int = 0
    timed_out: int = 0
    cancelled: int = 0
    _pending: dict[str, _Slot] = field(default_factory=dict)
    _deadlines: list[tuple[float, str]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def __len__(self) -> int:
        return len(self._pending)

    def __contains__(self, request_id: str) -> bool:
        return request_id in self._pending

    def register(self, request: Message, timeout: float | None = None) -> Future:
        deadline = self.clock() + (self.default_timeout if timeout is None else timeout)
        fut: Future = Future()
        fut.set_running_or_notify_cancel()
        with self._lock:
            if request.request_id in self._pending:
                raise MessageError(f"request {request.request_id} already pending")
            self._pending[request.request_id] = _Slot(fut, deadline)
            heapq.heappush(self._deadlines, (deadline, request.request_id))
        return fut

    def correlate(self, response: Message) -> bool:
        """Complete the waiting caller; False when the response is orphaned."""
        with self._lock:
            slot = self._pending.pop(response.request_id, None)
            if slot is None:
                self.orphaned += 1
                log.debug("orphaned response %s", response.request_id)
                return False
            self.completed += 1
        slot.future.set_result(response)
        return True

    def cancel(self, request_id: str) -> bool:
        with self._lock:
            slot = self._pending.pop(request_id, None)
            if slot is None:
                return False
            self.cancelled += 1
        slot.future.set_exception(RequestCancelled(request_id))
        return True

    def expire(self, now: float | None = None) -> list[str]:
        """Fail every entry whose deadline has passed; returns their ids."""
        now = self.clock() if now is None else now
        expired: list[tuple[str, _Slot]] = []
        with self._lock:
            while self._deadlines and self._deadlines[0][0] <= now:
                _, rid = heapq.heappop(self._deadlines)
                slot = self._pending.get(rid)
                if slot is not None and slot.deadline <= now:
                    del self._pending[rid]
                    self.timed_out += 1
                    expired.append((rid, slot))
        for rid, slot in expired:
            slot.future.set_exception(RequestTimeout(rid))
        return [rid for rid, _ in expired]

    def next_deadline(self) -> float | None:
        with self._lock:
            while self._deadlines and self._deadlines[0][1] not in self._pending:
                heapq.heappop(self._deadlines)
            return self._deadlines[0][0] if self._deadlines else None


class RequestTimeout(TimeoutError):
    pass


class RequestCancelled(Exception):
    pass


class Reaper(threading.Thread):
    """Background thread that expires overdue correlation entries."""

    def __init__(self, table: CorrelationTable, interval: float = 0.05):
        super().__init__(name="correlation-reaper", daemon=True)
        self.table = table
        self.interval = interval
        self._stop_event = threading.Event()

    def run(self):
        while not self._stop_event.wait(self.interval):
            self.table.expire()

    def stop(self):
        self._stop_event.set()
