import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afruntime.catalogue import FunctionRecord
from afruntime.heap import ContiguousHeap
from afruntime.messaging import PayloadRef, new_request, new_response
from afruntime.transport import (
    COPY,
    HEAP_REF,
    DuplicateStackError,
    HttpStack,
    LocalCommunicationManager,
    LocalStack,
    NetworkBoundaryError,
    NoStackError,
    StackMode,
)

ADDR = "com.example.myapp.process"


@pytest.fixture
def lcm():
    m = LocalCommunicationManager(ContiguousHeap(1 << 20))
    yield m
    m.close()


def echo(request):
    return request.body


def test_heap_ref_roundtrip_and_cleanup(lcm):
    seen = []

    def handler(req):
        seen.append(req.body)
        return req.body[::-1]

    lcm.attach(ADDR, handler)
    payload = bytes(range(256)) * 4
    resp = lcm.send_local(new_request("POST", ADDR, payload), FunctionRecord(ADDR, [HEAP_REF])).result(5)
    assert seen == [payload]
    assert resp.status == 200 and resp.body == payload[::-1]
    lcm.heap.merge()
    assert lcm.heap.stats() == (0, 0, 0)
    assert lcm.heap.peak_used_bytes == 1024


def test_empty_body_skips_heap(lcm):
    lcm.attach(ADDR, lambda req: None)
    resp = lcm.send_local(new_request("GET", ADDR), FunctionRecord(ADDR, [HEAP_REF])).result(5)
    assert resp.status == 200
    assert lcm.heap.malloc_count == 0


def test_no_handler_is_404(lcm):
    resp = lcm.send_local(new_request("GET", ADDR), FunctionRecord(ADDR)).result(5)
    assert resp.status == 404


def test_heap_exhaustion_is_503_and_not_delivered():
    m = LocalCommunicationManager(ContiguousHeap(100))
    calls = []
    m.attach(ADDR, calls.append)
    resp = m.send_local(new_request("POST", ADDR, bytes(101)), FunctionRecord(ADDR)).result(5)
    assert resp.status == 503
    assert calls == []
    m.close()


def test_handler_exception_is_500(lcm):
    def broken(req):
        raise RuntimeError("x")

    lcm.attach(ADDR, broken)
    assert lcm.send_local(new_request("GET", ADDR), FunctionRecord(ADDR)).result(5).status == 500


def test_handler_may_return_message(lcm):
    lcm.attach(ADDR, lambda req: new_response(req, 201, b"made"))
    resp = lcm.send_local(new_request("POST", ADDR, b"x"), FunctionRecord(ADDR)).result(5)
    assert (resp.status, resp.body) == (201, b"made")


def test_select_stack_priority(lcm):
    assert lcm.select_stack(FunctionRecord(ADDR, ["heap_ref", "copy"])).id == HEAP_REF
    assert lcm.select_stack(FunctionRecord(ADDR, ["copy"])).id == COPY
    with pytest.raises(NoStackError):
        lcm.select_stack(FunctionRecord(ADDR, ["unknown"]))


def test_register_extra_stack(lcm):
    lcm.register_stack(LocalStack("loopback", StackMode.COPY))
    assert lcm.select_stack(FunctionRecord(ADDR, ["loopback", "copy"])).id == "loopback"
    with pytest.raises(DuplicateStackError):
        lcm.register_stack(LocalStack("loopback", StackMode.COPY))
    assert set(lcm.stacks) == {"copy", "heap_ref", "loopback"}


def test_copy_mode_accounting(lcm):
    lcm.attach(ADDR, echo)
    n = 4096
    lcm.send_local(new_request("POST", ADDR, bytes(n)), FunctionRecord(ADDR, [COPY])).result(5)
    c = lcm.counters
    assert c.bytes_copied == 4 * n  # envelope + inbox copy, each way
    assert c.copy_resident_peak >= 2 * n
    assert c.copy_resident_bytes == 0
    assert lcm.heap.malloc_count == 0


def test_heap_mode_accounting(lcm):
    lcm.attach(ADDR, echo)
    n = 4096
    lcm.send_local(new_request("POST", ADDR, bytes(n)), FunctionRecord(ADDR, [HEAP_REF])).result(5)
    assert lcm.counters.bytes_copied == 2 * n  # one heap store each way
    assert lcm.heap.peak_used_bytes <= n


def test_copy_retain_limit_emulates_crash():
    m = LocalCommunicationManager(ContiguousHeap(1024), copy_retain_limit=250)
    m.attach(ADDR, lambda req: None)
    rec = FunctionRecord(ADDR, [COPY])
    statuses = [m.send_local(new_request("POST", ADDR, bytes(100)), rec).result(5).status for _ in range(3)]
    assert statuses == [200, 200, 503]
    m.close()


def test_detach_answers_queued_with_503(lcm):
    gate = threading.Event()
    lcm.attach(ADDR, lambda req: (gate.wait(5), req.body)[1])
    rec = FunctionRecord(ADDR, [HEAP_REF])
    futs = [lcm.send_local(new_request("POST", ADDR, bytes([i]) * 10), rec) for i in range(4)]
    while lcm.inbox(ADDR).pending > 3:
        pass
    assert lcm.detach(ADDR) == 3
    assert [f.result(5).status for f in futs[1:]] == [503, 503, 503]
    gate.set()
    assert futs[0].result(5).status == 200
    lcm.heap.merge()
    assert lcm.heap.stats().used_bytes == 0


def test_detach_with_drain_completes_queue(lcm):
    lcm.attach(ADDR, echo)
    rec = FunctionRecord(ADDR, [HEAP_REF])
    futs = [lcm.send_local(new_request("POST", ADDR, b"p%d" % i), rec) for i in range(20)]
    assert lcm.detach(ADDR, drain=True) == 0
    assert [f.result(5).body for f in futs] == [b"p%d" % i for i in range(20)]


def test_per_sender_fifo(lcm):
    order = []
    lcm.attach(ADDR, lambda req: order.append(req.body))
    rec = FunctionRecord(ADDR, [HEAP_REF])
    futs = []

    def sender(tag):
        for i in range(50):
            futs.append(lcm.send_local(new_request("POST", ADDR, f"{tag}:{i}".encode()), rec))

    threads = [threading.Thread(target=sender, args=(t,)) for t in "abc"]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for f in list(futs):
        f.result(5)
    for tag in "abc":
        mine = [int(b.split(b":")[1]) for b in order if b.startswith(tag.encode())]
        assert mine == list(range(50))


@settings(max_examples=60, deadline=None)
@given(st.binary(max_size=3000), st.sampled_from([COPY, HEAP_REF]))
def test_payload_fidelity(payload, method):
    m = LocalCommunicationManager(ContiguousHeap(1 << 16))
    seen = []
    m.attach(ADDR, lambda req: (seen.append(req.body), req.body + b"!")[1])
    resp = m.send_local(new_request("POST", ADDR, payload), FunctionRecord(ADDR, [method])).result(5)
    assert seen == [payload]
    assert resp.body == payload + b"!"
    m.heap.merge()
    assert m.heap.stats() == (0, 0, 0)
    m.close()


def test_send_remote_roundtrip(echo_server):
    http = HttpStack(timeout=5)
    req = new_request("POST", ADDR, b"frame")
    resp = http.send_remote(req, echo_server + "/upper").result(5)
    assert (resp.status, resp.body, resp.request_id) == (200, b"FRAME", req.request_id)
    http.close()


def test_send_remote_passes_error_status(echo_server):
    http = HttpStack(timeout=5)
    resp = http.send_remote(new_request("GET", ADDR), echo_server + "/fail").result(5)
    assert resp.status == 500
    assert http.transport_errors == 0
    http.close()


def test_send_remote_unreachable_is_504(dead_url):
    http = HttpStack(timeout=2)
    resp = http.send_remote(new_request("GET", ADDR), dead_url).result(5)
    assert resp.status == 504
    assert http.transport_errors == 1
    http.close()


def test_heap_reference_never_crosses_network():
    http = HttpStack(timeout=1)
    req = new_request("POST", ADDR, b"x").with_ref(PayloadRef(0, 1))
    with pytest.raises(NetworkBoundaryError):
        http.send_remote(req, "http://127.0.0.1:1")
    assert http.sent == 0
    http.close()
