import random

import httpx
import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings
from hypothesis import strategies as st

from afruntime.harness.service import ServerThread, create_stub_app
from afruntime.harness.transforms import FrameError, apply, display_ack, gray, identity, sharpen3x3


def sharpen_bruteforce(data, w, h):
    """Pixel-by-pixel 3x3 sharpen with clamped borders, pure Python."""
    kernel = [[0, -1, 0], [-1, 5, -1], [0, -1, 0]]

    def px(x, y, c):
        x = min(max(x, 0), w - 1)
        y = min(max(y, 0), h - 1)
        return data[(y * w + x) * 3 + c]

    out = bytearray()
    for y in range(h):
        for x in range(w):
            for c in range(3):
                acc = sum(kernel[j][i] * px(x + i - 1, y + j - 1, c) for j in range(3) for i in range(3))
                out.append(min(max(acc, 0), 255))
    return bytes(out)


def test_identity():
    assert identity(b"abc") == b"abc"


def test_gray_pixel():
    assert gray(bytes([30, 60, 90])) == bytes([60, 60, 60])
    assert gray(bytes([1, 1, 2, 255, 255, 254]), 2, 1) == bytes([1, 1, 1, 254, 254, 254])


def test_sharpen_flat_image_unchanged():
    flat = bytes([77, 12, 200]) * (9 * 5)
    assert sharpen3x3(flat, 9, 5) == flat


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.randoms(use_true_random=False))
def test_sharpen_matches_bruteforce(w, h, rnd):
    data = bytes(rnd.randrange(256) for _ in range(w * h * 3))
    assert sharpen3x3(data, w, h) == sharpen_bruteforce(data, w, h)


@pytest.mark.parametrize("effect,data,w,h", [
    ("sharpen3x3", bytes(10), None, None),
    ("sharpen3x3", bytes(10), 2, 2),
    ("gray", bytes(4), None, None),
    ("nope", b"", None, None),
])
def test_malformed_frames(effect, data, w, h):
    with pytest.raises(FrameError):
        apply(effect, data, w, h)


@pytest.fixture
def client():
    return TestClient(create_stub_app("identity"))


def test_stub_health(client):
    r = client.get("/healthz")
    assert r.status_code == 200 and r.json()["status"] == "ok"


def test_stub_process_effects(client):
    frame = bytes(random.Random(1).randrange(256) for _ in range(4 * 3 * 3))
    r = client.post("/process?effect=sharpen3x3&w=4&h=3", content=frame, headers={"X-Reqid": "abc"})
    assert r.status_code == 200
    assert r.content == sharpen_bruteforce(frame, 4, 3)
    assert r.headers["x-reqid"] == "abc"
    assert client.post("/process", content=b"xyz").content == b"xyz"
    assert client.post("/process?effect=gray", content=bytes([30, 60, 90])).content == bytes([60] * 3)


def test_stub_get_process(client):
    r = client.request("GET", "/process?effect=identity", content=b"body")
    assert r.content == b"body"


def test_stub_bad_dimensions_400(client):
    r = client.post("/process?effect=sharpen3x3&w=5&h=5", content=bytes(10))
    assert r.status_code == 400
    assert "needs" in r.json()["detail"]


def test_stub_display(client):
    r = client.post("/display", content=b"frame")
    assert r.content == display_ack(b"frame")
    assert client.get("/stats").json() == {"processed": 0, "displayed": 1}


def test_server_thread_serves_http():
    with ServerThread(create_stub_app("gray")) as srv:
        r = httpx.post(srv.url + "/process", content=bytes([30, 60, 90]))
        assert r.content == bytes([60, 60, 60])
        assert httpx.get(srv.url + "/healthz").json()["transform"] == "gray"


def test_unknown_default_transform():
    with pytest.raises(ValueError):
        create_stub_app("blur")
