"""Deterministic frame effects shared by the local Process function and the stub service.

Frames are row-major RGB triplets, ``w * h * 3`` bytes.
"""

from __future__ import annotations

import hashlib

import numpy as np


class FrameError(ValueError):
    pass


SHARPEN_KERNEL = np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], dtype=np.int32)


def frame_array(data: bytes, w: int | None, h: int | None) -> np.ndarray:
    if w is None or h is None:
        raise FrameError("frame width and height are required")
    if w < 1 or h < 1:
        raise FrameError(f"bad frame geometry {w}x{h}")
    if len(data) != w * h * 3:
        raise FrameError(f"{w}x{h} RGB frame needs {w * h * 3} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def identity(data: bytes, w: int | None = None, h: int | None = None) -> bytes:
    return bytes(data)


def gray(data: bytes, w: int | None = None, h: int | None = None) -> bytes:
    if w is None and h is None:
        if len(data) % 3:
            raise FrameError("gray needs whole RGB triplets")
        px = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
    else:
        px = frame_array(data, w, h).reshape(-1, 3)
    mean = px.sum(axis=1, dtype=np.uint16) // 3
    return np.repeat(mean.astype(np.uint8), 3).tobytes()


def sharpen3x3(data: bytes, w: int | None = None, h: int | None = None) -> bytes:
    img = frame_array(data, w, h).astype(np.int32)
    # replicate borders so a flat image stays flat
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            k = SHARPEN_KERNEL[dy, dx]
            if k:
                out += k * padded[dy:dy + h, dx:dx + w]
    return np.clip(out, 0, 255).astype(np.uint8).tobytes()


TRANSFORMS = {"identity": identity, "gray": gray, "sharpen3x3": sharpen3x3}


def apply(effect: str, data: bytes, w: int | None = None, h: int | None = None) -> bytes:
    try:
        fn = TRANSFORMS[effect]
    except KeyError:
        raise FrameError(f"unknown effect {effect!r}") from None
    return fn(data, w, h)


def display_ack(frame: bytes) -> bytes:
    """What a Display stage answers: the SHA-256 of the frame it showed."""
    return hashlib.sha256(frame).digest()
