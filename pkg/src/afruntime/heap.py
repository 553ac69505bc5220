"""Application-layer heap: a fixed byte arena carved into an ordered block list.

Payloads are stored once and addressed by the integer offset of their block.
Allocation is first-fit over FREE blocks in list order; a reused block larger
than the request is split and the tail stays FREE. Freed bytes are never
erased, ``read`` only ever returns bytes inside the block border.
"""

from __future__ import annotations

import bisect
import enum
import threading
from dataclasses import dataclass
from typing import NamedTuple

__all__ = [
    "Block",
    "BlockStatus",
    "ContiguousHeap",
    "HeapError",
    "HeapExhaustedError",
    "HeapStats",
    "SizeMismatchError",
    "UnknownReferenceError",
]

DEFAULT_CAPACITY = 256 * 1024 * 1024


class HeapError(Exception):
    pass


class HeapExhaustedError(HeapError, MemoryError):
    pass


class UnknownReferenceError(HeapError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown reference"


class SizeMismatchError(HeapError, ValueError):
    pass


class BlockStatus(enum.Enum):
    FREE = "free"
    USED = "used"


@dataclass
class Block:
    reference: int
    size: int
    status: BlockStatus

    @property
    def end(self) -> int:
        return self.reference + self.size

    @property
    def free(self) -> bool:
        return self.status is BlockStatus.FREE


class HeapStats(NamedTuple):
    used_bytes: int
    free_bytes_in_blocks: int
    block_count: int


def _size_class(size: int) -> int:
    return size.bit_length() - 1


class _FreeIndex:
    """FREE block references bucketed by power-of-two size class.

    Each bucket is a sorted list of references, so the first-fit candidate
    from any bucket whose sizes all fit is simply its head.
    """

    def __init__(self) -> None:
        self._buckets: list[list[int]] = [[] for _ in range(64)]

    def add(self, block: Block) -> None:
        bisect.insort(self._buckets[_size_class(block.size)], block.reference)

    def remove(self, block: Block) -> None:
        bucket = self._buckets[_size_class(block.size)]
        i = bisect.bisect_left(bucket, block.reference)
        del bucket[i]

    def clear(self) -> None:
        for bucket in self._buckets:
            bucket.clear()

    def first_fit(self, size: int, by_ref: dict[int, Block]) -> Block | None:
        cls = _size_class(size)
        best: int | None = None
        for bucket in self._buckets[cls + 1:]:
            if bucket and (best is None or bucket[0] < best):
                best = bucket[0]
        # The request's own class holds blocks both smaller and larger than it.
        for ref in self._buckets[cls]:
            if best is not None and ref > best:
                break
            if by_ref[ref].size >= size:
                best = ref
                break
        return None if best is None else by_ref[best]


class ContiguousHeap:
    """Byte arena with explicit block management.

    All public operations take one lock, so references can be handed between
    threads freely. With ``auto_merge`` enabled (the default) ``merge`` runs
    after every ``free``.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, *, auto_merge: bool = True):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.auto_merge = auto_merge
        self.arena = bytearray(capacity)
        self._blocks: list[Block] = []
        self._by_ref: dict[int, Block] = {}
        self._free = _FreeIndex()
        self._used_bytes = 0
        self._free_bytes = 0
        self._lock = threading.Lock()
        self.peak_used_bytes = 0
        self.peak_block_count = 0
        self.malloc_count = 0
        self.exhaustion_count = 0

    # -- introspection -------------------------------------------------

    @property
    def blocks(self) -> list[Block]:
        with self._lock:
            return [Block(b.reference, b.size, b.status) for b in self._blocks]

    @property
    def used_bytes(self) -> int:
        return self._used_bytes

    @property
    def free_bytes_in_blocks(self) -> int:
        return self._free_bytes

    @property
    def end(self) -> int:
        """Offset one past the last listed block."""
        return self._blocks[-1].end if self._blocks else 0

    def stats(self) -> HeapStats:
        with self._lock:
            return HeapStats(self._used_bytes, self._free_bytes, len(self._blocks))

    def check_invariants(self) -> None:
        """Recompute everything from the block list; raise AssertionError on drift."""
        with self._lock:
            pos = 0
            used = free = 0
            for b in self._blocks:
                assert b.size >= 1, b
                assert b.reference == pos, f"gap or overlap at {b}"
                assert self._by_ref[b.reference] is b
                pos = b.end
                if b.free:
                    free += b.size
                else:
                    used += b.size
            assert pos <= self.capacity
            assert len(self._by_ref) == len(self._blocks)
            assert used == self._used_bytes, (used, self._used_bytes)
            assert free == self._free_bytes, (free, self._free_bytes)

    # -- heap interface --------------------------------------------------

    def malloc(self, size: int) -> int:
        if size < 1:
            raise ValueError(f"malloc size must be >= 1, got {size}")
        with self._lock:
            block = self._free.first_fit(size, self._by_ref)
            if block is not None:
                self._free.remove(block)
                self._free_bytes -= block.size
                remainder = block.size - size
                block.size = size
                block.status = BlockStatus.USED
                if remainder:
                    tail = Block(block.end, remainder, BlockStatus.FREE)
                    i = bisect.bisect_right(self._blocks, block.reference, key=_ref)
                    self._blocks.insert(i, tail)
                    self._by_ref[tail.reference] = tail
                    self._free.add(tail)
                    self._free_bytes += remainder
            else:
                start = self.end
                if start + size > self.capacity:
                    self.exhaustion_count += 1
                    raise HeapExhaustedError(
                        f"cannot allocate {size} bytes: {self.capacity - start} unallocated, "
                        f"no free block large enough"
                    )
                block = Block(start, size, BlockStatus.USED)
                self._blocks.append(block)
                self._by_ref[start] = block
            self._used_bytes += size
            self.malloc_count += 1
            self.peak_used_bytes = max(self.peak_used_bytes, self._used_bytes)
            self.peak_block_count = max(self.peak_block_count, len(self._blocks))
            return block.reference

    def _used_block(self, reference: int) -> Block:
        block = self._by_ref.get(reference)
        if block is None or block.free:
            raise UnknownReferenceError(f"no used block at reference {reference}")
        return block

    def write(self, reference: int, data: bytes | bytearray | memoryview) -> None:
        with self._lock:
            block = self._used_block(reference)
            n = len(data)
            if n != block.size:
                raise SizeMismatchError(f"block {reference} holds {block.size} bytes, got {n}")
            self.arena[reference:reference + n] = data

    def read(self, reference: int, size: int) -> bytes:
        with self._lock:
            block = self._used_block(reference)
            if size != block.size:
                raise SizeMismatchError(f"block {reference} holds {block.size} bytes, asked for {size}")
            return bytes(self.arena[reference:reference + size])

    def free(self, reference: int) -> None:
        with self._lock:
            block = self._used_block(reference)
            block.status = BlockStatus.FREE
            self._used_bytes -= block.size
            self._free_bytes += block.size
            self._free.add(block)
            if self.auto_merge:
                self._merge()

    def merge(self) -> None:
        with self._lock:
            self._merge()

    def _merge(self) -> None:
        if not self._free_bytes:
            return
        merged: list[Block] = []
        for b in self._blocks:
            prev = merged[-1] if merged else None
            if b.free and prev is not None and prev.free:
                prev.size += b.size
                del self._by_ref[b.reference]
            else:
                merged.append(b)
        if merged and merged[-1].free:
            tail = merged.pop()
            del self._by_ref[tail.reference]
            self._free_bytes -= tail.size
        self._blocks = merged
        self._free.clear()
        for b in merged:
            if b.free:
                self._free.add(b)

    # -- convenience -----------------------------------------------------

    def store(self, data: bytes | bytearray | memoryview) -> int:
        """malloc + write as one step; on write failure the block is released."""
        ref = self.malloc(len(data))
        try:
            self.write(ref, data)
        except BaseException:
            self.free(ref)
            raise
        return ref

    def take(self, reference: int, size: int) -> bytes:
        """read + free."""
        data = self.read(reference, size)
        self.free(reference)
        return data


def _ref(block: Block) -> int:
    return block.reference
