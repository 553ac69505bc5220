"""Periodic metric samples and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from ..engine import Runtime

DEFAULT_TICK = 0.1


@dataclass(frozen=True)
class MetricsRecord:
    tick: int
    elapsed_s: float
    heap_used_bytes: int
    heap_free_bytes: int
    block_count: int
    copy_resident_bytes: int
    in_flight: int
    dispatched_local: int
    dispatched_remote: int
    completed: int
    errors: int
    bytes_copied: int
    latency_p50_ms: float
    latency_p95_ms: float
    latency_p99_ms: float


COLUMNS = tuple(f.name for f in dataclasses.fields(MetricsRecord))


def latency_quantiles(latencies: list[float]) -> tuple[float, float, float]:
    if not latencies:
        return (0.0, 0.0, 0.0)
    q = np.quantile(np.asarray(latencies) * 1e3, [0.5, 0.95, 0.99])
    return tuple(round(float(x), 4) for x in q)


class MetricsSampler:
    """Samples a runtime on demand and, optionally, every ``tick`` seconds."""

    def __init__(self, runtime: Runtime, tick: float = DEFAULT_TICK):
        self.runtime = runtime
        self.tick = tick
        self.records: list[MetricsRecord] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._t0 = time.perf_counter()

    def sample(self) -> MetricsRecord:
        rt = self.runtime
        c, lc = rt.counters, rt.lcm.counters
        # one sample at a time so rows stay in the order they were observed
        with self._lock:
            heap = rt.heap.stats()
            with c._lock:
                latencies = list(c.latencies[-10_000:])
                counts = (c.in_flight, c.dispatched_local, c.dispatched_remote, c.completed, c.errors)
            rec = MetricsRecord(
                len(self.records), round(time.perf_counter() - self._t0, 6),
                heap.used_bytes, heap.free_bytes_in_blocks, heap.block_count,
                lc.copy_resident_bytes, *counts, lc.bytes_copied, *latency_quantiles(latencies),
            )
            self.records.append(rec)
        return rec

    def start(self) -> "MetricsSampler":
        if self.tick > 0:
            self._thread = threading.Thread(target=self._run, name="metrics", daemon=True)
            self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.wait(self.tick):
            self.sample()

    def stop(self) -> list[MetricsRecord]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return self.records

    def __enter__(self) -> "MetricsSampler":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def write_csv(records: Iterable[MetricsRecord], out: str | Path | IO[str]) -> None:
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="") as fh:
            write_csv(records, fh)
        return
    writer = csv.writer(out)
    writer.writerow(COLUMNS)
    for rec in records:
        writer.writerow(dataclasses.astuple(rec))


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
