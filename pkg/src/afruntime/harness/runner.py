"""Replay a scenario script against a fresh runtime."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from ..engine import Runtime
from ..heap import DEFAULT_CAPACITY
from ..messaging import DEFAULT_TIMEOUT, RequestTimeout, new_request
from ..transport import COPY, HEAP_REF
from .chain import Chain, FrameOutcome, FrameSettings
from .metrics import DEFAULT_TICK, MetricsRecord, MetricsSampler
from .scenario import (
    ContextEntry,
    ExpectActions,
    ExpectChain,
    ExpectPlacement,
    ExpectStatus,
    FramesEntry,
    RequestEntry,
    ScenarioError,
    ScenarioScript,
    parse_scenario,
)
from .service import ServerThread, create_stub_app
from .transforms import FrameError

log = logging.getLogger(__name__)

MODES = (COPY, HEAP_REF)


@dataclass
class RunConfig:
    heap_capacity: int = DEFAULT_CAPACITY
    mode: Optional[str] = None  # force one local stack for every chain function
    merge: bool = True
    remote_map: dict[str, str] = field(default_factory=dict)
    timeout: float = DEFAULT_TIMEOUT
    tick: float = DEFAULT_TICK
    sample_every: int = 0  # also sample after every N-th completed frame
    realtime: bool = False  # sleep until each entry's time offset
    keep_frames: bool = False
    stub_effect: str = "identity"
    http_max_in_flight: int = 8

    def __post_init__(self):
        if self.mode is not None and self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class AssertionOutcome:
    line: int
    description: str
    passed: bool
    detail: str = ""

    def __str__(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail and not self.passed else ""
        return f"[{mark}] line {self.line}: {self.description}{extra}"


@dataclass
class RunResult:
    assertions: list[AssertionOutcome]
    frames: list[FrameOutcome]
    metrics: list[MetricsRecord]
    events: list[dict[str, Any]]
    summary: dict[str, Any]
    observed: list[bytes]

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    @property
    def lost(self) -> int:
        return sum(1 for f in self.frames if not f.ok)


def _remote_map(script: ScenarioScript, config: RunConfig) -> tuple[dict[str, str], bool]:
    """Remote overrides for the chain, and whether an embedded stub is needed."""
    overrides = dict(config.remote_map)
    ruled = {r.function_address for r in script.rules}
    need_stub = any(a in ruled and a not in overrides for a in script.stage_addresses.values())
    return overrides, need_stub


@dataclass
class Deployment:
    """A runtime with the chain functions registered, plus the embedded stub if any."""

    runtime: Runtime
    chain: Chain
    stub: Optional[ServerThread] = None

    def close(self) -> None:
        self.runtime.close()
        if self.stub is not None:
            self.stub.stop()


def deploy(script: ScenarioScript, config: RunConfig) -> Deployment:
    stages = script.stage_addresses
    overrides, need_stub = _remote_map(script, config)
    stub = ServerThread(create_stub_app(config.stub_effect)).start() if need_stub else None
    if stub is not None:
        for stage, addr in stages.items():
            overrides.setdefault(addr, f"{stub.url}/{stage}")
    rt = Runtime(heap_capacity=config.heap_capacity, merge=config.merge, rules=script.rules,
                 remote_overrides=overrides, timeout=config.timeout,
                 http_max_in_flight=config.http_max_in_flight)
    specs = {addr: script.function_spec(stage) for stage, addr in stages.items()}
    comm = {a: ((config.mode,) if config.mode else s.comm_methods) for a, s in specs.items()}
    chain = Chain(rt, stages["process"], stages["display"], keep_frames=config.keep_frames,
                  comm_methods=comm, scopes={a: s.scope for a, s in specs.items()})
    return Deployment(rt, chain, stub)


def _inject(rt: Runtime, entry: RequestEntry) -> list[int]:
    """Submit ``entry.count`` raw requests at once; statuses in submission order (0 = timed out)."""
    futures = []
    for i in range(entry.count):
        body = np.random.default_rng([entry.seed, i]).bytes(entry.size) if entry.size else None
        futures.append(rt.submit(new_request(entry.method, entry.target, body, ids=rt.ids)))
    statuses = []
    for fut in futures:
        try:
            statuses.append(fut.result().status)
        except RequestTimeout:
            statuses.append(0)
    return statuses


def run_scenario(script: ScenarioScript | str, config: RunConfig | None = None) -> RunResult:
    if isinstance(script, str):
        script = parse_scenario(script)
    config = config or RunConfig()
    try:
        FrameSettings.from_mapping(script.settings).validate()
    except FrameError as exc:
        raise ScenarioError(str(exc)) from None

    deployment = deploy(script, config)
    rt, chain, stub = deployment.runtime, deployment.chain, deployment.stub
    sampler = MetricsSampler(rt, config.tick)

    assertions: list[AssertionOutcome] = []
    frames: list[FrameOutcome] = []
    events: list[dict[str, Any]] = []
    last_actions: list[tuple[str, str]] = []
    last_batch: list[FrameOutcome] | None = None
    last_statuses: list[int] | None = None
    completed = 0

    def on_frame(_out: FrameOutcome) -> None:
        nonlocal completed
        completed += 1
        if config.sample_every and completed % config.sample_every == 0:
            sampler.sample()

    def check(entry, description: str, passed: bool, detail: str = "") -> None:
        assertions.append(AssertionOutcome(entry.line, description, passed, detail))

    t0 = time.monotonic()
    sampler.start()
    sampler.sample()
    try:
        for entry in script.entries:
            if config.realtime:
                time.sleep(max(0.0, t0 + entry.at - time.monotonic()))
            if isinstance(entry, ContextEntry):
                actions = rt.ingest(entry.snapshot)
                last_actions = [(a.kind, a.address) for a in actions]
                events.append({"at": entry.at, "event": "context",
                               "actions": [f"{k}({a})" for k, a in last_actions]})
                sampler.sample()
            elif isinstance(entry, FramesEntry):
                settings = FrameSettings.from_mapping({**script.settings, **entry.options})
                try:
                    batch = chain.run(settings, entry.count, start=len(frames), on_frame=on_frame)
                except FrameError as exc:
                    raise ScenarioError(str(exc), entry.line) from None
                frames.extend(batch)
                last_batch = batch
                last_statuses = [s for f in batch for s in f.statuses]
                events.append({"at": entry.at, "event": "frames", "count": entry.count,
                               "ok": sum(f.ok for f in batch)})
                sampler.sample()
            elif isinstance(entry, RequestEntry):
                last_statuses = _inject(rt, entry)
                events.append({"at": entry.at, "event": "request", "target": entry.target,
                               "statuses": sorted(set(last_statuses))})
                sampler.sample()
            elif isinstance(entry, ExpectPlacement):
                for addr, want in entry.expected.items():
                    got = rt.placement(addr)
                    check(entry, f"placement {addr} == {want.value}", got is want, f"got {got.value}")
            elif isinstance(entry, ExpectStatus):
                if last_statuses is None:
                    check(entry, f"status {entry.status}", False, "no requests sent yet")
                else:
                    seen = sorted(set(last_statuses))
                    check(entry, f"status {entry.status} for last batch",
                          seen == [entry.status], f"saw {seen}")
            elif isinstance(entry, ExpectActions):
                want = [f"{k}({a})" for k, a in entry.actions]
                got = [f"{k}({a})" for k, a in last_actions]
                check(entry, f"actions {want or 'none'}", got == want, f"got {got or 'none'}")
            elif isinstance(entry, ExpectChain):
                if last_batch is None:
                    check(entry, "chain ok", False, "no frames sent yet")
                else:
                    bad = [f.index for f in last_batch if not f.ok]
                    check(entry, "chain ok for last batch", not bad, f"{len(bad)} frames wrong, first {bad[:5]}")
        rt.drain(config.timeout)
        sampler.sample()
    finally:
        sampler.stop()
        deployment.close()

    c, lc = rt.counters, rt.lcm.counters
    summary = {
        "frames": len(frames),
        "frames_ok": sum(f.ok for f in frames),
        "submitted": c.submitted,
        "completed": c.completed,
        "errors": c.errors,
        "dispatched_local": c.dispatched_local,
        "dispatched_remote": c.dispatched_remote,
        "peak_in_flight": c.peak_in_flight,
        "peak_used_bytes": rt.heap.peak_used_bytes,
        "peak_block_count": rt.heap.peak_block_count,
        "final_used_bytes": rt.heap.stats().used_bytes,
        "bytes_copied": lc.bytes_copied,
        "bytes_delivered": lc.bytes_delivered,
        "copy_resident_peak": lc.copy_resident_peak,
        # every submitted Reqid completed, none twice
        "exactly_once": len(rt.completion_log) == len(set(rt.completion_log))
        and set(rt.completion_log) == set(rt.enqueue_log),
        "orphaned": rt.table.orphaned,
        "timed_out": rt.table.timed_out,
    }
    return RunResult(assertions, frames, sampler.records, events, summary, chain.observed)
