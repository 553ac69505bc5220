"""Scenario script parser.

A script is line oriented; ``#`` starts a comment. Untimed directives
configure the run, timed entries (``at <seconds> ...``) are replayed in
order. See README for the full grammar.
"""

from __future__ import annotations

import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

from ..catalogue import MalformedAddressError, Scope, labels, split_target
from ..messaging import METHODS
from ..policy import (
    INIT,
    OFFLOAD,
    SNAPSHOT_FIELDS,
    ContextSnapshot,
    Placement,
    PlacementRule,
    PolicyError,
    parse_literal,
    parse_predicate,
)


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


DEFAULT_SETTINGS: dict[str, Any] = {
    "app": "com.example.myapp",
    "width": 360,
    "height": 640,
    "effect": "identity",
    "size": None,  # raw payload bytes; overrides width*height*3 for the identity effect
    "seed": 0,
    "in_flight": 1,
    "control": None,  # (min, max) bytes of per-frame control messages to Display
}

STAGES = ("process", "display")


@dataclass(frozen=True)
class ContextEntry:
    at: float
    snapshot: ContextSnapshot
    line: int = 0


@dataclass(frozen=True)
class FramesEntry:
    at: float
    count: int
    options: dict[str, Any] = field(default_factory=dict)
    line: int = 0


@dataclass(frozen=True)
class RequestEntry:
    at: float
    target: str
    method: str = "POST"
    size: int = 0
    seed: int = 0
    count: int = 1
    line: int = 0


@dataclass(frozen=True)
class ExpectPlacement:
    at: float
    expected: dict[str, Placement]
    line: int = 0


@dataclass(frozen=True)
class ExpectStatus:
    at: float
    status: int
    line: int = 0


@dataclass(frozen=True)
class ExpectActions:
    at: float
    actions: tuple[tuple[str, str], ...]
    line: int = 0


@dataclass(frozen=True)
class ExpectChain:
    at: float
    line: int = 0


Entry = Union[ContextEntry, FramesEntry, RequestEntry, ExpectPlacement, ExpectStatus, ExpectActions, ExpectChain]


@dataclass(frozen=True)
class FunctionSpec:
    address: str
    comm_methods: tuple[str, ...] = ("heap_ref",)
    scope: Scope = Scope.LOCAL_APP


@dataclass
class ScenarioScript:
    settings: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_SETTINGS))
    rules: list[PlacementRule] = field(default_factory=list)
    functions: dict[str, FunctionSpec] = field(default_factory=dict)
    entries: list[Entry] = field(default_factory=list)
    source: str = "<string>"

    def address(self, name: str) -> str:
        """Resolve a stage alias (``process``) to its full address."""
        if name in STAGES or name == "control":
            return f"{self.settings['app']}.{name}"
        return name

    def target(self, raw: str) -> str:
        """Like ``address`` but keeps a path/query suffix."""
        address, suffix = split_target(raw)
        return self.address(address) + suffix

    @property
    def stage_addresses(self) -> dict[str, str]:
        return {s: self.address(s) for s in STAGES}

    def function_spec(self, stage: str) -> FunctionSpec:
        addr = self.address(stage)
        return self.functions.get(addr, FunctionSpec(addr))


_KV = re.compile(r"^([A-Za-z_][\w.]*)=(.*)$")
_ACTION = re.compile(r"^(offloadFunction|initFunction)\((.+)\)$")


def _kv(tokens: list[str], line: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        m = _KV.match(tok)
        if not m:
            raise ScenarioError(f"expected key=value, got {tok!r}", line)
        out[m.group(1)] = m.group(2)
    return out


def _setting(key: str, raw: str, line: int) -> Any:
    if key not in DEFAULT_SETTINGS:
        raise ScenarioError(f"unknown setting {key!r}", line)
    if key in ("app", "effect"):
        return raw
    if key == "control":
        if raw in ("0", "off", "none"):
            return None
        lo, _, hi = raw.partition("-")
        try:
            lo_i, hi_i = int(lo), int(hi or lo)
        except ValueError:
            raise ScenarioError(f"control expects <min>-<max>, got {raw!r}", line) from None
        if not 1 <= lo_i <= hi_i:
            raise ScenarioError(f"bad control range {raw!r}", line)
        return (lo_i, hi_i)
    try:
        value = parse_size(raw)
    except ValueError:
        raise ScenarioError(f"{key} expects an integer, got {raw!r}", line) from None
    if value < (0 if key == "seed" else 1):
        raise ScenarioError(f"{key} out of range: {value}", line)
    return value


def parse_size(raw: str) -> int:
    """Integer with optional KiB/MiB/GiB suffix."""
    m = re.fullmatch(r"(\d+)\s*(KiB|MiB|GiB|K|M|G)?", raw.strip())
    if not m:
        raise ValueError(raw)
    mult = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}.get((m.group(2) or " ")[0], 1)
    return int(m.group(1)) * mult


def parse_scenario(text: str, source: str = "<string>") -> ScenarioScript:
    script = ScenarioScript(source=source)
    last_at = 0.0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise ScenarioError(str(exc), lineno) from None
        head, rest = tokens[0], tokens[1:]
        try:
            if head == "set":
                for k, v in _kv(rest, lineno).items():
                    script.settings[k] = _setting(k, v, lineno)
            elif head == "rule":
                _parse_rule(script, line, lineno)
            elif head == "function":
                _parse_function(script, rest, lineno)
            elif head == "at":
                if not rest:
                    raise ScenarioError("'at' needs a time offset", lineno)
                try:
                    at = float(rest[0])
                except ValueError:
                    raise ScenarioError(f"bad time offset {rest[0]!r}", lineno) from None
                if at < last_at:
                    raise ScenarioError(f"time goes backwards ({at} < {last_at})", lineno)
                last_at = at
                script.entries.append(_parse_timed(script, at, rest[1:], lineno))
            else:
                raise ScenarioError(f"unknown directive {head!r}", lineno)
        except (PolicyError, MalformedAddressError) as exc:
            raise ScenarioError(str(exc), lineno) from None
    return script


def load_scenario(path: str | Path) -> ScenarioScript:
    path = Path(path)
    return parse_scenario(path.read_text(), source=str(path))


def _parse_rule(script: ScenarioScript, line: str, lineno: int) -> None:
    m = re.match(r"^rule\s+(\S+)\s+when\s+(.+?)(?:\s+min_dwell=(\S+))?$", line)
    if not m:
        raise ScenarioError("expected 'rule <address> when <predicate>'", lineno)
    address = script.address(m.group(1))
    labels(address)
    dwell = float(m.group(3)) if m.group(3) else 0.0
    script.rules.append(PlacementRule(address, parse_predicate(m.group(2)), min_dwell=dwell))


def _parse_function(script: ScenarioScript, rest: list[str], lineno: int) -> None:
    if not rest:
        raise ScenarioError("function needs an address", lineno)
    address = script.address(rest[0])
    labels(address)
    opts = _kv(rest[1:], lineno)
    comm = tuple(opts.pop("comm", "heap_ref").split(","))
    scope = {"local": Scope.LOCAL_APP, "global": Scope.GLOBAL}.get(opts.pop("scope", "local"))
    if scope is None or opts:
        raise ScenarioError(f"bad function options {rest[1:]}", lineno)
    script.functions[address] = FunctionSpec(address, comm, scope)


def _parse_timed(script: ScenarioScript, at: float, tokens: list[str], lineno: int) -> Entry:
    if not tokens:
        raise ScenarioError("empty timed entry", lineno)
    verb, args = tokens[0], tokens[1:]
    if verb == "context":
        values = {k: parse_literal(v) for k, v in _kv(args, lineno).items()}
        unknown = set(values) - set(SNAPSHOT_FIELDS)
        if unknown:
            raise ScenarioError(f"unknown context fields {sorted(unknown)}", lineno)
        for k in ("network_id", "location_tag"):
            if values.get(k) is not None:
                values[k] = str(values[k])
        values["timestamp"] = at
        return ContextEntry(at, ContextSnapshot.from_fields(**values), lineno)
    if verb == "frames":
        if not args:
            raise ScenarioError("frames needs a count", lineno)
        try:
            count = int(args[0])
        except ValueError:
            raise ScenarioError(f"bad frame count {args[0]!r}", lineno) from None
        opts = {k: _setting(k, v, lineno) for k, v in _kv(args[1:], lineno).items()}
        return FramesEntry(at, count, opts, lineno)
    if verb == "request":
        if not args:
            raise ScenarioError("request needs a target", lineno)
        target = script.target(args[0])
        labels(split_target(target)[0])
        opts = _kv(args[1:], lineno)
        method = opts.pop("method", "POST").upper()
        if method not in METHODS:
            raise ScenarioError(f"unknown method {method!r}", lineno)
        try:
            size, seed, count = (parse_size(opts.pop(k, d)) for k, d in (("size", "0"), ("seed", "0"), ("count", "1")))
        except ValueError:
            raise ScenarioError("size, seed and count must be integers", lineno) from None
        if opts or count < 1:
            raise ScenarioError(f"bad request options {args[1:]}", lineno)
        return RequestEntry(at, target, method, size, seed, count, lineno)
    if verb == "expect":
        if not args:
            raise ScenarioError("expect needs a subject", lineno)
        what, args = args[0], args[1:]
        if what == "placement":
            expected = {}
            for k, v in _kv(args, lineno).items():
                try:
                    expected[script.address(k)] = Placement(v.upper())
                except ValueError:
                    raise ScenarioError(f"placement must be LOCAL or REMOTE, got {v!r}", lineno) from None
            return ExpectPlacement(at, expected, lineno)
        if what == "status":
            if len(args) != 1 or not args[0].isdigit():
                raise ScenarioError("expect status <code>", lineno)
            return ExpectStatus(at, int(args[0]), lineno)
        if what == "actions":
            if args == ["none"]:
                return ExpectActions(at, (), lineno)
            actions = []
            for tok in args:
                m = _ACTION.match(tok)
                if not m:
                    raise ScenarioError(f"expected offloadFunction(x) or initFunction(x), got {tok!r}", lineno)
                kind = OFFLOAD if m.group(1) == OFFLOAD else INIT
                actions.append((kind, script.address(m.group(2))))
            return ExpectActions(at, tuple(actions), lineno)
        if what == "chain" and args == ["ok"]:
            return ExpectChain(at, lineno)
        raise ScenarioError(f"unknown expectation {what!r}", lineno)
    raise ScenarioError(f"unknown timed verb {verb!r}", lineno)
