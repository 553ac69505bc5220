"""Context snapshots and the rule-based offload decision engine.

Rules are conjunctions of field comparisons over a snapshot, e.g.::

    network_id = HOME and connected = true
    location_tag = TV-TAG-1 and network_id = HOME and connected = true

Supported operators: ``=`` ``!=`` ``<`` ``<=`` ``>`` ``>=``. Ordering
comparisons against a missing value or a value of another type are false,
so every predicate is total.
"""

from __future__ import annotations

import enum
import logging
import re
import threading
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Iterable, Iterator, Mapping

log = logging.getLogger(__name__)

OFFLOAD = "offloadFunction"
INIT = "initFunction"


class PolicyError(ValueError):
    pass


class Placement(enum.Enum):
    LOCAL = "LOCAL"
    REMOTE = "REMOTE"

    @property
    def other(self) -> "Placement":
        return Placement.REMOTE if self is Placement.LOCAL else Placement.LOCAL


@dataclass(frozen=True)
class Connectivity:
    network_id: str | None = None
    connected: bool = False


@dataclass(frozen=True)
class DeviceState:
    battery_level: float = 100.0
    plugged: bool = False
    cpu_utilization: float = 0.0
    memory_utilization: float = 0.0

    def __post_init__(self):
        if not 0 <= self.battery_level <= 100:
            raise PolicyError(f"battery_level out of range: {self.battery_level}")
        for name in ("cpu_utilization", "memory_utilization"):
            if not 0 <= getattr(self, name) <= 1:
                raise PolicyError(f"{name} out of range: {getattr(self, name)}")


@dataclass(frozen=True)
class ContextSnapshot:
    connectivity: Connectivity = field(default_factory=Connectivity)
    device: DeviceState = field(default_factory=DeviceState)
    location_tag: str | None = None
    timestamp: float = 0.0

    @classmethod
    def from_fields(cls, **values: Any) -> "ContextSnapshot":
        """Build from flat field names (``network_id=...``, ``battery_level=...``)."""
        conn = {k: values.pop(k) for k in _CONN_FIELDS if k in values}
        dev = {k: values.pop(k) for k in _DEVICE_FIELDS if k in values}
        unknown = set(values) - {"location_tag", "timestamp"}
        if unknown:
            raise PolicyError(f"unknown snapshot fields: {sorted(unknown)}")
        return cls(Connectivity(**conn), DeviceState(**dev), **values)

    def get(self, name: str) -> Any:
        name = name.split(".")[-1]
        if name in _CONN_FIELDS:
            return getattr(self.connectivity, name)
        if name in _DEVICE_FIELDS:
            return getattr(self.device, name)
        if name in ("location_tag", "timestamp"):
            return getattr(self, name)
        raise PolicyError(f"unknown snapshot field {name!r}")

    def evolve(self, **values: Any) -> "ContextSnapshot":
        conn = {k: values.pop(k) for k in _CONN_FIELDS if k in values}
        dev = {k: values.pop(k) for k in _DEVICE_FIELDS if k in values}
        return replace(self, connectivity=replace(self.connectivity, **conn),
                       device=replace(self.device, **dev), **values)


_CONN_FIELDS = tuple(f.name for f in fields(Connectivity))
_DEVICE_FIELDS = tuple(f.name for f in fields(DeviceState))
SNAPSHOT_FIELDS = _CONN_FIELDS + _DEVICE_FIELDS + ("location_tag", "timestamp")


# -- predicates ----------------------------------------------------------------

def _eq(a, b):
    return a == b


def _ordered(fn):
    def cmp(a, b):
        if a is None or b is None or isinstance(a, bool) != isinstance(b, bool):
            return False
        try:
            return fn(a, b)
        except TypeError:
            return False
    return cmp


OPERATORS: dict[str, Callable[[Any, Any], bool]] = {
    "=": _eq,
    "==": _eq,
    "!=": lambda a, b: a != b,
    "<": _ordered(lambda a, b: a < b),
    "<=": _ordered(lambda a, b: a <= b),
    ">": _ordered(lambda a, b: a > b),
    ">=": _ordered(lambda a, b: a >= b),
}
_OP_ALIASES = {"≠": "!=", "≥": ">=", "≤": "<="}


def parse_literal(text: str) -> Any:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if low in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


@dataclass(frozen=True)
class Comparison:
    field: str
    op: str
    value: Any

    def __call__(self, snapshot: ContextSnapshot) -> bool:
        return OPERATORS[self.op](snapshot.get(self.field), self.value)

    def __str__(self):
        return f"{self.field} {self.op} {self.value!r}"


@dataclass(frozen=True)
class Predicate:
    """Conjunction of comparisons; the empty conjunction is true."""

    terms: tuple[Comparison, ...] = ()

    def __call__(self, snapshot: ContextSnapshot) -> bool:
        return all(term(snapshot) for term in self.terms)

    def __str__(self):
        return " and ".join(map(str, self.terms)) or "always"


_TOKEN = re.compile(r"""\s*(?:(?P<op>==|!=|>=|<=|=|<|>|≠|≥|≤)|(?P<str>"[^"]*"|'[^']*')|(?P<word>[^\s=!<>≠≥≤]+))""")


def _tokens(text: str) -> Iterator[tuple[str, str]]:
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise PolicyError(f"cannot parse predicate at {text[pos:]!r}")
        pos = m.end()
        kind = m.lastgroup
        yield kind, m.group(kind)


def parse_predicate(text: str) -> Predicate:
    toks = list(_tokens(text))
    if len(toks) == 1 and toks[0][1].lower() in ("always", "true"):
        return Predicate()
    terms = []
    i = 0
    while i < len(toks):
        if i + 3 > len(toks):
            raise PolicyError(f"incomplete comparison in {text!r}")
        (fk, name), (ok, op), (vk, raw) = toks[i:i + 3]
        if fk != "word" or ok != "op" or vk == "op":
            raise PolicyError(f"expected '<field> <op> <value>' in {text!r}")
        if name.split(".")[-1] not in SNAPSHOT_FIELDS:
            raise PolicyError(f"unknown field {name!r}")
        terms.append(Comparison(name.split(".")[-1], _OP_ALIASES.get(op, op), parse_literal(raw)))
        i += 3
        if i < len(toks):
            if toks[i][1].lower() != "and":
                raise PolicyError(f"expected 'and' in {text!r}")
            i += 1
            if i == len(toks):
                raise PolicyError(f"dangling 'and' in {text!r}")
    if not terms:
        raise PolicyError("empty predicate")
    return Predicate(tuple(terms))


# -- rules and tables ------------------------------------------------------------

@dataclass(frozen=True)
class PlacementRule:
    function_address: str
    predicate: Predicate
    placement_if_true: Placement = Placement.REMOTE
    min_dwell: float = 0.0

    @classmethod
    def parse(cls, address: str, text: str, **kw) -> "PlacementRule":
        return cls(address, parse_predicate(text), **kw)

    @property
    def placement_if_false(self) -> Placement:
        return self.placement_if_true.other

    def decide(self, snapshot: ContextSnapshot) -> Placement:
        return self.placement_if_true if self.predicate(snapshot) else self.placement_if_false


class PlacementTable(Mapping[str, Placement]):
    """Immutable address -> placement map; unknown addresses are LOCAL."""

    def __init__(self, entries: Mapping[str, Placement] | Iterable[tuple[str, Placement]] = ()):
        self._entries = dict(entries)

    def __getitem__(self, address: str) -> Placement:
        return self._entries.get(address, Placement.LOCAL)

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, address):
        return True

    def __eq__(self, other):
        if not isinstance(other, PlacementTable):
            return NotImplemented
        keys = set(self._entries) | set(other._entries)
        return all(self[k] is other[k] for k in keys)

    def __hash__(self):
        return hash(frozenset((k, v) for k, v in self._entries.items() if v is not Placement.LOCAL))

    def __repr__(self):
        inner = ", ".join(f"{k}={v.value}" for k, v in sorted(self._entries.items()))
        return f"PlacementTable({inner})"

    def updated(self, address: str, placement: Placement) -> "PlacementTable":
        entries = dict(self._entries)
        entries[address] = placement
        return PlacementTable(entries)


def evaluate(snapshot: ContextSnapshot, rules: Iterable[PlacementRule]) -> PlacementTable:
    return PlacementTable((r.function_address, r.decide(snapshot)) for r in rules)


@dataclass(frozen=True)
class TransitionAction:
    kind: str  # OFFLOAD or INIT
    address: str

    def __str__(self):
        return f"{self.kind}({self.address})"


def on_placement_change(old: PlacementTable, new: PlacementTable) -> list[TransitionAction]:
    actions = []
    for address in sorted(set(old) | set(new)):
        before, after = old[address], new[address]
        if before is after:
            continue
        actions.append(TransitionAction(OFFLOAD if after is Placement.REMOTE else INIT, address))
    return actions


# -- context manager + decision engine ----------------------------------------------

Listener = Callable[[list[TransitionAction]], None]


class OffloadDecisionEngine:
    """Holds the current context and placement table.

    ``ingest`` is serialized: evaluation, table swap and listener
    notification happen under one lock. Snapshots older than the current
    one are ignored.
    """

    def __init__(self, rules: Iterable[PlacementRule] = (), listeners: Iterable[Listener] = ()):
        self.rules = list(rules)
        seen = set()
        for r in self.rules:
            if r.function_address in seen:
                raise PolicyError(f"more than one rule for {r.function_address}")
            seen.add(r.function_address)
        self.current: ContextSnapshot | None = None
        self.table = PlacementTable({r.function_address: Placement.LOCAL for r in self.rules})
        self.history: list[tuple[float, PlacementTable, list[TransitionAction]]] = []
        self._listeners = list(listeners)
        self._last_change: dict[str, float] = {}
        self._lock = threading.RLock()

    def subscribe(self, listener: Listener) -> None:
        self._listeners.append(listener)

    def ingest(self, snapshot: ContextSnapshot) -> list[TransitionAction]:
        with self._lock:
            if self.current is not None and snapshot.timestamp < self.current.timestamp:
                log.debug("ignoring stale snapshot at %s", snapshot.timestamp)
                return []
            self.current = snapshot
            proposed = evaluate(snapshot, self.rules)
            new = self._apply_dwell(proposed, snapshot.timestamp)
            actions = on_placement_change(self.table, new)
            for a in actions:
                self._last_change[a.address] = snapshot.timestamp
            self.table = new
            self.history.append((snapshot.timestamp, new, actions))
            for listener in self._listeners:
                listener(actions)
            return actions

    def _apply_dwell(self, proposed: PlacementTable, now: float) -> PlacementTable:
        table = proposed
        for rule in self.rules:
            addr = rule.function_address
            if not rule.min_dwell or proposed[addr] is self.table[addr]:
                continue
            last = self._last_change.get(addr)
            if last is not None and now - last < rule.min_dwell:
                table = table.updated(addr, self.table[addr])
        return table
