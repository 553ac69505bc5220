"""Function catalogue and reverse-FQDN address mapping."""

from __future__ import annotations

import enum
import re
import threading
from dataclasses import dataclass, field
from urllib.parse import urlsplit

_LABEL = re.compile(r"^[A-Za-z0-9](?:[A-Za-z0-9-]*[A-Za-z0-9])?$")


class CatalogueError(Exception):
    pass


class DuplicateAddressError(CatalogueError):
    pass


class UnknownAddressError(CatalogueError, KeyError):
    pass


class MalformedAddressError(CatalogueError, ValueError):
    pass


class Scope(enum.Enum):
    LOCAL_APP = "local"
    GLOBAL = "global"


def labels(address: str) -> list[str]:
    parts = address.split(".")
    if not address or not all(_LABEL.match(p) for p in parts):
        raise MalformedAddressError(f"not a dot-separated address: {address!r}")
    return parts


def split_target(url: str) -> tuple[str, str]:
    """Split a request target into (function address, path/query suffix).

    ``com.example.myapp.process?effect=gray`` -> (``com.example.myapp.process``, ``?effect=gray``)
    """
    cut = min((i for i in (url.find("/"), url.find("?")) if i >= 0), default=len(url))
    return url[:cut], url[cut:]


def reverse_address(address: str) -> str:
    """Label reversal; its own inverse."""
    return ".".join(reversed(labels(address)))


def remote_host(address: str) -> str:
    parts = labels(address)
    if len(parts) < 2:
        raise MalformedAddressError(f"address needs at least two labels: {address!r}")
    return ".".join(reversed(parts))


def address_for_host(host: str) -> str:
    return remote_host(host)


@dataclass
class AddressMapper:
    """Maps function addresses to remote web-service URLs.

    The hostname is always the reversed address; scheme and port are
    configurable and ``overrides`` replaces the whole base URL per address
    (test deployments run the counterpart on arbitrary ports).
    """

    scheme: str = "http"
    port: int | None = None
    overrides: dict[str, str] = field(default_factory=dict)

    def base_url(self, address: str) -> str:
        if address in self.overrides:
            return self.overrides[address].rstrip("/")
        host = remote_host(address)
        default_port = {"http": 80, "https": 443}.get(self.scheme)
        if self.port is not None and self.port != default_port:
            host = f"{host}:{self.port}"
        return f"{self.scheme}://{host}"

    def to_remote_url(self, target: str) -> str:
        address, suffix = split_target(target)
        return self.base_url(address) + suffix

    def to_address(self, url: str) -> str:
        for address, base in self.overrides.items():
            if url.rstrip("/") == base.rstrip("/"):
                return address
        host = urlsplit(url).hostname
        if not host:
            raise MalformedAddressError(f"no host in {url!r}")
        return address_for_host(host)


_default_mapper = AddressMapper()


def to_remote_url(address: str) -> str:
    return _default_mapper.to_remote_url(address)


@dataclass(frozen=True)
class FunctionRecord:
    address: str
    comm_methods: tuple[str, ...] = ("heap_ref",)
    scope: Scope = Scope.LOCAL_APP
    live: bool = True

    def __post_init__(self):
        labels(self.address)
        object.__setattr__(self, "comm_methods", tuple(self.comm_methods))
        if not self.comm_methods:
            raise CatalogueError(f"{self.address}: at least one communication method required")


class Registry:
    """One scope's address -> record map. A GLOBAL registry may be shared."""

    def __init__(self):
        self._records: dict[str, FunctionRecord] = {}
        self.lock = threading.RLock()

    def __contains__(self, address: str) -> bool:
        return address in self._records

    def get(self, address: str) -> FunctionRecord | None:
        return self._records.get(address)

    def add(self, record: FunctionRecord) -> None:
        with self.lock:
            if record.address in self._records:
                raise DuplicateAddressError(f"{record.address} already registered")
            self._records[record.address] = record

    def pop(self, address: str) -> FunctionRecord | None:
        with self.lock:
            return self._records.pop(address, None)

    def records(self) -> list[FunctionRecord]:
        with self.lock:
            return list(self._records.values())


class Catalogue:
    """Intra-app catalogue plus a (possibly shared) global one.

    Lookup prefers the intra-app record when an address exists in both.
    """

    def __init__(self, global_registry: Registry | None = None):
        self.local = Registry()
        self.global_ = global_registry if global_registry is not None else Registry()
        self._lock = threading.RLock()

    def _registry(self, scope: Scope) -> Registry:
        return self.local if scope is Scope.LOCAL_APP else self.global_

    def register(self, record: FunctionRecord) -> None:
        if not record.live:
            raise CatalogueError(f"{record.address}: only live records can be registered")
        self._registry(record.scope).add(record)

    def deregister(self, address: str, scope: Scope | None = None) -> FunctionRecord:
        scopes = [scope] if scope else [Scope.LOCAL_APP, Scope.GLOBAL]
        with self._lock:
            for s in scopes:
                record = self._registry(s).pop(address)
                if record is not None:
                    return record
        raise UnknownAddressError(address)

    def lookup(self, address: str) -> FunctionRecord | None:
        return self.local.get(address) or self.global_.get(address)

    def records(self) -> list[FunctionRecord]:
        return sorted(self.local.records() + self.global_.records(),
                      key=lambda r: (r.address, r.scope.value))


def format_record(record: FunctionRecord) -> str:
    return f"{record.address} {record.scope.value} {','.join(record.comm_methods)}"
