"""Runtime for mobile application functions that run locally or on a remote service.

Functions are addressed by reverse-FQDN names, talk over a local bus backed
by an application-layer heap, and are moved between local and remote
execution by context-driven placement rules.
"""

from .catalogue import AddressMapper, Catalogue, FunctionRecord, Registry, Scope
from .engine import FunctionHandle, Runtime
from .heap import ContiguousHeap, HeapExhaustedError
from .messaging import Message, PayloadRef, new_request, new_response
from .policy import ContextSnapshot, OffloadDecisionEngine, Placement, PlacementRule

__version__ = "0.1.0"

__all__ = [
    "AddressMapper", "Catalogue", "FunctionRecord", "Registry", "Scope",
    "FunctionHandle", "Runtime",
    "ContiguousHeap", "HeapExhaustedError",
    "Message", "PayloadRef", "new_request", "new_response",
    "ContextSnapshot", "OffloadDecisionEngine", "Placement", "PlacementRule",
]
