"""Embedded, in-memory, distributed labeled-property-graph engine."""
__version__ = "0.1.0"

from .blocks import NULL_REF, BlockKind, BlockPool, LockMode, LockResult, format_ref
from .database import Database, EngineConfig, app_id_bytes
from .dht import DistributedHashTable
from .errors import (DuplicateAppId, GdiError, LockConflict, NotFoundError, StaleReference,
                     TransactionCritical, TransactionError)
from .gen import GenSpec, generate
from .graph import Edge, EdgeHolder, EdgeUid, Orientation, VertexHolder
from .meta import Datatype, EntityType, Label, PropertyType, SizeType
from .query import Constraint, Subconstraint, has_label, lacks_label, prop
from .rma import World
from .ingest import bulk_load, ingest
from .txn import Kind, Mode, Status, Transaction

__all__ = [
    "NULL_REF", "BlockKind", "BlockPool", "Constraint", "Database", "Datatype",
    "DistributedHashTable", "DuplicateAppId", "Edge", "EdgeHolder", "EdgeUid", "EngineConfig",
    "EntityType", "GdiError", "GenSpec", "Kind", "Label", "LockConflict", "LockMode", "LockResult", "Mode",
    "NotFoundError", "Orientation", "PropertyType", "SizeType", "StaleReference", "Status",
    "Subconstraint", "Transaction", "TransactionCritical", "TransactionError", "VertexHolder",
    "World", "app_id_bytes", "bulk_load", "format_ref", "generate", "has_label", "ingest",
    "lacks_label", "prop",
]
