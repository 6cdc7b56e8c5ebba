"""Exception hierarchy shared by every layer of the engine."""


class GdiError(Exception):
    """Base class for all engine errors."""


# --- communication layer -------------------------------------------------

class RmaError(GdiError):
    pass


class RmaBoundsError(RmaError, IndexError):
    pass


class RmaAlignmentError(RmaError):
    pass


class CollectiveError(RmaError):
    """Collective mismatch, timeout (likely deadlock) or an aborted peer."""


# --- storage ----------------------------------------------------------------

class ResourceError(GdiError):
    """A fixed-capacity pool (blocks, hash-table heap, index) is exhausted."""


class BlockError(GdiError):
    """Misuse of the block layer (double release, bad reference, bounds)."""


# --- metadata / query ---------------------------------------------------

class MetadataError(GdiError):
    pass


class DuplicateNameError(MetadataError):
    pass


class NotFoundError(GdiError, LookupError):
    pass


class ConstraintError(GdiError):
    pass


class StaleConstraintError(ConstraintError):
    pass


class DatatypeMismatchError(ConstraintError, TypeError):
    pass


class PropertyValueError(GdiError, ValueError):
    """A value does not fit the datatype, size or entity limits of its type."""


# --- transactions -------------------------------------------------------

class TransactionError(GdiError):
    """Illegal use of a transaction (closed, wrong mode, foreign handle)."""


class TransactionCritical(GdiError):
    """Raised by an operation that dooms its transaction.

    Once raised the transaction is marked failed and a later commit request
    returns an aborted outcome.
    """


class LockConflict(TransactionCritical):
    pass


class StaleReference(TransactionCritical):
    """The referenced vertex/edge was deleted (incarnation changed)."""


class DuplicateAppId(TransactionCritical):
    pass
