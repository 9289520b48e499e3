"""Exception types shared across the pipeline."""
from __future__ import annotations


class GuidegraphError(Exception):
    """Base class for all pipeline errors."""


class EmptyLabelError(GuidegraphError):
    """A label normalized to the empty string."""


class MissingAncestorError(GuidegraphError):
    """A queue item referenced an ancestor node id that is not in the graph."""


class MissingNodeError(GuidegraphError):
    """An operation referenced a node id that is not in the graph."""


class InvalidMergeError(GuidegraphError):
    """merge_nodes was asked to merge a node with itself."""


class GraphIntegrityError(GuidegraphError):
    """A graph violated referential integrity or the no-self-loop rule."""


class IdCollisionError(GuidegraphError):
    """Two input graphs shared a node id during union."""


class InterfaceResolutionError(GuidegraphError):
    """A chunk interface label could not be resolved to a node in the union."""


class OracleError(GuidegraphError):
    """Base class for oracle backend failures."""


class OracleTransportError(OracleError):
    """The backend could not be reached or the transport failed."""


class OracleProtocolError(OracleError):
    """The backend reply never validated against the task schema."""


class FixtureMissingError(OracleProtocolError):
    """The scripted backend had no fixture for the request digest."""


class EmbeddingError(GuidegraphError):
    """An embedding was rejected (zero norm or dimension mismatch)."""


class ProfileError(GuidegraphError):
    """Guideline profile extraction produced no usable scope context."""


class ChunkInterfaceError(GuidegraphError):
    """A chunk's entry/terminal interface ended up empty or overlapping."""


class ExpansionBudgetExceeded(GuidegraphError):
    """Chunk expansion hit the node cap; carries the partial graph."""

    def __init__(self, message: str, partial_graph=None):
        super().__init__(message)
        self.partial_graph = partial_graph


class ManifestError(GuidegraphError):
    """The page manifest was malformed or referenced unusable pages."""


class UsageError(GuidegraphError):
    """Invalid configuration or command usage."""
