"""Data model for guideline decision graphs and the primitive mutations on them.

Every stage (chunking, per-chunk expansion, cross-chunk aggregation,
evaluation) speaks in terms of these types. Graphs are mutable,
single-writer values; the canonical JSON form defined here is the
interchange format between stages and is byte-stable, so equal graphs
serialize to equal files.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import (
    EmptyLabelError,
    GraphIntegrityError,
    InvalidMergeError,
    MissingAncestorError,
    MissingNodeError,
)

GRAPH_FORMAT = "decision-graph/1"
CHUNKS_FORMAT = "chunk-list/1"
PROFILE_FORMAT = "guideline-profile/1"

_WS_RUN = re.compile(r"\s+")
_TRAILING_PUNCT = ".,;:"


def normalize_label(raw: str) -> str:
    """Canonicalize a node or edge label.

    Casefolds, collapses whitespace runs to single spaces, strips
    leading/trailing whitespace and trailing sentence punctuation.
    Idempotent by construction.

    Raises:
        EmptyLabelError: if nothing is left after normalization.
    """
    text = _WS_RUN.sub(" ", raw.casefold()).strip()
    text = text.rstrip(_TRAILING_PUNCT).strip()
    if not text:
        raise EmptyLabelError(f"label {raw!r} is empty after normalization")
    return text


def canonical_json(obj: Any, *, compact: bool = False) -> str:
    """Serialize to the canonical JSON form used for files and digests.

    Keys are sorted and non-ASCII text is kept verbatim so that equal
    values always produce equal bytes. The pretty form ends with a
    newline; the compact form is used for content digests.
    """
    if compact:
        return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


class PageLabel(str, Enum):
    CORE = "core"
    AUXILIARY = "auxiliary"


class NodeKind(str, Enum):
    ENTRY = "entry"
    TERMINAL = "terminal"
    INTERMEDIATE = "intermediate"


@dataclass(frozen=True)
class PageRecord:
    """One document page: 1-based index, extracted text, optional image ref."""

    index: int
    text: str
    image_ref: str | None = None

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"page index must be >= 1, got {self.index}")


@dataclass
class GuidelineProfile:
    """Document-level metadata plus the scope context threaded through chunking."""

    metadata: dict[str, str]
    scope_context: str


@dataclass(frozen=True)
class Chunk:
    """One decision segment with its entry/terminal interface."""

    chunk_id: int
    context: str
    entry_labels: tuple[str, ...]
    terminal_labels: tuple[str, ...]
    description: str
    carried_pages: tuple[int, ...]
    page_span: tuple[int, ...]

    def validate(self) -> None:
        if self.chunk_id < 1:
            raise ValueError(f"chunk_id must be >= 1, got {self.chunk_id}")
        if not self.entry_labels or not self.terminal_labels:
            raise ValueError(f"chunk {self.chunk_id}: interface labels must be non-empty")
        if len(set(self.entry_labels)) != len(self.entry_labels):
            raise ValueError(f"chunk {self.chunk_id}: duplicate entry labels")
        if len(set(self.terminal_labels)) != len(self.terminal_labels):
            raise ValueError(f"chunk {self.chunk_id}: duplicate terminal labels")
        overlap = set(self.entry_labels) & set(self.terminal_labels)
        if overlap:
            raise ValueError(f"chunk {self.chunk_id}: entry/terminal overlap {sorted(overlap)}")
        span = set(self.page_span)
        if not set(self.carried_pages) <= span:
            raise ValueError(f"chunk {self.chunk_id}: carried pages outside page span")


@dataclass(frozen=True)
class QueueItem:
    """A node candidate paired with its incoming (ancestor_id, edge_label) context."""

    candidate_label: str
    incoming: tuple[str, str] | None = None


@dataclass(frozen=True)
class DecisionEdge:
    source: str
    label: str
    target: str

    def as_triple(self) -> tuple[str, str, str]:
        return (self.source, self.label, self.target)


@dataclass(frozen=True)
class MergedRef:
    """Provenance record for a node absorbed during a merge."""

    node_id: str
    origin_chunk: int


@dataclass
class DecisionNode:
    node_id: str
    label: str
    kind: NodeKind
    origin_chunk: int
    merged_from: list[MergedRef] = field(default_factory=list)
    provenance_pages: list[int] = field(default_factory=list)
    interface_labels: list[str] = field(default_factory=list)


class DecisionGraph:
    """Directed labeled graph with per-node provenance.

    Edges form a set of (source, label, target) triples; duplicate triples
    carry no information and are never stored twice. Self-loops produced by
    rewiring are suppressed and logged rather than kept.
    """

    def __init__(self) -> None:
        self.nodes: dict[str, DecisionNode] = {}
        self.edges: set[DecisionEdge] = set()
        self.suppressed_self_loops: list[DecisionEdge] = []
        self._id_counters: dict[str, int] = {}

    def add_node(self, node: DecisionNode) -> None:
        if node.node_id in self.nodes:
            raise GraphIntegrityError(f"node id {node.node_id!r} already present")
        self.nodes[node.node_id] = node

    def next_node_id(self, prefix: str) -> str:
        seq = self._id_counters.get(prefix, 0) + 1
        self._id_counters[prefix] = seq
        return f"{prefix}{seq:03d}"

    def label_ids(self, normalized_label: str) -> list[str]:
        """Node ids whose label equals the given normalized label, ascending."""
        return sorted(nid for nid, node in self.nodes.items() if node.label == normalized_label)

    def ancestors_of(self, node_id: str) -> list[tuple[str, str]]:
        """(source_id, edge_label) pairs of edges into node_id, sorted."""
        return sorted((e.source, e.label) for e in self.edges if e.target == node_id)

    def add_edge(self, source: str, label: str, target: str) -> None:
        if source not in self.nodes:
            raise MissingNodeError(f"edge source {source!r} not in graph")
        if target not in self.nodes:
            raise MissingNodeError(f"edge target {target!r} not in graph")
        if source == target:
            raise GraphIntegrityError(f"self-loop on {source!r} not allowed")
        self.edges.add(DecisionEdge(source, label, target))

    def check_integrity(self) -> None:
        for edge in self.edges:
            if edge.source not in self.nodes or edge.target not in self.nodes:
                raise GraphIntegrityError(f"dangling edge {edge.as_triple()}")
            if edge.source == edge.target:
                raise GraphIntegrityError(f"self-loop {edge.as_triple()}")

    def copy(self) -> "DecisionGraph":
        dup = DecisionGraph()
        dup.nodes = {nid: copy.deepcopy(node) for nid, node in self.nodes.items()}
        dup.edges = set(self.edges)
        dup.suppressed_self_loops = list(self.suppressed_self_loops)
        dup._id_counters = dict(self._id_counters)
        return dup


def register_node(
    graph: DecisionGraph,
    item: QueueItem,
    kind: NodeKind,
    *,
    origin_chunk: int = 0,
    provenance_pages: Iterable[int] = (),
    id_prefix: str = "n",
    interface_labels: Iterable[str] = (),
) -> str:
    """Add a fresh node for a queue item; wire the incoming edge if present.

    Returns the new node id.

    Raises:
        MissingAncestorError: the incoming context names an absent ancestor.
        EmptyLabelError: the candidate label normalizes to nothing.
    """
    label = normalize_label(item.candidate_label)
    if item.incoming is not None:
        ancestor, _ = item.incoming
        if ancestor not in graph.nodes:
            raise MissingAncestorError(f"ancestor {ancestor!r} not in graph")
    node_id = graph.next_node_id(id_prefix)
    graph.add_node(
        DecisionNode(
            node_id=node_id,
            label=label,
            kind=kind,
            origin_chunk=origin_chunk,
            provenance_pages=sorted(provenance_pages),
            interface_labels=list(interface_labels),
        )
    )
    if item.incoming is not None:
        ancestor, edge_label = item.incoming
        graph.add_edge(ancestor, normalize_label(edge_label), node_id)
    return node_id


def redirect_ancestor_edge(
    graph: DecisionGraph,
    from_triple: tuple[str, str, str],
    to_triple: tuple[str, str, str],
) -> None:
    """Replace an ancestor edge (a, e, u) with (a, e, u_star).

    The from-edge is removed if it exists (it may name a candidate that was
    never registered, in which case removal is a no-op). Adding the new edge
    is skipped when it would form a self-loop; the suppressed triple is
    logged on the graph. Redirecting onto an already-present triple is a
    no-op beyond the removal, keeping the edge set duplicate-free.

    Raises:
        MissingNodeError: the redirect target is not in the graph.
    """
    source, label, target = to_triple
    if target not in graph.nodes:
        raise MissingNodeError(f"redirect target {target!r} not in graph")
    graph.edges.discard(DecisionEdge(*from_triple))
    if source == target:
        graph.suppressed_self_loops.append(DecisionEdge(source, label, target))
        return
    if source not in graph.nodes:
        raise MissingNodeError(f"redirect source {source!r} not in graph")
    graph.edges.add(DecisionEdge(source, label, target))


def merge_nodes(graph: DecisionGraph, primary: str, secondary: str) -> None:
    """Absorb `secondary` into `primary`, rewiring every incident edge.

    Incoming edges (u, l, secondary) become (u, l, primary) and outgoing
    edges (secondary, l, v) become (primary, l, v); rewires that would form
    self-loops are suppressed and logged. The secondary's provenance
    (pages, interface labels, prior merges) is folded into the primary so
    the merge chain stays auditable. When exactly one of the two nodes is
    terminal the survivor becomes intermediate: it now sits on both sides
    of a transition.

    Raises:
        InvalidMergeError: primary == secondary.
        MissingNodeError: either node is absent (e.g. a replayed merge).
    """
    if primary == secondary:
        raise InvalidMergeError(f"cannot merge {primary!r} with itself")
    if primary not in graph.nodes:
        raise MissingNodeError(f"merge primary {primary!r} not in graph")
    if secondary not in graph.nodes:
        raise MissingNodeError(f"merge secondary {secondary!r} not in graph")

    p_node = graph.nodes[primary]
    s_node = graph.nodes[secondary]

    for edge in sorted(graph.edges, key=DecisionEdge.as_triple):
        if edge.target == secondary:
            redirect_ancestor_edge(graph, edge.as_triple(), (edge.source, edge.label, primary))
        elif edge.source == secondary:
            graph.edges.discard(edge)
            if edge.target == primary:
                graph.suppressed_self_loops.append(DecisionEdge(primary, edge.label, primary))
            else:
                graph.edges.add(DecisionEdge(primary, edge.label, edge.target))

    p_node.merged_from.extend(s_node.merged_from)
    p_node.merged_from.append(MergedRef(secondary, s_node.origin_chunk))
    p_node.provenance_pages = sorted(set(p_node.provenance_pages) | set(s_node.provenance_pages))
    for label in s_node.interface_labels:
        if label not in p_node.interface_labels:
            p_node.interface_labels.append(label)
    if (p_node.kind is NodeKind.TERMINAL) != (s_node.kind is NodeKind.TERMINAL):
        p_node.kind = NodeKind.INTERMEDIATE
    del graph.nodes[secondary]
    graph.check_integrity()


# ---------------------------------------------------------------------------
# Canonical serialization


def graph_to_doc(graph: DecisionGraph) -> dict[str, Any]:
    """Canonical document form: nodes sorted by id, edges by triple."""
    nodes = []
    for node_id in sorted(graph.nodes):
        node = graph.nodes[node_id]
        nodes.append(
            {
                "id": node.node_id,
                "label": node.label,
                "kind": node.kind.value,
                "origin_chunk": node.origin_chunk,
                "merged_from": [
                    {"node_id": ref.node_id, "origin_chunk": ref.origin_chunk}
                    for ref in node.merged_from
                ],
                "provenance_pages": list(node.provenance_pages),
                "interface_labels": list(node.interface_labels),
            }
        )
    edges = [
        {"source": e.source, "label": e.label, "target": e.target}
        for e in sorted(graph.edges, key=DecisionEdge.as_triple)
    ]
    return {"format": GRAPH_FORMAT, "nodes": nodes, "edges": edges}


def graph_from_doc(doc: Mapping[str, Any]) -> DecisionGraph:
    if doc.get("format") != GRAPH_FORMAT:
        raise ValueError(f"unsupported graph format {doc.get('format')!r}")
    graph = DecisionGraph()
    for entry in doc["nodes"]:
        graph.add_node(
            DecisionNode(
                node_id=entry["id"],
                label=entry["label"],
                kind=NodeKind(entry["kind"]),
                origin_chunk=int(entry.get("origin_chunk", 0)),
                merged_from=[
                    MergedRef(ref["node_id"], int(ref["origin_chunk"]))
                    for ref in entry.get("merged_from", [])
                ],
                provenance_pages=[int(p) for p in entry.get("provenance_pages", [])],
                interface_labels=list(entry.get("interface_labels", [])),
            )
        )
    for entry in doc["edges"]:
        graph.add_edge(entry["source"], entry["label"], entry["target"])
    graph.check_integrity()
    return graph


def save_graph(graph: DecisionGraph, path: str | Path) -> None:
    Path(path).write_text(canonical_json(graph_to_doc(graph)), encoding="utf-8")


def load_graph(path: str | Path) -> DecisionGraph:
    return graph_from_doc(json.loads(Path(path).read_text(encoding="utf-8")))


def chunks_to_doc(chunks: Iterable[Chunk]) -> dict[str, Any]:
    return {
        "format": CHUNKS_FORMAT,
        "chunks": [
            {
                "chunk_id": c.chunk_id,
                "description": c.description,
                "context": c.context,
                "entry_labels": list(c.entry_labels),
                "terminal_labels": list(c.terminal_labels),
                "carried_pages": list(c.carried_pages),
                "page_span": list(c.page_span),
            }
            for c in chunks
        ],
    }


def chunks_from_doc(doc: Mapping[str, Any]) -> list[Chunk]:
    if doc.get("format") != CHUNKS_FORMAT:
        raise ValueError(f"unsupported chunk-list format {doc.get('format')!r}")
    out = []
    for entry in doc["chunks"]:
        chunk = Chunk(
            chunk_id=int(entry["chunk_id"]),
            context=entry["context"],
            entry_labels=tuple(entry["entry_labels"]),
            terminal_labels=tuple(entry["terminal_labels"]),
            description=entry["description"],
            carried_pages=tuple(int(p) for p in entry["carried_pages"]),
            page_span=tuple(int(p) for p in entry["page_span"]),
        )
        chunk.validate()
        out.append(chunk)
    return out


def profile_to_doc(profile: GuidelineProfile) -> dict[str, Any]:
    return {
        "format": PROFILE_FORMAT,
        "metadata": dict(sorted(profile.metadata.items())),
        "scope_context": profile.scope_context,
    }


def profile_from_doc(doc: Mapping[str, Any]) -> GuidelineProfile:
    if doc.get("format") != PROFILE_FORMAT:
        raise ValueError(f"unsupported profile format {doc.get('format')!r}")
    return GuidelineProfile(metadata=dict(doc["metadata"]), scope_context=doc["scope_context"])
