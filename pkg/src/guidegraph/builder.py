"""Per-chunk graph expansion: FIFO worklist from the entry labels toward a
fixed terminal set, with duplicate detection against the growing node pool.

Terminal nodes are registered up front and are never created by expansion;
a candidate that matches one is merged into it by redirecting its incoming
edge. The node cap turns a hallucination loop into a diagnosable error.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .core import (
    Chunk,
    DecisionGraph,
    NodeKind,
    QueueItem,
    normalize_label,
    register_node,
    redirect_ancestor_edge,
)
from .errors import (
    EmptyLabelError,
    ExpansionBudgetExceeded,
    GraphIntegrityError,
    OracleProtocolError,
    UsageError,
)
from .oracle import OracleClient, OracleTask
from .retrieval import CandidateSet, EmbeddingStore, cosine_candidates

logger = logging.getLogger(__name__)


@dataclass
class ExpansionState:
    graph: DecisionGraph
    queue: deque[QueueItem]
    expanded_count: int = 0
    cap: int = 200
    trace: list[dict[str, Any]] = field(default_factory=list)


@dataclass
class BuildResult:
    graph: DecisionGraph
    trace: list[dict[str, Any]]


def children_payload(label: str, incoming: tuple[str, str] | None,
                     context: str) -> dict[str, Any]:
    return {
        "node": label,
        "incoming": None if incoming is None else {"ancestor": incoming[0], "edge": incoming[1]},
        "context": context,
    }


def duplicate_payload(candidate_label: str, ancestors: Sequence[tuple[str, str]],
                      candidate_labels: Sequence[str]) -> dict[str, Any]:
    return {
        "candidate": candidate_label,
        "ancestors": [{"label": label, "edge": edge} for label, edge in ancestors],
        "candidates": list(candidate_labels),
    }


def find_duplicate(
    candidate_label: str,
    ancestors: Sequence[tuple[str, str]],
    candidate_set: CandidateSet,
    pool: Mapping[str, str],
    client: OracleClient,
) -> tuple[str | None, float | None, str]:
    """Decide whether a candidate duplicates an existing node.

    `pool` maps every eligible node id to its normalized label. Fast path:
    an exact label match anywhere in the pool wins without an oracle call.
    Otherwise the verifier judges the retrieved candidates; among confirmed
    matches the highest-similarity one wins, ties broken by ascending node
    id. Oracle failure degrades to no-duplicate: keeping structure beats
    silently merging.

    Returns (node_id or None, similarity or None, how).
    """
    for node_id, label in sorted(pool.items()):
        if label == candidate_label:
            return node_id, 1.0, "exact"
    if not candidate_set.entries:
        return None, None, "empty-pool"
    payload = duplicate_payload(
        candidate_label, ancestors,
        [pool[node_id] for node_id, _ in candidate_set.entries],
    )
    try:
        body = client.call(OracleTask.FIND_DUPLICATE, payload)
    except OracleProtocolError:
        logger.warning("duplicate check failed for %r; treating as new", candidate_label)
        return None, None, "error-degraded"
    confirmed = [
        candidate_set.entries[i]
        for i in body["matches"]
        if 0 <= i < len(candidate_set.entries)
    ]
    if not confirmed:
        return None, None, "verifier"
    confirmed.sort(key=lambda entry: (-entry[1], entry[0]))
    node_id, similarity = confirmed[0]
    return node_id, similarity, "verifier"


def generate_children(label: str, incoming: tuple[str, str] | None, context: str,
                      client: OracleClient) -> list[tuple[str, str]]:
    """Successor (label, transition condition) pairs for a registered node.

    Pairs with empty labels are dropped; a node whose expansion never
    validates becomes a logged dead end rather than aborting the chunk.
    """
    try:
        body = client.call(OracleTask.GENERATE_CHILDREN,
                           children_payload(label, incoming, context))
    except OracleProtocolError:
        logger.warning("child generation failed for %r; node becomes a dead end", label)
        return []
    children: list[tuple[str, str]] = []
    for child in body["children"]:
        try:
            children.append((normalize_label(child["label"]),
                             normalize_label(child["edge_label"])))
        except EmptyLabelError:
            logger.warning("dropping child with empty label under %r: %r", label, child)
    return children


def build_graph(chunk: Chunk, client: OracleClient, store: EmbeddingStore,
                config) -> BuildResult:
    """Expand one chunk into its decision graph.

    Terminals come only from the chunk's terminal labels; every non-terminal
    node is reachable from an entry; node ids are assigned in deterministic
    worklist order so repeated runs serialize identically.
    """
    chunk.validate()
    interface_size = len(chunk.entry_labels) + len(chunk.terminal_labels)
    if config.expansion_cap < interface_size:
        raise UsageError(
            f"chunk {chunk.chunk_id}: expansion_cap {config.expansion_cap} is smaller "
            f"than the interface ({interface_size} nodes)"
        )

    prefix = f"c{chunk.chunk_id:02d}n"
    state = ExpansionState(graph=DecisionGraph(), queue=deque(), cap=config.expansion_cap)

    def register(item: QueueItem, kind: NodeKind, interface_label: str | None) -> str:
        if state.expanded_count + 1 > state.cap:
            state.trace.append({"event": "cap", "chunk": chunk.chunk_id,
                                "label": item.candidate_label})
            raise ExpansionBudgetExceeded(
                f"chunk {chunk.chunk_id}: expansion cap {state.cap} reached",
                partial_graph=state.graph,
            )
        node_id = register_node(
            state.graph, item, kind,
            origin_chunk=chunk.chunk_id,
            provenance_pages=chunk.page_span,
            id_prefix=prefix,
            interface_labels=[interface_label] if interface_label else [],
        )
        state.expanded_count += 1
        state.trace.append({"event": "register", "chunk": chunk.chunk_id,
                            "node_id": node_id, "label": item.candidate_label,
                            "kind": kind.value})
        return node_id

    for raw in chunk.terminal_labels:
        label = normalize_label(raw)
        register(QueueItem(label, None), NodeKind.TERMINAL, label)
    for raw in chunk.entry_labels:
        state.queue.append(QueueItem(normalize_label(raw), None))

    while state.queue:
        item = state.queue.popleft()
        label = normalize_label(item.candidate_label)
        pool = {nid: node.label for nid, node in state.graph.nodes.items()}
        candidates = cosine_candidates(label, pool, config.candidate_count, store)
        ancestors = [] if item.incoming is None else [
            (state.graph.nodes[item.incoming[0]].label, item.incoming[1])
        ]
        match_id, similarity, how = find_duplicate(label, ancestors, candidates,
                                                   pool, client)
        if match_id is not None:
            state.trace.append({"event": "duplicate", "chunk": chunk.chunk_id,
                                "label": label, "match": match_id, "how": how,
                                "similarity": None if similarity is None else round(similarity, 6)})
            if item.incoming is not None:
                ancestor, edge_label = item.incoming
                redirect_ancestor_edge(state.graph, (ancestor, edge_label, label),
                                       (ancestor, edge_label, match_id))
            else:
                matched = state.graph.nodes[match_id]
                if label not in matched.interface_labels:
                    matched.interface_labels.append(label)
            continue
        kind = NodeKind.ENTRY if item.incoming is None else NodeKind.INTERMEDIATE
        node_id = register(item, kind, label if item.incoming is None else None)
        children = generate_children(label, item.incoming, chunk.context, client)
        if not children:
            state.trace.append({"event": "dead_end", "chunk": chunk.chunk_id,
                                "node_id": node_id, "label": label})
            logger.warning("chunk %d: non-terminal %r has no successors",
                           chunk.chunk_id, label)
        for child_label, edge_label in children:
            state.queue.append(QueueItem(child_label, (node_id, edge_label)))

    graph = state.graph
    graph.check_integrity()
    _assert_terminal_fixity(chunk, graph)
    _assert_reachability(graph)
    return BuildResult(graph=graph, trace=state.trace)


def _assert_terminal_fixity(chunk: Chunk, graph: DecisionGraph) -> None:
    terminals = {node.label for node in graph.nodes.values()
                 if node.kind is NodeKind.TERMINAL}
    expected = {normalize_label(z) for z in chunk.terminal_labels}
    if terminals != expected:
        raise GraphIntegrityError(
            f"chunk {chunk.chunk_id}: terminal set {sorted(terminals)} != "
            f"interface {sorted(expected)}"
        )


def _assert_reachability(graph: DecisionGraph) -> None:
    frontier = [nid for nid, node in graph.nodes.items() if node.kind is NodeKind.ENTRY]
    seen = set(frontier)
    while frontier:
        current = frontier.pop()
        for edge in graph.edges:
            if edge.source == current and edge.target not in seen:
                seen.add(edge.target)
                frontier.append(edge.target)
    unreachable = [
        nid for nid, node in graph.nodes.items()
        if node.kind is not NodeKind.TERMINAL and nid not in seen
    ]
    if unreachable:
        raise GraphIntegrityError(f"unreachable non-terminal nodes {sorted(unreachable)}")
