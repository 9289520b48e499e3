"""Chunk generation: profile extraction, page classification, run partitioning,
boundary-predicted buffering, and chunk finalization with interface refinement.

Pages are classified independently (and may be classified concurrently);
the buffering loop is strictly sequential within a run because the running
context threads from one chunk to the next. The context resets to the
profile scope at each run start.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Sequence

from .core import Chunk, GuidelineProfile, PageLabel, PageRecord, normalize_label
from .errors import (
    ChunkInterfaceError,
    EmptyLabelError,
    FixtureMissingError,
    OracleProtocolError,
    ProfileError,
)
from .oracle import OracleClient, OracleTask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Run:
    """A maximal consecutive run of core page indices."""

    page_indices: tuple[int, ...]


@dataclass
class ChunkBuffer:
    """Pages accumulated for the chunk under construction, plus running memory."""

    pages: list[PageRecord]
    running_context: str
    lookahead: PageRecord | None = None

    def text(self) -> str:
        return "\n".join(p.text for p in self.pages)

    def indices(self) -> list[int]:
        return [p.index for p in self.pages]


def _page_payload(page: PageRecord) -> dict[str, Any]:
    payload: dict[str, Any] = {"index": page.index, "text": page.text}
    if page.image_ref is not None:
        payload["image_ref"] = page.image_ref
    return payload


def profile_payload(pages: Sequence[PageRecord]) -> dict[str, Any]:
    return {"pages": [_page_payload(p) for p in pages]}


def classify_payload(page: PageRecord, profile: GuidelineProfile) -> dict[str, Any]:
    return {"page": _page_payload(page), "metadata": dict(sorted(profile.metadata.items()))}


def boundary_payload(buffer: ChunkBuffer, current: PageRecord,
                     lookahead: PageRecord | None, budget: int) -> dict[str, Any]:
    return {
        "buffer": [_page_payload(p) for p in buffer.pages],
        "current": _page_payload(current),
        "lookahead": _page_payload(lookahead) if lookahead is not None else None,
        "context": buffer.running_context,
        "budget": budget,
    }


def build_payload(buffer: ChunkBuffer, lookahead: PageRecord | None) -> dict[str, Any]:
    return {
        "pages": [_page_payload(p) for p in buffer.pages],
        "lookahead": _page_payload(lookahead) if lookahead is not None else None,
        "context": buffer.running_context,
    }


def refine_payload(buffer: ChunkBuffer, description: str, entry: Sequence[str],
                   terminal: Sequence[str]) -> dict[str, Any]:
    return {
        "pages": [_page_payload(p) for p in buffer.pages],
        "description": description,
        "entry_labels": list(entry),
        "terminal_labels": list(terminal),
    }


def extract_profile(pages: Sequence[PageRecord], client: OracleClient) -> GuidelineProfile:
    """Derive the document profile from the header pages."""
    if not pages:
        raise ProfileError("no header pages available for profile extraction")
    try:
        body = client.call(OracleTask.EXTRACT_PROFILE, profile_payload(pages))
    except FixtureMissingError:
        raise
    except OracleProtocolError as exc:
        raise ProfileError(f"profile extraction failed: {exc}") from exc
    scope = body["scope_context"].strip()
    if not scope:
        raise ProfileError("profile extraction returned an empty scope context")
    return GuidelineProfile(metadata=dict(body["metadata"]), scope_context=scope)


def classify_pages(pages: Sequence[PageRecord], profile: GuidelineProfile,
                   client: OracleClient, parallelism: int = 1) -> list[PageLabel]:
    """Label every page core/auxiliary; order-aligned with the input.

    A page whose classification never validates defaults to auxiliary:
    dropping a page loses recall but never fabricates decision content.
    """

    def classify(page: PageRecord) -> PageLabel:
        try:
            body = client.call(OracleTask.CLASSIFY_PAGE, classify_payload(page, profile))
        except OracleProtocolError:
            logger.warning("page %d: classification failed; defaulting to auxiliary",
                           page.index)
            return PageLabel.AUXILIARY
        return PageLabel(body["label"])

    if not pages:
        return []
    if parallelism <= 1:
        return [classify(p) for p in pages]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(classify, pages))


def contiguous_runs(core_indices: Sequence[int]) -> list[Run]:
    """Partition sorted, duplicate-free indices into maximal consecutive runs."""
    runs: list[Run] = []
    current: list[int] = []
    for index in core_indices:
        if current and index != current[-1] + 1:
            runs.append(Run(tuple(current)))
            current = []
        current.append(index)
    if current:
        runs.append(Run(tuple(current)))
    return runs


def predict_boundary(buffer: ChunkBuffer, current: PageRecord,
                     lookahead: PageRecord | None, budget: int,
                     client: OracleClient) -> bool:
    """Decide whether the current page should end the chunk.

    A hard override returns True whenever adding the current page would push
    the buffer text past twice the soft budget, without consulting the
    oracle: the budget is advisory, the cap is not. An oracle that never
    produces a valid reply also cuts, bounding chunk growth.
    """
    if len(buffer.text()) + len(current.text) > 2 * budget:
        logger.warning("page %d: hard budget override, cutting chunk", current.index)
        return True
    try:
        body = client.call(OracleTask.PREDICT_BOUNDARY,
                           boundary_payload(buffer, current, lookahead, budget))
    except OracleProtocolError:
        logger.warning("page %d: boundary prediction failed; cutting chunk", current.index)
        return True
    return bool(body["cut"])


@dataclass(frozen=True)
class BuildOutcome:
    description: str
    entry_labels: tuple[str, ...]
    terminal_labels: tuple[str, ...]
    carry_pages: tuple[int, ...]
    updated_context: str


def build_chunk(buffer: ChunkBuffer, lookahead: PageRecord | None,
                client: OracleClient) -> BuildOutcome:
    """Summarize the buffered pages into description, interface, and carry set.

    An empty entry or terminal list triggers exactly one re-request with an
    explicit complaint before giving up.
    """
    if not buffer.pages:
        raise ChunkInterfaceError("cannot build a chunk from an empty buffer")
    payload = build_payload(buffer, lookahead)
    body = client.call(OracleTask.BUILD_CHUNK, payload)
    if not body["entry_labels"] or not body["terminal_labels"]:
        retry_payload = dict(payload)
        retry_payload["complaint"] = "entry_labels and terminal_labels must be non-empty"
        body = client.call(OracleTask.BUILD_CHUNK, retry_payload)
        if not body["entry_labels"] or not body["terminal_labels"]:
            raise ChunkInterfaceError(
                f"pages {buffer.indices()}: empty chunk interface after re-request"
            )
    valid_indices = set(buffer.indices())
    carry = []
    for page in body["carry_pages"]:
        if page in valid_indices:
            carry.append(page)
        else:
            logger.warning("carry page %d outside buffer %s; dropped", page, buffer.indices())
    return BuildOutcome(
        description=body["description"],
        entry_labels=tuple(body["entry_labels"]),
        terminal_labels=tuple(body["terminal_labels"]),
        carry_pages=tuple(carry),
        updated_context=body["updated_context"],
    )


def _supported(label: str, originals: set[str], buffer_text: str) -> bool:
    # A label survives if it appears verbatim in the buffer or the oracle
    # confirmed it by returning a label from the original interface.
    return label in buffer_text or label in originals


def refine_nodes(buffer: ChunkBuffer, description: str, entry: Sequence[str],
                 terminal: Sequence[str], client: OracleClient,
                 ) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Normalize, dedup, and support-check the chunk interface labels.

    The oracle returns the labels it confirms; anything it invents that has
    no verbatim support in the buffer is dropped. The refined interface
    must stay non-empty and disjoint.
    """
    body = client.call(OracleTask.REFINE_NODES,
                       refine_payload(buffer, description, entry, terminal))
    buffer_text = normalize_label(buffer.text()) if buffer.text().strip() else ""

    def clean(raw_labels: Sequence[str], originals: Sequence[str]) -> tuple[str, ...]:
        normalized_originals = set()
        for raw in originals:
            try:
                normalized_originals.add(normalize_label(raw))
            except EmptyLabelError:
                continue
        out: list[str] = []
        for raw in raw_labels:
            try:
                label = normalize_label(raw)
            except EmptyLabelError:
                logger.warning("dropping empty interface label %r", raw)
                continue
            if label in out:
                continue
            if not _supported(label, normalized_originals, buffer_text):
                logger.warning("dropping unsupported interface label %r", label)
                continue
            out.append(label)
        return tuple(out)

    refined_entry = clean(body["entry_labels"], entry)
    refined_terminal = clean(body["terminal_labels"], terminal)
    if not refined_entry or not refined_terminal:
        raise ChunkInterfaceError(
            f"pages {buffer.indices()}: refinement emptied the chunk interface"
        )
    overlap = set(refined_entry) & set(refined_terminal)
    if overlap:
        raise ChunkInterfaceError(
            f"pages {buffer.indices()}: entry/terminal overlap {sorted(overlap)}"
        )
    return refined_entry, refined_terminal


def assemble_context(profile: GuidelineProfile, description: str,
                     pages: Sequence[PageRecord], memory: str) -> str:
    lines = ["[guideline]"]
    lines.extend(f"{key}: {value}" for key, value in sorted(profile.metadata.items()))
    lines.append(f"[segment] {description}")
    for page in pages:
        lines.append(f"[page {page.index}]")
        lines.append(page.text)
    lines.append(f"[memory] {memory}")
    return "\n".join(lines)


@dataclass
class ChunkingResult:
    profile: GuidelineProfile
    page_labels: list[PageLabel]
    chunks: list[Chunk]


def run_chunking(pages: Sequence[PageRecord], config, client: OracleClient) -> ChunkingResult:
    """Run the whole chunking stage over a page-ordered document.

    Chunks come out ordered by first page. Carry-forward pages from one
    chunk seed the next buffer within the same run; the running context
    threads across chunks within a run and resets per run.
    """
    header = list(pages[: config.header_pages])
    profile = extract_profile(header, client)
    labels = classify_pages(pages, profile, client, parallelism=config.parallelism)
    core_indices = [p.index for p, label in zip(pages, labels) if label is PageLabel.CORE]
    runs = contiguous_runs(core_indices)
    by_index = {p.index: p for p in pages}

    chunks: list[Chunk] = []
    chunk_id = 0
    for run in runs:
        buffer = ChunkBuffer(pages=[], running_context=profile.scope_context)
        for position, index in enumerate(run.page_indices):
            current = by_index[index]
            last = position == len(run.page_indices) - 1
            lookahead = None if last else by_index[run.page_indices[position + 1]]
            buffer.lookahead = lookahead
            cut = predict_boundary(buffer, current, lookahead, config.chunk_budget, client)
            buffer.pages.append(current)
            if cut or last:
                chunk_id += 1
                outcome = build_chunk(buffer, lookahead, client)
                entry, terminal = refine_nodes(
                    buffer, outcome.description, outcome.entry_labels,
                    outcome.terminal_labels, client,
                )
                context = assemble_context(profile, outcome.description, buffer.pages,
                                           outcome.updated_context)
                chunk = Chunk(
                    chunk_id=chunk_id,
                    context=context,
                    entry_labels=entry,
                    terminal_labels=terminal,
                    description=outcome.description,
                    carried_pages=outcome.carry_pages,
                    page_span=tuple(buffer.indices()),
                )
                chunk.validate()
                chunks.append(chunk)
                carried = set(outcome.carry_pages)
                buffer = ChunkBuffer(
                    pages=[p for p in buffer.pages if p.index in carried],
                    running_context=outcome.updated_context,
                )
    return ChunkingResult(profile=profile, page_labels=list(labels), chunks=chunks)
