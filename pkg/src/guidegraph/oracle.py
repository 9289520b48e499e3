"""Uniform interface to every prompted model judgment in the pipeline.

Seven task types cover the call sites of the three pipeline stages. Each
task has a response schema; free text from a backend is never interpreted
positionally. Backends are pluggable: a live OpenAI-compatible chat
endpoint, or a deterministic scripted backend that replays fixture files
keyed by a content digest of the canonicalized payload. Every dispatch is
appended to an audit log.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import requests

from .core import canonical_json
from .errors import FixtureMissingError, OracleProtocolError, OracleTransportError

logger = logging.getLogger(__name__)

FIXTURES_FORMAT = "oracle-fixtures/1"


class OracleTask(str, Enum):
    EXTRACT_PROFILE = "extract_profile"
    CLASSIFY_PAGE = "classify_page"
    PREDICT_BOUNDARY = "predict_boundary"
    BUILD_CHUNK = "build_chunk"
    REFINE_NODES = "refine_nodes"
    FIND_DUPLICATE = "find_duplicate"
    GENERATE_CHILDREN = "generate_children"


@dataclass(frozen=True)
class OracleRequest:
    task: OracleTask
    payload: dict[str, Any]
    request_id: str


@dataclass(frozen=True)
class OracleResponse:
    request_id: str
    body: dict[str, Any]
    raw: str


_REQUIRED_PAYLOAD_KEYS: dict[OracleTask, tuple[str, ...]] = {
    OracleTask.EXTRACT_PROFILE: ("pages",),
    OracleTask.CLASSIFY_PAGE: ("page", "metadata"),
    OracleTask.PREDICT_BOUNDARY: ("buffer", "current", "context", "budget"),
    OracleTask.BUILD_CHUNK: ("pages", "context"),
    OracleTask.REFINE_NODES: ("pages", "description", "entry_labels", "terminal_labels"),
    OracleTask.FIND_DUPLICATE: ("candidate", "ancestors", "candidates"),
    OracleTask.GENERATE_CHILDREN: ("node", "context"),
}


def validate_payload(task: OracleTask, payload: Mapping[str, Any]) -> None:
    missing = [key for key in _REQUIRED_PAYLOAD_KEYS[task] if key not in payload]
    if missing:
        raise OracleProtocolError(f"{task.value} payload missing keys {missing}")


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise OracleProtocolError(message)


def _str_list(value: Any, what: str) -> None:
    _require(isinstance(value, list) and all(isinstance(x, str) for x in value),
             f"{what} must be a list of strings")


def validate_response(task: OracleTask, body: Any) -> None:
    """Check a parsed backend reply against the task's response schema."""
    _require(isinstance(body, dict), f"{task.value} response must be a JSON object")
    if task is OracleTask.EXTRACT_PROFILE:
        meta = body.get("metadata")
        _require(isinstance(meta, dict) and all(
            isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
        ), "metadata must map strings to strings")
        _require(isinstance(body.get("scope_context"), str), "scope_context must be a string")
    elif task is OracleTask.CLASSIFY_PAGE:
        _require(body.get("label") in ("core", "auxiliary"),
                 "label must be 'core' or 'auxiliary'")
    elif task is OracleTask.PREDICT_BOUNDARY:
        _require(isinstance(body.get("cut"), bool), "cut must be a boolean")
    elif task is OracleTask.BUILD_CHUNK:
        _require(isinstance(body.get("description"), str), "description must be a string")
        _str_list(body.get("entry_labels"), "entry_labels")
        _str_list(body.get("terminal_labels"), "terminal_labels")
        carry = body.get("carry_pages")
        _require(isinstance(carry, list) and all(isinstance(p, int) for p in carry),
                 "carry_pages must be a list of integers")
        _require(isinstance(body.get("updated_context"), str),
                 "updated_context must be a string")
    elif task is OracleTask.REFINE_NODES:
        _str_list(body.get("entry_labels"), "entry_labels")
        _str_list(body.get("terminal_labels"), "terminal_labels")
    elif task is OracleTask.FIND_DUPLICATE:
        matches = body.get("matches")
        _require(isinstance(matches, list) and all(
            isinstance(i, int) and not isinstance(i, bool) for i in matches
        ), "matches must be a list of integer candidate indices")
    elif task is OracleTask.GENERATE_CHILDREN:
        children = body.get("children")
        _require(isinstance(children, list), "children must be a list")
        for child in children:
            _require(
                isinstance(child, dict)
                and isinstance(child.get("label"), str)
                and isinstance(child.get("edge_label"), str),
                "each child must carry string 'label' and 'edge_label'",
            )


def payload_digest(task: OracleTask, payload: Mapping[str, Any]) -> str:
    blob = canonical_json({"task": task.value, "payload": payload}, compact=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class AuditLog:
    """Append-only, internally synchronized log of oracle traffic.

    One record per dispatch call. When a path is configured, records are
    also written as line-delimited JSON.
    """

    def __init__(self, path: str | Path | None = None,
                 clock: Callable[[], str] | None = None) -> None:
        self._path = Path(path) if path is not None else None
        self._clock = clock or (lambda: datetime.now(timezone.utc).isoformat())
        self._lock = threading.Lock()
        self.entries: list[dict[str, Any]] = []

    def append(self, request: OracleRequest, outcome: str) -> None:
        record = {
            "ts": self._clock(),
            "request_id": request.request_id,
            "task": request.task.value,
            "payload_digest": payload_digest(request.task, request.payload),
            "outcome": outcome,
        }
        with self._lock:
            self.entries.append(record)
            if self._path is not None:
                with self._path.open("a", encoding="utf-8") as handle:
                    handle.write(canonical_json(record, compact=True) + "\n")

    def __len__(self) -> int:
        return len(self.entries)


class Backend(Protocol):
    name: str

    def complete(self, request: OracleRequest) -> str:
        """Return the raw backend reply for a request."""


@dataclass
class FixtureEntry:
    key_digest: str
    payload_summary: str
    response_body: Any


class FixtureSet:
    """Fixture responses keyed by content digest of (task, payload)."""

    def __init__(self) -> None:
        self._entries: dict[OracleTask, dict[str, FixtureEntry]] = {t: {} for t in OracleTask}

    def add(self, task: OracleTask, payload: Mapping[str, Any], response_body: Any,
            summary: str = "") -> None:
        digest = payload_digest(task, payload)
        self._entries[task][digest] = FixtureEntry(digest, summary, response_body)

    def lookup_raw(self, task: OracleTask, payload: Mapping[str, Any]) -> str:
        digest = payload_digest(task, payload)
        entry = self._entries[task].get(digest)
        if entry is None:
            raise FixtureMissingError(f"no fixture for {task.value} digest {digest[:12]}…")
        if isinstance(entry.response_body, str):
            return entry.response_body
        return json.dumps(entry.response_body, sort_keys=True, ensure_ascii=False)

    def count(self) -> int:
        return sum(len(v) for v in self._entries.values())

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for task, entries in self._entries.items():
            if not entries:
                continue
            doc = {
                "format": FIXTURES_FORMAT,
                "task": task.value,
                "entries": [
                    {
                        "key_digest": e.key_digest,
                        "payload_summary": e.payload_summary,
                        "response_body": e.response_body,
                    }
                    for _, e in sorted(entries.items())
                ],
            }
            (directory / f"{task.value}.json").write_text(
                canonical_json(doc), encoding="utf-8"
            )

    @classmethod
    def load(cls, directory: str | Path) -> "FixtureSet":
        fixtures = cls()
        directory = Path(directory)
        for path in sorted(directory.glob("*.json")):
            doc = json.loads(path.read_text(encoding="utf-8"))
            if doc.get("format") != FIXTURES_FORMAT:
                raise OracleProtocolError(f"{path.name}: unsupported fixture format")
            task = OracleTask(doc["task"])
            for entry in doc["entries"]:
                fixtures._entries[task][entry["key_digest"]] = FixtureEntry(
                    entry["key_digest"], entry.get("payload_summary", ""),
                    entry["response_body"],
                )
        return fixtures


class ScriptedBackend:
    """Deterministic backend that replays fixture responses.

    Identical payloads yield identical replies; a missing fixture raises
    immediately, since retrying a deterministic lookup cannot succeed.
    """

    name = "scripted"

    def __init__(self, fixtures: FixtureSet) -> None:
        self._fixtures = fixtures

    def complete(self, request: OracleRequest) -> str:
        return self._fixtures.lookup_raw(request.task, request.payload)


def scripted_lookup(request: OracleRequest, fixtures: FixtureSet) -> OracleResponse:
    """Resolve a request against a fixture set and validate the reply."""
    raw = fixtures.lookup_raw(request.task, request.payload)
    try:
        body = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise OracleProtocolError(f"fixture for {request.task.value} is not JSON: {exc}") from exc
    validate_response(request.task, body)
    return OracleResponse(request.request_id, body, raw)


_SYSTEM_PROMPTS: dict[OracleTask, str] = {
    OracleTask.EXTRACT_PROFILE: (
        "You extract a guideline profile from document header pages. Reply with a JSON "
        "object {\"metadata\": {string: string}, \"scope_context\": string} where "
        "scope_context summarizes the covered population and clinical focus."
    ),
    OracleTask.CLASSIFY_PAGE: (
        "You classify one guideline page. Core pages carry actionable decision content "
        "(algorithms, criteria, recommendations, flowcharts); auxiliary pages carry "
        "references, author lists, or administrative text. Reply with a JSON object "
        "{\"label\": \"core\"|\"auxiliary\"}."
    ),
    OracleTask.PREDICT_BOUNDARY: (
        "You decide whether the current page should end the chunk being buffered, "
        "respecting the soft length budget and never splitting multi-page tables or "
        "figures (use the lookahead page). Reply with {\"cut\": true|false}."
    ),
    OracleTask.BUILD_CHUNK: (
        "You summarize a buffered run of guideline pages into a chunk. Reply with "
        "{\"description\": string, \"entry_labels\": [string], \"terminal_labels\": "
        "[string], \"carry_pages\": [int], \"updated_context\": string}."
    ),
    OracleTask.REFINE_NODES: (
        "You refine chunk interface labels: keep only labels supported by the page "
        "text, verbatim or as a faithful paraphrase. Reply with {\"entry_labels\": "
        "[string], \"terminal_labels\": [string]}."
    ),
    OracleTask.FIND_DUPLICATE: (
        "You judge whether the candidate clinical state is semantically equivalent "
        "to any listed existing node, given its ancestor context. Reply with "
        "{\"matches\": [int]} listing the indices of equivalent candidates (empty "
        "list if none)."
    ),
    OracleTask.GENERATE_CHILDREN: (
        "You generate the clinically valid successor states of a node from the chunk "
        "context. Reply with {\"children\": [{\"label\": string, \"edge_label\": "
        "string}]} where edge_label is the transition condition (empty list if the "
        "node has no successors)."
    ),
}


class LiveBackend:
    """OpenAI-compatible chat-completions backend with JSON-object forcing."""

    def __init__(self, base_url: str, model: str, auth_token: str | None = None,
                 timeout: float = 60.0, session: requests.Session | None = None) -> None:
        self.name = f"live:{model}"
        self._url = base_url.rstrip("/") + "/chat/completions"
        self._model = model
        self._token = auth_token
        self._timeout = timeout
        self._session = session or requests.Session()

    def complete(self, request: OracleRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        body = {
            "model": self._model,
            "temperature": 0,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": _SYSTEM_PROMPTS[request.task]},
                {"role": "user", "content": canonical_json(request.payload, compact=True)},
            ],
        }
        try:
            resp = self._session.post(self._url, json=body, headers=headers,
                                      timeout=self._timeout)
            resp.raise_for_status()
            data = resp.json()
            return data["choices"][0]["message"]["content"]
        except requests.RequestException as exc:
            raise OracleTransportError(f"chat completion failed: {exc}") from exc
        except (KeyError, IndexError, ValueError) as exc:
            raise OracleProtocolError(f"malformed completion envelope: {exc}") from exc


def dispatch(request: OracleRequest, backend: Backend, *, retry_limit: int = 3,
             audit: AuditLog | None = None) -> OracleResponse:
    """Send a request, validating the reply and retrying malformed output.

    Each retry re-sends the payload with the accumulated validation errors
    attached, so a live model can correct itself. Exactly one audit record
    is written per dispatch call, whatever the outcome.

    Raises:
        OracleTransportError: the backend could not be reached.
        OracleProtocolError: no schema-valid reply within the retry limit.
    """
    errors: list[str] = []
    try:
        validate_payload(request.task, request.payload)
        for _ in range(max(1, retry_limit)):
            attempt = request
            if errors:
                payload = dict(request.payload)
                payload["validation_errors"] = list(errors)
                attempt = OracleRequest(request.task, payload, request.request_id)
            raw = backend.complete(attempt)
            try:
                body = json.loads(raw)
            except json.JSONDecodeError as exc:
                errors.append(f"reply is not valid JSON: {exc}")
                continue
            try:
                validate_response(request.task, body)
            except OracleProtocolError as exc:
                errors.append(str(exc))
                continue
            if audit is not None:
                audit.append(request, "ok")
            return OracleResponse(request.request_id, body, raw)
        raise OracleProtocolError(
            f"{request.task.value}: no schema-valid reply after {retry_limit} attempts: {errors}"
        )
    except OracleTransportError:
        if audit is not None:
            audit.append(request, "transport_error")
        raise
    except OracleProtocolError:
        if audit is not None:
            audit.append(request, "protocol_error")
        raise


class OracleClient:
    """Bundles a backend with audit logging, retries, and request ids.

    Request ids are sequential, so runs against the scripted backend are
    fully reproducible. Safe for concurrent use.
    """

    def __init__(self, backend: Backend, *, audit: AuditLog | None = None,
                 retry_limit: int = 3) -> None:
        self.backend = backend
        self.audit = audit if audit is not None else AuditLog()
        self.retry_limit = retry_limit
        self._counter = 0
        self._lock = threading.Lock()

    def _next_id(self) -> str:
        with self._lock:
            self._counter += 1
            return f"req-{self._counter:06d}"

    def call(self, task: OracleTask, payload: dict[str, Any]) -> dict[str, Any]:
        request = OracleRequest(task, payload, self._next_id())
        response = dispatch(request, self.backend, retry_limit=self.retry_limit,
                            audit=self.audit)
        return response.body
