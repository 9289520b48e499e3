from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import FIXTURE_DIR, GOLDEN_DIR, SYNTHETIC_DIR

from guidegraph.oracle import AuditLog, FixtureSet, OracleClient, ScriptedBackend
from guidegraph.retrieval import EmbeddingStore, HashingEmbeddingBackend


@pytest.fixture(scope="session")
def synthetic_manifest() -> Path:
    return SYNTHETIC_DIR / "manifest.json"


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURE_DIR


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return GOLDEN_DIR


@pytest.fixture()
def scripted_client() -> OracleClient:
    fixtures = FixtureSet.load(FIXTURE_DIR)
    return OracleClient(ScriptedBackend(fixtures), audit=AuditLog())


@pytest.fixture()
def hashing_store() -> EmbeddingStore:
    return EmbeddingStore(HashingEmbeddingBackend())


def make_client(backend) -> OracleClient:
    return OracleClient(backend, audit=AuditLog())
