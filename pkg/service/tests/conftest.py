import json
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from rapsg_service.app import ServiceConfig, create_app

REPO_ROOT = Path(__file__).resolve().parents[2]
GOLDEN_PATH = REPO_ROOT / "tests" / "fixtures" / "golden_fallback.json"
FIXTURE_DIR = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture(scope="session")
def client() -> TestClient:
    return TestClient(create_app(ServiceConfig(mode="echo")))


@pytest.fixture(scope="session")
def golden() -> dict:
    return json.loads(GOLDEN_PATH.read_text())


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURE_DIR
