import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

FIXTURE_DIR = Path(__file__).resolve().parent / "fixtures"

sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURE_DIR


@pytest.fixture(scope="session")
def golden_fallback() -> dict:
    return json.loads((FIXTURE_DIR / "golden_fallback.json").read_text())


@pytest.fixture(scope="session")
def image_store_path() -> str:
    return str(FIXTURE_DIR / "images.store")


@pytest.fixture(scope="session")
def desc_store_path() -> str:
    return str(FIXTURE_DIR / "descriptions.store")


@pytest.fixture(scope="session")
def catalog_path() -> str:
    return str(FIXTURE_DIR / "catalog.jsonl")


@pytest.fixture(scope="session")
def predictions_path() -> str:
    return str(FIXTURE_DIR / "predictions.jsonl")


@pytest.fixture(scope="session")
def exclude_path() -> str:
    return str(FIXTURE_DIR / "exclude_images.txt")


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="session")
def service_url():
    """Base URL of a running echo-mode reference service.

    Uses RAPSG_BACKEND_URL when set; otherwise starts the sibling service
    package on a free port, or skips if it is not installed.
    """
    import importlib.util
    import os

    url = os.environ.get("RAPSG_BACKEND_URL")
    if url:
        yield url
        return
    if importlib.util.find_spec("rapsg_service") is None:
        pytest.skip("rapsg_service is not installed and RAPSG_BACKEND_URL is unset")
    port = _free_port()
    proc = subprocess.Popen(
        [sys.executable, "-m", "rapsg_service", "--mode", "echo",
         "--host", "127.0.0.1", "--port", str(port)],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    url = f"http://127.0.0.1:{port}"
    try:
        import requests

        deadline = time.monotonic() + 30
        while True:
            try:
                if requests.get(f"{url}/v1/health", timeout=1).status_code == 200:
                    break
            except requests.RequestException:
                pass
            if time.monotonic() > deadline:
                proc.terminate()
                raise RuntimeError("echo service did not come up within 30 s")
            time.sleep(0.1)
        yield url
    finally:
        proc.terminate()
        proc.wait(timeout=10)
