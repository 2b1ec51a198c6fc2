from __future__ import annotations

import json
import sys
import threading
import time
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from advocate import Advocate, InstanceConfig, ManualClock, generate_keypair

sys.path.insert(0, str(Path(__file__).parent))

SEED_A = bytes(range(32))
SEED_B = bytes(range(1, 33))


@pytest.fixture
def clock() -> ManualClock:
    return ManualClock("2026-01-01T00:00:00Z")


@pytest.fixture
def instance() -> InstanceConfig:
    return InstanceConfig("advocate-test", "1.0.0", "ops@example.org", {"location": "eu-west", "cluster": "k3s"})


@pytest.fixture
def advocate(tmp_path: Path, clock: ManualClock, instance: InstanceConfig) -> Advocate:
    adv = Advocate(tmp_path / "home", clock=clock)
    adv.bootstrap(instance, seed=SEED_A)
    return adv


@pytest.fixture
def publisher():
    return generate_keypair(bytes([7]) * 32)


class StubServer:
    """A local HTTP server whose responses are set per test."""

    def __init__(self, body: object = None) -> None:
        # a callable body is called with the request count
        self.body: object = {"cpu_ms": 12} if body is None else body
        self.status = 200
        self.calls = 0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self) -> None:
                stub.calls += 1
                body = stub.body(stub.calls) if callable(stub.body) else stub.body
                data = body if isinstance(body, bytes) else json.dumps(body).encode()
                self.send_response(stub.status)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args) -> None:
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.server.server_address[1]}/metrics"

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub():
    server = StubServer()
    yield server
    server.close()


@pytest.fixture
def dead_url() -> str:
    """A URL on a port nothing listens on."""
    server = ThreadingHTTPServer(("127.0.0.1", 0), BaseHTTPRequestHandler)
    port = server.server_address[1]
    server.server_close()
    return f"http://127.0.0.1:{port}/metrics"


def http(method: str, url: str, body: object = None, headers: dict | None = None, raw: bytes | None = None):
    """Send one request; return (status, decoded JSON body or None)."""
    import urllib.error
    import urllib.request

    data = raw if raw is not None else (json.dumps(body).encode() if body is not None else None)
    request = urllib.request.Request(url, data=data, method=method, headers=headers or {})
    if data is not None:
        request.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(request, timeout=10) as resp:
            status, payload = resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        status, payload = exc.code, exc.read()
    try:
        return status, json.loads(payload) if payload else None
    except ValueError:
        return status, None


@pytest.fixture
def gateway(advocate):
    from advocate import Gateway

    with Gateway(advocate) as gw:
        yield gw


@pytest.fixture
def peer_pair(tmp_path):
    """Two bootstrapped instances, each serving its API on a free local port."""
    from advocate import Gateway

    made = []
    for name, seed in (("a", SEED_A), ("b", SEED_B)):
        adv = Advocate(tmp_path / name, clock=ManualClock())
        adv.bootstrap(InstanceConfig(f"advocate-{name}", "1.0.0", f"ops-{name}", {}), seed=seed)
        made.append((adv, Gateway(adv).start()))
    yield made
    for _, gw in made:
        gw.stop()


# -- acceptance reporting ---------------------------------------------------

CRITERIA: dict[int, tuple[bool, str, str, float]] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record the outcome of one acceptance criterion; ``note`` entries end up in the summary."""
    note: dict = {}
    start = time.perf_counter()
    try:
        yield note
    except BaseException:
        CRITERIA[number] = (False, title, _render(note), time.perf_counter() - start)
        raise
    CRITERIA[number] = (True, title, _render(note), time.perf_counter() - start)


def _render(note: dict) -> str:
    return ", ".join(f"{k}={v}" for k, v in note.items())


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, title, note, elapsed = CRITERIA[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  [{elapsed:.2f}s]"
        terminalreporter.write_line(line + (f"  {note}" if note else ""))
