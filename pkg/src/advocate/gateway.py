"""HTTP API: claim publishing, verification, anchors and peer management.

Routes::

    POST /v1/claims                  publish (201 / 400 / 403)
    GET  /v1/claims/{id}             full claim JSON (200 / 404)
    GET  /v1/claims/{id}/verify      verification report (200 / 404)
    GET  /v1/self-claim              (200)
    GET  /v1/anchors?since_height=N  anchor receipts (200)
    GET  /v1/revocations             revocation records (200)
    POST /v1/peers                   pin a peer (201 / 502)
    POST /v1/peers/{id}/sync         pull from a peer (200 / 502)
    GET  /v1/healthz                 (200)

Errors carry ``{"error": <code>, "message": <text>}``.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from .cas import ContentHash
from .engine import Advocate, PublishRejected
from .errors import (
    AdvocateError,
    IntegrityViolation,
    MalformedClaim,
    NotBootstrapped,
    NotFound,
    PeerIdentityChanged,
    SyncFailed,
    UnknownPeer,
)

log = logging.getLogger(__name__)

KEY_HEADER = "X-Advocate-Key-Id"
MAX_BODY = 1 << 20


class _HTTPError(Exception):
    def __init__(self, status: int, code: str, message: str) -> None:
        super().__init__(message)
        self.status = status
        self.code = code


def _claim_id(text: str) -> ContentHash:
    try:
        return ContentHash.parse(urllib.parse.unquote(text))
    except ValueError:
        raise _HTTPError(404, "NotFound", f"no claim {text!r}") from None


class Handler(BaseHTTPRequestHandler):
    server: GatewayServer
    protocol_version = "HTTP/1.1"

    def log_message(self, format: str, *args: Any) -> None:
        log.debug("%s - %s", self.address_string(), format % args)

    @property
    def advocate(self) -> Advocate:
        return self.server.advocate

    def _send(self, status: int, body: Any) -> None:
        data = json.dumps(body, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> Any:
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            raise _HTTPError(400, "BadRequest", "bad Content-Length") from None
        if length < 0 or length > MAX_BODY:
            raise _HTTPError(400, "BadRequest", "body too large")
        raw = self.rfile.read(length)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            raise _HTTPError(400, "BadRequest", "body is not JSON") from None

    def _dispatch(self, method: str) -> None:
        url = urllib.parse.urlsplit(self.path)
        parts = [p for p in url.path.split("/") if p]
        query = urllib.parse.parse_qs(url.query)
        try:
            if parts[:1] != ["v1"]:
                raise _HTTPError(404, "NotFound", f"no route {url.path}")
            status, body = self._route(method, parts[1:], query)
        except _HTTPError as exc:
            status, body = exc.status, {"error": exc.code, "message": str(exc)}
        except PublishRejected as exc:
            status, body = exc.status, {"error": exc.code, "message": str(exc)}
        except (NotFound, UnknownPeer) as exc:
            status, body = 404, {"error": exc.code, "message": str(exc)}
        except NotBootstrapped as exc:
            status, body = 503, {"error": exc.code, "message": str(exc)}
        except PeerIdentityChanged as exc:
            status, body = 409, {"error": exc.code, "message": str(exc)}
        except SyncFailed as exc:
            status, body = 502, {"error": exc.code, "message": str(exc)}
        except (IntegrityViolation, MalformedClaim) as exc:
            status, body = 500, {"error": exc.code, "message": str(exc)}
        except AdvocateError as exc:
            status, body = 400, {"error": exc.code, "message": str(exc)}
        except Exception as exc:  # keep the server up; report and move on
            log.exception("unhandled error for %s %s", method, self.path)
            status, body = 500, {"error": type(exc).__name__, "message": str(exc)}
        self._send(status, body)

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")

    def _route(self, method: str, parts: list[str], query: dict) -> tuple[int, Any]:
        adv = self.advocate
        route = tuple(parts)
        if route == ("claims",):
            self._allow(method, "POST")
            return self.handle_publish()
        if len(route) == 2 and route[0] == "claims":
            self._allow(method, "GET")
            return 200, adv.store.load_claim(_claim_id(route[1])).to_json()
        if len(route) == 3 and route[0] == "claims" and route[2] == "verify":
            self._allow(method, "GET")
            return 200, adv.verify(_claim_id(route[1])).to_json()
        if route == ("self-claim",):
            self._allow(method, "GET")
            return 200, adv.self_claim().to_json()
        if route == ("anchors",):
            self._allow(method, "GET")
            raw = query.get("since_height", ["0"])[-1]
            if not raw.isdigit():
                raise _HTTPError(400, "BadRequest", "since_height must be a non-negative integer")
            return 200, [r.to_json() for r in adv.ledger.receipts(int(raw))]
        if route == ("revocations",):
            self._allow(method, "GET")
            return 200, [{"hash_hex": r.hash.hex(), "revoked_at": r.revoked_at} for r in adv.ledger.revocations()]
        if route == ("peers",):
            self._allow(method, "POST")
            body = self._body()
            if not isinstance(body, dict) or not isinstance(body.get("peer_url"), str):
                raise _HTTPError(400, "BadRequest", "body must be {peer_url}")
            return 201, adv.peers.add(body["peer_url"]).summary()
        if len(route) == 3 and route[0] == "peers" and route[2] == "sync":
            self._allow(method, "POST")
            return 200, adv.peers.sync(route[1]).to_json()
        if route == ("healthz",):
            self._allow(method, "GET")
            adv.ledger.refresh()
            return 200, {"status": "ok", "height": adv.ledger.height}
        raise _HTTPError(404, "NotFound", f"no route /v1/{'/'.join(parts)}")

    def _allow(self, method: str, expected: str) -> None:
        if method != expected:
            raise _HTTPError(405, "MethodNotAllowed", f"use {expected}")

    def handle_publish(self) -> tuple[int, Any]:
        body = self._body()
        claim = self.advocate.publish(self.headers.get(KEY_HEADER), body)
        return 201, {"id": str(claim.id)}


class GatewayServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, advocate: Advocate, address: tuple[str, int]) -> None:
        super().__init__(address, Handler)
        self.advocate = advocate


class Gateway:
    """Runs the HTTP API on a background thread.

    >>> with Gateway(advocate, port=0) as gw:   # doctest: +SKIP
    ...     print(gw.url)
    """

    def __init__(self, advocate: Advocate, host: str = "127.0.0.1", port: int = 0) -> None:
        self.server = GatewayServer(advocate, (host, port))
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> Gateway:
        self._thread = threading.Thread(
            target=self.server.serve_forever, kwargs={"poll_interval": 0.05}, name="advocate-gateway", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> Gateway:
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()
