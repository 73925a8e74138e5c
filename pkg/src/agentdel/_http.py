"""Minimal JSON-over-HTTP plumbing shared by the provider and verifier services."""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Mapping

log = logging.getLogger(__name__)

Handler = Callable[[dict], Any]

STATUS_BY_CODE = {
    "BadRequest": 400,
    "MalformedEnvelope": 400,
    "InvalidClaims": 400,
    "InvalidPolicy": 400,
    "AuthnFailed": 401,
    "InvalidOwnerToken": 401,
    "BadClientSecret": 401,
    "CallerUnauthenticated": 401,
    "BadSignature": 401,
    "NotOwner": 403,
    "UnknownPeer": 403,
    "UnknownToken": 404,
    "UnknownReferencedToken": 404,
    "NotFound": 404,
    "DuplicateLocalId": 409,
    "PeerKeyFetchFailed": 502,
}


class RemoteError(Exception):
    """An error response from a service, carrying its stable code."""

    def __init__(self, code: str, message: str, status: int) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.status = status


def _make_handler(get_routes: Mapping[str, Callable[[], Any]], post_routes: Mapping[str, Handler]) -> type:
    class _Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args: Any) -> None:
            log.debug("%s %s", self.address_string(), fmt % args)

        def _send(self, status: int, body: Any) -> None:
            data = json.dumps(body, sort_keys=True).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _error(self, exc: BaseException) -> None:
            code = getattr(exc, "code", None)
            if not isinstance(code, str):
                log.exception("unhandled error in %s", self.path)
                self._send(500, {"code": "InternalError", "message": "internal error"})
                return
            self._send(STATUS_BY_CODE.get(code, 400), {"code": code, "message": str(exc)})

        def do_GET(self) -> None:  # noqa: N802
            fn = get_routes.get(self.path)
            if fn is None:
                self._send(404, {"code": "NotFound", "message": f"no route {self.path}"})
                return
            try:
                self._send(200, fn())
            except Exception as exc:  # mapped to {code, message}
                self._error(exc)

        def do_POST(self) -> None:  # noqa: N802
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            fn = post_routes.get(self.path)
            if fn is None:
                self._send(404, {"code": "NotFound", "message": f"no route {self.path}"})
                return
            try:
                body = json.loads(raw or b"{}")
                if not isinstance(body, dict):
                    raise ValueError("request body must be a JSON object")
            except ValueError as exc:
                self._send(400, {"code": "BadRequest", "message": str(exc)})
                return
            try:
                self._send(200, fn(body))
            except KeyError as exc:
                self._send(400, {"code": "BadRequest", "message": f"missing field {exc}"})
            except Exception as exc:  # mapped to {code, message}
                self._error(exc)

    return _Handler


class JsonServer:
    """A ThreadingHTTPServer on a background thread.  Port 0 picks a free port."""

    def __init__(
        self,
        get_routes: Mapping[str, Callable[[], Any]],
        post_routes: Mapping[str, Handler],
        host: str = "127.0.0.1",
        port: int = 0,
    ) -> None:
        self._server = ThreadingHTTPServer((host, port), _make_handler(get_routes, post_routes))
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        host = self._server.server_address[0]
        return f"http://{host}:{self.port}"

    def start(self) -> JsonServer:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> JsonServer:
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


def call(url: str, body: Mapping[str, Any] | None = None, timeout: float = 10.0) -> Any:
    """GET when ``body`` is None, otherwise POST JSON.  Error bodies raise RemoteError."""
    data = None if body is None else json.dumps(body).encode("utf-8")
    req = urllib.request.Request(url, data=data, method="GET" if body is None else "POST")
    if data is not None:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:  # noqa: S310 - caller-supplied service URL
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        try:
            err = json.loads(exc.read().decode("utf-8"))
            raise RemoteError(err.get("code", "HttpError"), err.get("message", ""), exc.code) from None
        except ValueError:
            raise RemoteError("HttpError", str(exc), exc.code) from None
