"""Local HTTP server exposing :class:`StubBackend` over the client wire protocol."""
from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .clients import ClientError, StubBackend, decode_request


def make_handler(backend: StubBackend):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            try:
                body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                task, media, params, seed = decode_request(body)
                payload, status = backend.handle(task, media, params, seed), 200
            except (ClientError, KeyError, ValueError) as exc:
                payload, status = {"error": str(exc)}, 400
            raw = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def log_message(self, fmt, *args):  # keep test output quiet
            pass

    return Handler


class StubServer:
    """Context manager running the stub backend on ``127.0.0.1:<port>``."""

    def __init__(self, port: int = 0, backend: StubBackend | None = None):
        self.httpd = ThreadingHTTPServer(("127.0.0.1", port), make_handler(backend or StubBackend()))
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/"

    def __enter__(self) -> "StubServer":
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
