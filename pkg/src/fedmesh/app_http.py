"""Loopback HTTP adapter for the app contract.

``AppHttpServer`` exposes an :class:`~fedmesh.app_engine.App` through the
literal endpoints ``POST /setup``, ``GET /status``, ``GET /data`` and
``POST /data?client=<id>``. ``HttpApp`` is the matching client so the
controller can drive an app living behind such a server.

Input/output directories and the step config are bound when the server is
created; ``POST /setup`` only carries ``id``, ``master`` and ``clients``.
"""

from __future__ import annotations

import json
import threading
import urllib.error
import urllib.parse
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from .app_engine import App, AppError, ContractError, SetupInfo, StatusReport


class AppHttpServer:
    def __init__(self, app: App, input_dir, output_dir, config: Optional[dict] = None, host="127.0.0.1", port=0):
        self.app = app
        self.input_dir = Path(input_dir)
        self.output_dir = Path(output_dir)
        self.config = config or {}
        self.httpd = ThreadingHTTPServer((host, port), self._handler())
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "AppHttpServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _handler(self):
        adapter = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def _reply(self, code: int, body: bytes, ctype: str = "application/json") -> None:
                self.send_response(code)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _error(self, code: int, exc: Exception) -> None:
                self._reply(code, json.dumps({"error": f"{type(exc).__name__}: {exc}"}).encode())

            def _body(self) -> bytes:
                n = int(self.headers.get("Content-Length") or 0)
                return self.rfile.read(n)

            def do_GET(self):
                path = urllib.parse.urlsplit(self.path).path
                try:
                    if path == "/status":
                        st = adapter.app.status()
                        body = {"available": st.available, "finished": st.finished}
                        if st.size is not None:
                            body["size"] = st.size
                        self._reply(200, json.dumps(body).encode())
                    elif path == "/data":
                        self._reply(200, adapter.app.fetch_outgoing(), "application/octet-stream")
                    else:
                        self._reply(404, b"{}")
                except ContractError as exc:
                    self._error(409, exc)
                except AppError as exc:
                    self._error(500, exc)

            def do_POST(self):
                parts = urllib.parse.urlsplit(self.path)
                try:
                    if parts.path == "/setup":
                        req = json.loads(self._body() or b"{}")
                        info = SetupInfo(str(req["id"]), bool(req["master"]), [str(c) for c in req["clients"]])
                        adapter.app.setup(info, adapter.input_dir, adapter.output_dir, adapter.config)
                        self._reply(200, b"{}")
                    elif parts.path == "/data":
                        query = urllib.parse.parse_qs(parts.query)
                        sender = query.get("client", [None])[0]
                        adapter.app.deliver_incoming(self._body(), sender)
                        self._reply(200, b"{}")
                    else:
                        self._reply(404, b"{}")
                except (KeyError, ValueError) as exc:
                    self._error(400, exc)
                except ContractError as exc:
                    self._error(409, exc)
                except AppError as exc:
                    self._error(500, exc)

        return Handler


class HttpApp(App):
    """Drive an app served by :class:`AppHttpServer` (or any server speaking
    the same four endpoints)."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _request(self, method: str, path: str, body: Optional[bytes] = None) -> bytes:
        req = urllib.request.Request(self.base_url + path, data=body, method=method)
        if body is not None:
            req.add_header("Content-Type", "application/octet-stream")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode(errors="replace")
            if exc.code == 409:
                raise ContractError(detail) from None
            raise AppError(f"HTTP {exc.code}: {detail}") from None

    def setup(self, info: SetupInfo, input_dir=None, output_dir=None, config=None) -> None:
        body = json.dumps({"id": info.id, "master": info.master, "clients": info.clients}).encode()
        self._request("POST", "/setup", body)

    def status(self) -> StatusReport:
        got = json.loads(self._request("GET", "/status"))
        return StatusReport(bool(got["available"]), bool(got["finished"]), got.get("size"))

    def fetch_outgoing(self) -> bytes:
        return self._request("GET", "/data")

    def deliver_incoming(self, data: bytes, sender: Optional[str] = None) -> None:
        path = "/data" if sender is None else "/data?" + urllib.parse.urlencode({"client": sender})
        self._request("POST", path, bytes(data))
