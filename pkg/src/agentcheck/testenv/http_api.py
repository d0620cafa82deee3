"""Local HTTP endpoint exposing ``send_email`` to out-of-process callers."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .environment import Environment
from .faults import RetryableEnvError


def _handler_for(env: Environment):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # keep test output quiet
            pass

        def _reply(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            if self.path.rstrip("/") != "/send_email":
                self._reply(404, {"error": "not found"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                data = json.loads(self.rfile.read(length) or b"{}")
                receipt = env.send_email(
                    data.get("to", ""), data.get("subject", ""), data.get("body", ""),
                    data.get("attachments", ()),
                    **{k: v for k, v in data.items() if k not in ("to", "subject", "body", "attachments")},
                )
            except RetryableEnvError as e:
                self._reply(503, {"status": "RetryableError", "fault": e.fault.value, "message": str(e)})
            except (ValueError, TypeError) as e:
                self._reply(400, {"status": "FatalError", "message": str(e)})
            else:
                self._reply(200, {"status": "Ok", "message_id": receipt.message_id})

    return Handler


class EmailApiServer:
    """``with EmailApiServer(env) as srv: post to srv.url + '/send_email'``."""

    def __init__(self, env: Environment, host: str = "127.0.0.1", port: int = 0) -> None:
        self._server = ThreadingHTTPServer((host, port), _handler_for(env))
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> EmailApiServer:
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> EmailApiServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
