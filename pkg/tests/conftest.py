import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class _EchoHandler(BaseHTTPRequestHandler):
    """Tiny stand-in web service: /upper uppercases the body, /fail answers 500."""

    def _serve(self):
        n = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(n)
        if self.path.startswith("/fail"):
            status, out = 500, b"boom"
        else:
            status, out = 200, body.upper()
        self.send_response(status)
        self.send_header("Content-Length", str(len(out)))
        self.send_header("X-Reqid", self.headers.get("X-Reqid", ""))
        self.end_headers()
        self.wfile.write(out)

    do_GET = do_POST = _serve

    def log_message(self, *args):
        pass


@pytest.fixture
def echo_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _EchoHandler)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


@pytest.fixture
def dead_url():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return f"http://127.0.0.1:{port}"


@pytest.fixture(scope="session")
def stub_url():
    from afruntime.harness.service import ServerThread, create_stub_app

    srv = ServerThread(create_stub_app("identity")).start()
    yield srv.url
    srv.stop()


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
