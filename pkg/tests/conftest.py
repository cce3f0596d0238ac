import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from stagevis.corpus import ingest, read_corpus
from stagevis.index import build_field_indexes

FIXTURES = Path(__file__).parent / "fixtures"
CORPUS = FIXTURES / "corpus.jsonl"
QUERIES = FIXTURES / "queries.jsonl"
SMALL_CORPUS = FIXTURES / "small_corpus.jsonl"
SMALL_QUERIES = FIXTURES / "small_queries.jsonl"


@pytest.fixture(scope="session")
def corpus_docs():
    return read_corpus(CORPUS)


@pytest.fixture(scope="session")
def snapshot(corpus_docs):
    return ingest(corpus_docs)


@pytest.fixture(scope="session")
def index_set(snapshot):
    return build_field_indexes(snapshot)


@pytest.fixture(scope="session")
def small_snapshot():
    return ingest(read_corpus(SMALL_CORPUS))


@pytest.fixture(scope="session")
def small_index(small_snapshot):
    return build_field_indexes(small_snapshot)


class StubServer:
    """Local JSON endpoint; `handler(payload) -> (status, body)` decides the reply."""

    def __init__(self, handler):
        self.handler = handler
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(n))
                stub.requests.append({"payload": payload, "headers": dict(self.headers)})
                status, body = stub.handler(payload)
                data = json.dumps(body).encode() if not isinstance(body, bytes) else body
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}/"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def make(handler):
        s = StubServer(handler).__enter__()
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.__exit__()


# One summary line per acceptance criterion.

_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in _acceptance.items():
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
