"""In-process HTTP stub speaking the embedding wire protocol.

Backs the remote-client tests without any model or external service. Failure
modes (temporary 503s, wrong dimensions, load-in-progress health) are
switchable per test.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from corpusforge.embedding import EmbedderSpec, HashingEmbedder


class EmbedStub:
    def __init__(self, dim: int = 64, seed: int = 0, max_batch: int = 128):
        self.embedder = HashingEmbedder(EmbedderSpec(dim=dim, hash_seed=seed))
        self.dim = dim
        self.max_batch = max_batch
        self.fail_remaining = 0
        self.wrong_dim = False
        self.loading = False
        self.requests_seen = 0

        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, code: int, payload: dict):
                raw = json.dumps(payload).encode("utf-8")
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def do_GET(self):
                if self.path != "/health":
                    self._send(404, {"error": "not found"})
                    return
                if stub.loading:
                    self._send(503, {"status": "loading"})
                    return
                self._send(200, {"status": "ok", "dim": stub.dim, "model": "hashing-stub"})

            def do_POST(self):
                if self.path != "/embed":
                    self._send(404, {"error": "not found"})
                    return
                stub.requests_seen += 1
                if stub.loading:
                    self._send(503, {"status": "loading"})
                    return
                if stub.fail_remaining > 0:
                    stub.fail_remaining -= 1
                    self._send(503, {"error": "transient"})
                    return
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length).decode("utf-8"))
                texts = body.get("texts")
                if not isinstance(texts, list) or not texts:
                    self._send(400, {"error": "texts must be a non-empty list"})
                    return
                if len(texts) > stub.max_batch:
                    self._send(413, {"error": f"batch over limit {stub.max_batch}"})
                    return
                vectors = stub.embedder.embed([str(t) for t in texts])
                dim = stub.dim
                if stub.wrong_dim:
                    vectors = vectors[:, :-1]
                    dim -= 1
                self._send(200, {"vectors": vectors.tolist(), "dim": dim})

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
