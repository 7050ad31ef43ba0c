"""Single-instance scoring, shared by the offline ``score`` command and the
HTTP endpoint so both produce bit-identical probabilities."""

from __future__ import annotations

import json
import threading
import time
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .checkpoint import load_checkpoint
from .data import ApprovalInstance, ValidationError, instance_from_dict, validate_instance

MAX_BODY_BYTES = 1 << 20


class Scorer:
    """Frozen model in eval mode.  Every instance is encoded and scored on its
    own (batch of one), so results never depend on batch composition."""

    def __init__(self, model, store, threshold: float = 0.5):
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        self.model = model
        self.store = store
        self.threshold = float(threshold)
        self.model_hash = model.config_hash()

    @classmethod
    def from_checkpoint(cls, path, threshold: float = 0.5) -> "Scorer":
        model, store, _ = load_checkpoint(path)
        return cls(model, store, threshold)

    def validate(self, inst: ApprovalInstance) -> None:
        validate_instance(inst, self.model.schema, require_label=False, allow_oov=True)

    def prob_pass(self, inst: ApprovalInstance) -> float:
        batch = self.model.encode([inst])
        return float(self.model.predict_proba(self.store, batch)[0])

    def score(self, inst: ApprovalInstance) -> dict:
        p = self.prob_pass(inst)
        return {"prob_pass": p, "decision": "pass" if p >= self.threshold else "fail"}


class _Counters:
    def __init__(self):
        self._lock = threading.Lock()
        self.requests = 0
        self.errors = 0

    def bump(self, ok: bool) -> None:
        with self._lock:
            self.requests += 1
            if not ok:
                self.errors += 1


def _make_handler(scorer: Scorer, counters: _Counters):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "rmia-score/0.1"

        def log_message(self, fmt, *args):  # payloads are never logged
            pass

        def _send(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
            counters.bump(status < 400)

        def _error(self, status: int, message: str, field: str | None = None) -> None:
            body = {"error": message}
            if field is not None:
                body["field"] = field
            self._send(status, body)

        def do_GET(self):
            if self.path == "/health":
                self._send(200, {"status": "ok", "model_hash": scorer.model_hash, "threshold": scorer.threshold})
            else:
                self._error(404, f"no route for GET {self.path}")

        def do_POST(self):
            if self.path != "/score":
                self._drain()
                return self._error(404, f"no route for POST {self.path}")
            ctype = self.headers.get("Content-Type", "")
            if ctype.split(";")[0].strip().lower() != "application/json":
                self._drain()
                return self._error(HTTPStatus.UNSUPPORTED_MEDIA_TYPE, "content type must be application/json")
            try:
                length = int(self.headers.get("Content-Length", ""))
            except ValueError:
                self.close_connection = True
                return self._error(HTTPStatus.LENGTH_REQUIRED, "Content-Length required")
            if length > MAX_BODY_BYTES:
                self.close_connection = True
                return self._error(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, f"body exceeds {MAX_BODY_BYTES} bytes")
            raw = self.rfile.read(length)
            t0 = time.perf_counter()
            try:
                obj = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                return self._error(400, f"malformed JSON: {exc}")
            try:
                inst = instance_from_dict(obj)
                scorer.validate(inst)
            except ValidationError as exc:
                return self._error(400, exc.reason, exc.field)
            except (TypeError, ValueError) as exc:
                return self._error(400, f"invalid instance: {exc}")
            out = scorer.score(inst)
            out["model_hash"] = scorer.model_hash
            out["latency_ms"] = (time.perf_counter() - t0) * 1000.0
            self._send(200, out)

        def _drain(self):
            try:
                length = int(self.headers.get("Content-Length", "0"))
            except ValueError:
                length = 0
            if 0 < length <= MAX_BODY_BYTES:
                self.rfile.read(length)
            elif length:
                self.close_connection = True

    return Handler


class ScoringServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, scorer: Scorer):
        self.scorer = scorer
        self.counters = _Counters()
        super().__init__(address, _make_handler(scorer, self.counters))


def serve(checkpoint, host: str = "127.0.0.1", port: int = 8080, threshold: float = 0.5) -> ScoringServer:
    """Build a server; the caller runs ``serve_forever``."""
    return ScoringServer((host, port), Scorer.from_checkpoint(checkpoint, threshold))
