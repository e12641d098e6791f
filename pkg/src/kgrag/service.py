"""JSON-over-HTTP front end for an :class:`~kgrag.engine.Engine`.

Endpoints::

    POST /query      {"text": ..., "context": [prior turns], "k": n}
    POST /events     JSONL body of update events
    GET  /triples/ID triple plus provenance
    GET  /health     {"revision": r, "triple_count": n}

Queries read the engine's current snapshot and never take the writer lock,
so they proceed while events are being applied.
"""
from __future__ import annotations

import json
import logging
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

from .dynamics import EventError, apply_event, parse_events
from .engine import Engine, context_for
from .errors import KGRAGError, StageError

log = logging.getLogger(__name__)

MAX_BODY = 16 * 1024 * 1024


class BadRequest(Exception):
    pass


class KGService:
    """Engine holder; starts unready and becomes ready once ``load`` returns."""

    def __init__(self, load: Callable[[], Engine]):
        self._load = load
        self.engine: Engine | None = None
        self.error: BaseException | None = None
        self.ready = threading.Event()
        self._writer = threading.Lock()

    def start_loading(self, background: bool = True) -> None:
        def run() -> None:
            try:
                self.engine = self._load()
                self.engine.refresh()
            except BaseException as exc:  # reported through /health
                log.exception("store load failed")
                self.error = exc
            finally:
                self.ready.set()

        if background:
            threading.Thread(target=run, name="kgrag-load", daemon=True).start()
        else:
            run()

    def _engine(self) -> Engine:
        if not self.ready.is_set() or self.engine is None:
            raise Unavailable("store is loading" if self.error is None else f"store failed to load: {self.error}")
        return self.engine

    # -- handlers return (status, payload) ----------------------------------------

    def health(self) -> tuple[int, dict[str, Any]]:
        engine = self._engine()
        snap, _ = engine.state()
        return 200, {"status": "ok", "revision": snap.revision, "triple_count": len(snap)}

    def triple(self, tid: str) -> tuple[int, dict[str, Any]]:
        snap, _ = self._engine().state()
        t = snap.get(tid)
        if t is None:
            return 404, {"error": f"unknown triple {tid}"}
        return 200, {"id": t.id, "live": t.live, **t.to_record(with_superseded=True)}

    def query(self, body: Any) -> tuple[int, dict[str, Any]]:
        engine = self._engine()
        if not isinstance(body, dict) or not isinstance(body.get("text"), str) or not body["text"].strip():
            raise BadRequest("body must be an object with a non-empty 'text'")
        turns = body.get("context") or []
        if not isinstance(turns, list) or not all(isinstance(x, str) for x in turns):
            raise BadRequest("'context' must be a list of strings")
        k = body.get("k")
        if k is not None and (not isinstance(k, int) or k < 1):
            raise BadRequest("'k' must be a positive integer")
        bundle = engine.answer(body["text"], context_for(engine, turns) if turns else None, k)
        return 200, bundle.to_dict(with_latency=False)

    def events(self, raw: str) -> tuple[int, dict[str, Any]]:
        engine = self._engine()
        try:
            events = parse_events(raw.splitlines(), "<request>")
        except EventError as exc:
            raise BadRequest(str(exc)) from None
        summaries = []
        with self._writer:
            for e in events:
                try:
                    summary, _ = apply_event(engine.kg, None, e)
                except EventError as exc:
                    engine.refresh()
                    return 400, {"error": str(exc), "applied": summaries, "revision": engine.revision}
                summaries.append(summary.to_dict())
            engine.refresh()
        return 200, {"applied": summaries, "revision": engine.revision}


class Unavailable(Exception):
    pass


def _handler_for(service: KGService) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        server_version = "kgrag"
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args: Any) -> None:
            log.info("%s %s", self.address_string(), fmt % args)

        def _send(self, status: int, payload: dict[str, Any]) -> None:
            data = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> str:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                raise BadRequest("request body too large")
            try:
                return self.rfile.read(length).decode("utf-8")
            except UnicodeDecodeError:
                raise BadRequest("body is not UTF-8") from None

        def _dispatch(self, fn: Callable[[], tuple[int, dict[str, Any]]]) -> None:
            try:
                status, payload = fn()
            except BadRequest as exc:
                status, payload = 400, {"error": str(exc)}
            except Unavailable as exc:
                status, payload = 503, {"error": str(exc)}
            except StageError as exc:
                status, payload = 500, {"error": str(exc.cause), "stage": exc.stage}
            except KGRAGError as exc:
                status, payload = 500, {"error": str(exc)}
            self._send(status, payload)

        def do_GET(self) -> None:
            path = self.path.split("?", 1)[0]
            if path == "/health":
                self._dispatch(service.health)
            elif path.startswith("/triples/") and len(path) > len("/triples/"):
                self._dispatch(lambda: service.triple(path[len("/triples/"):]))
            else:
                self._send(404, {"error": f"no route {path}"})

        def do_POST(self) -> None:
            path = self.path.split("?", 1)[0]
            if path == "/query":
                def run() -> tuple[int, dict[str, Any]]:
                    try:
                        body = json.loads(self._body() or "null")
                    except json.JSONDecodeError as exc:
                        raise BadRequest(f"malformed JSON: {exc.msg}") from None
                    return service.query(body)

                self._dispatch(run)
            elif path == "/events":
                self._dispatch(lambda: service.events(self._body()))
            else:
                self._body()
                self._send(404, {"error": f"no route {path}"})

    return Handler


def make_server(service: KGService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), _handler_for(service))
    server.daemon_threads = True
    return server


def serve(service: KGService, host: str, port: int) -> None:
    server = make_server(service, host, port)
    service.start_loading()
    log.info("listening on http://%s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
