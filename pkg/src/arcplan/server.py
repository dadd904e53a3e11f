"""Interactive replan HTTP service.

JSON over stdlib HTTP.  One plan session per ``POST /api/session`` (the
baseline dose freezes there, and every later replan steers against it);
at most one replan runs per session at a time, concurrent requests are
rejected busy with a retry hint rather than queued.  GET endpoints serve the
latest accepted revision.  Anything outside ``/api`` is served from the
static asset directory so the browser client can live beside the API.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .config import PipelineSettings, settings_from_entries, settings_to_text
from .pipeline import PlanSession, ReplanOutput

logger = logging.getLogger(__name__)

S_CONTROL_MAX = 0.2
BUSY_RETRY_MS = 750

_CONTENT_TYPES = {
    ".html": "text/html", ".js": "text/javascript", ".mjs": "text/javascript",
    ".css": "text/css", ".png": "image/png", ".svg": "image/svg+xml",
    ".json": "application/json", ".map": "application/json", ".ico": "image/x-icon",
}


@dataclass
class SessionEntry:
    session: PlanSession
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    def __init__(self, base_settings: PipelineSettings):
        self.base_settings = base_settings
        self._sessions: dict[str, SessionEntry] = {}
        self._counter = 0
        self._lock = threading.Lock()

    def create(self, config_overrides: dict[str, str] | None) -> tuple[str, SessionEntry]:
        entries = {}
        for line in settings_to_text(self.base_settings).splitlines():
            key, _, val = line.partition("=")
            entries[key.strip()] = val.strip()
        if config_overrides:
            entries.update({str(k): str(v) for k, v in config_overrides.items()})
        settings = settings_from_entries(entries)
        session = PlanSession(settings)
        session.replan()  # revision 0: the zero-control baseline plan
        with self._lock:
            self._counter += 1
            sid = f"s{self._counter:04d}"
            entry = SessionEntry(session=session)
            self._sessions[sid] = entry
        return sid, entry

    def get(self, sid: str) -> SessionEntry | None:
        with self._lock:
            return self._sessions.get(sid)


def _dvh_payload(out: ReplanOutput) -> dict:
    return {
        name: {
            "edges": curve.edges.tolist(),
            "volume_fraction": curve.volume_fraction.tolist(),
        }
        for name, curve in out.dvh_curves.items()
    }


def _replan_payload(sid: str, session: PlanSession) -> dict:
    out = session.latest
    return {
        "session_id": sid,
        "revision": out.revision,
        "controls": out.controls,
        "prescription_dose": session.prescription,
        "metrics": out.metrics.structures,
        "dvh": _dvh_payload(out),
        "n_cp": out.plan.n_cp,
        "timings_ms": [[name, sec * 1000.0] for name, sec in out.timings.entries],
        "objective_trace": list(out.result.objective_trace),
    }


class _ApiError(Exception):
    def __init__(self, status: int, payload: dict):
        super().__init__(payload.get("error", "error"))
        self.status = status
        self.payload = payload


def _validate_controls(body: dict) -> dict:
    allowed = {"s_bladder", "s_rectum", "lambda_plus", "lambda_minus", "iters"}
    unknown = set(body) - allowed
    if unknown:
        raise _ApiError(400, {"error": "unknown field", "field": sorted(unknown)[0]})
    out = {}
    for name in ("s_bladder", "s_rectum"):
        if name in body and body[name] is not None:
            try:
                v = float(body[name])
            except (TypeError, ValueError):
                raise _ApiError(400, {"error": "not a number", "field": name})
            if not 0.0 <= v <= S_CONTROL_MAX:
                raise _ApiError(
                    400, {"error": f"value out of range [0, {S_CONTROL_MAX}]", "field": name}
                )
            out[name] = v
    for name in ("lambda_plus", "lambda_minus"):
        if name in body and body[name] is not None:
            try:
                out[name] = float(body[name])
            except (TypeError, ValueError):
                raise _ApiError(400, {"error": "not a number", "field": name})
    if "iters" in body and body["iters"] is not None:
        try:
            out["iters"] = int(body["iters"])
        except (TypeError, ValueError):
            raise _ApiError(400, {"error": "not an integer", "field": "iters"})
        if out["iters"] < 1:
            raise _ApiError(400, {"error": "must be >= 1", "field": "iters"})
    return out


class ReplanHandler(BaseHTTPRequestHandler):
    store: SessionStore = None  # injected by make_server
    static_dir: Path | None = None

    # -- plumbing ---------------------------------------------------------
    def log_message(self, fmt, *args):
        logger.debug("%s - %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, payload: dict):
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise _ApiError(400, {"error": "body is not valid JSON"})
        if not isinstance(body, dict):
            raise _ApiError(400, {"error": "body must be a JSON object"})
        return body

    def _entry(self, sid: str) -> SessionEntry:
        entry = self.store.get(sid)
        if entry is None:
            raise _ApiError(404, {"error": "unknown session", "session_id": sid})
        return entry

    # -- routes -----------------------------------------------------------
    def do_POST(self):
        try:
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            if parts == ["api", "session"]:
                body = self._read_body()
                overrides = body.get("config") or {}
                if not isinstance(overrides, dict):
                    raise _ApiError(400, {"error": "config must be an object", "field": "config"})
                sid, entry = self.store.create(overrides)
                self._send_json(200, _replan_payload(sid, entry.session))
            elif len(parts) == 4 and parts[:2] == ["api", "session"] and parts[3] == "replan":
                entry = self._entry(parts[2])
                controls = _validate_controls(self._read_body())
                if not entry.lock.acquire(blocking=False):
                    raise _ApiError(
                        409,
                        {"error": "busy", "detail": "replan already in flight",
                         "retry_after_ms": BUSY_RETRY_MS},
                    )
                try:
                    entry.session.replan(**controls)
                finally:
                    entry.lock.release()
                self._send_json(200, _replan_payload(parts[2], entry.session))
            else:
                raise _ApiError(404, {"error": "no such endpoint", "path": self.path})
        except _ApiError as exc:
            self._send_json(exc.status, exc.payload)
        except Exception as exc:  # pragma: no cover - defensive
            logger.exception("request failed")
            self._send_json(500, {"error": f"internal error: {exc}"})

    def do_GET(self):
        try:
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            if len(parts) >= 3 and parts[:2] == ["api", "session"]:
                entry = self._entry(parts[2])
                out = entry.session.latest
                tail = parts[3:]
                if tail == ["metrics"]:
                    self._send_json(200, _replan_payload(parts[2], entry.session))
                elif tail == ["dvh"]:
                    self._send_json(
                        200, {"revision": out.revision, "dvh": _dvh_payload(out)}
                    )
                elif len(tail) == 2 and tail[0] == "fluence":
                    cp = int(tail[1])
                    if not 0 <= cp < out.plan.n_cp:
                        raise _ApiError(404, {"error": "control point out of range", "cp": cp})
                    ap = out.plan.apertures[cp]
                    self._send_json(200, {
                        "revision": out.revision,
                        "cp": cp,
                        "gantry": float(out.plan.gantry_angles[cp]),
                        "values": out.result.fluence.values[cp].tolist(),
                        "spacing": out.plan.spacing,
                        "left": ap.left.tolist(),
                        "right": ap.right.tolist(),
                        "mu": float(ap.mu),
                    })
                else:
                    raise _ApiError(404, {"error": "no such endpoint", "path": self.path})
            else:
                self._serve_static(parts)
        except _ApiError as exc:
            self._send_json(exc.status, exc.payload)
        except Exception as exc:  # pragma: no cover - defensive
            logger.exception("request failed")
            self._send_json(500, {"error": f"internal error: {exc}"})

    def _serve_static(self, parts: list[str]):
        if self.static_dir is None:
            raise _ApiError(404, {"error": "no static assets configured"})
        rel = "/".join(parts) or "index.html"
        target = (self.static_dir / rel).resolve()
        if not str(target).startswith(str(self.static_dir.resolve())) or not target.is_file():
            raise _ApiError(404, {"error": "not found", "path": "/" + rel})
        body = target.read_bytes()
        self.send_response(200)
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def make_server(settings: PipelineSettings, host: str = "127.0.0.1", port: int = 0,
                static_dir: str | None = None) -> ThreadingHTTPServer:
    """Bound but not yet serving; ``server.store`` exposes the sessions."""
    store = SessionStore(settings)
    handler = type(
        "BoundReplanHandler",
        (ReplanHandler,),
        {"store": store, "static_dir": Path(static_dir) if static_dir else None},
    )
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    server.store = store
    return server


def run_server(settings: PipelineSettings, host: str, port: int,
               static_dir: str | None, threads: int = 4) -> None:
    server = make_server(settings, host=host, port=port, static_dir=static_dir)
    logging.basicConfig(level=logging.INFO)
    logger.info("serving on http://%s:%d/ (workers are per-request daemon threads)",
                server.server_address[0], server.server_address[1])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
