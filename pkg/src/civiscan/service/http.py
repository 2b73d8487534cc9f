"""HTTP/JSON surface over the case service.

Stdlib threading server: many concurrent readers, all writes funneled into
the service's serialized appender. CORS is open so the review console can be
served from anywhere.
"""

from __future__ import annotations

import email
import email.policy
import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from ..corpus import CLASS_TOKENS, TOKEN_CLASSES
from ..workflow import CaseStatus
from .core import CaseService, ConflictError, NotFoundError, ValidationError

log = logging.getLogger(__name__)


def case_to_json(service: CaseService, case) -> dict:
    from .core import _prediction_to_json, _proposals_to_json

    out = {
        "id": case.id,
        "submitted_at": case.submitted_at,
        "channel": case.channel,
        "lat": case.location[0],
        "lon": case.location[1],
        "status": case.status.value,
        "prediction": _prediction_to_json(case.prediction) if case.prediction else None,
        "proposals": _proposals_to_json(case.proposals),
        "override": (
            {"class": CLASS_TOKENS[case.override.cls], "operator": case.override.operator, "at": case.override.at}
            if case.override
            else None
        ),
        "stage_timings_ms": case.stage_timings,
        "error": case.error,
        "has_report": case.id in service.store.reports,
        "has_message": case.id in service.store.messages,
    }
    return out


def _parse_multipart(content_type: str, body: bytes) -> dict:
    msg = email.message_from_bytes(
        b"Content-Type: " + content_type.encode() + b"\r\nMIME-Version: 1.0\r\n\r\n" + body,
        policy=email.policy.HTTP,
    )
    if not msg.is_multipart():
        raise ValidationError("expected multipart/form-data body", "body")
    fields = {}
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if name:
            fields[name] = part.get_payload(decode=True)
    return fields


class ApiHandler(BaseHTTPRequestHandler):
    service: CaseService = None
    ui_dir: Path | None = None
    protocol_version = "HTTP/1.1"

    # --- plumbing --------------------------------------------------------------

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, obj, content_type="application/json") -> None:
        body = json.dumps(obj).encode() if content_type == "application/json" else obj
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type, Idempotency-Key")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str, **extra) -> None:
        self._send(status, {"error": message, **extra})

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length", 0))
        return self.rfile.read(length) if length else b""

    def _json_body(self) -> dict:
        try:
            return json.loads(self._body() or b"{}")
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bad JSON body: {exc}", "body") from exc

    # --- routing ------------------------------------------------------------------

    def do_OPTIONS(self):
        self._send(204, b"", content_type="text/plain")

    def do_GET(self):
        try:
            self._route_get()
        except ValidationError as exc:
            self._error(400, str(exc), field=exc.field_name)
        except NotFoundError as exc:
            self._error(404, f"case not found: {exc}")
        except Exception as exc:
            log.exception("GET %s failed", self.path)
            self._error(500, str(exc))

    def do_POST(self):
        try:
            self._route_post()
        except ValidationError as exc:
            self._error(400, str(exc), field=exc.field_name)
        except NotFoundError as exc:
            self._error(404, f"case not found: {exc}")
        except ConflictError as exc:
            self._error(409, str(exc), current_status=exc.current_status.value)
        except Exception as exc:
            log.exception("POST %s failed", self.path)
            self._error(500, str(exc))

    @staticmethod
    def _status_class_filters(q: dict):
        try:
            status = CaseStatus(q["status"]) if "status" in q else None
        except ValueError as exc:
            raise ValidationError(f"unknown status {q['status']!r}", "status") from exc
        if "class" in q and q["class"] not in TOKEN_CLASSES:
            raise ValidationError(f"unknown class {q['class']!r}", "class")
        cls = TOKEN_CLASSES[q["class"]] if "class" in q else None
        return status, cls

    # --- GET ---------------------------------------------------------------------------

    def _route_get(self):
        svc = self.service
        url = urlparse(self.path)
        path = url.path.rstrip("/") or "/"
        q = {k: v[0] for k, v in parse_qs(url.query).items()}

        if path == "/healthz":
            self._send(200, {"status": "ok", "cases": len(svc.store.cases), "queue_depth": svc._queue.qsize()})
            return
        if path == "/config":
            self._send(
                200,
                {
                    "threshold": svc.config.threshold,
                    "classes": [CLASS_TOKENS[c] for c in sorted(TOKEN_CLASSES.values())],
                    "standard_size": svc.config.standard_size,
                },
            )
            return
        if path == "/cases":
            status, cls = self._status_class_filters(q)
            cases, cursor = svc.query_cases(
                status=status,
                cls=cls,
                since=float(q["since"]) if "since" in q else None,
                until=float(q["until"]) if "until" in q else None,
                cursor=q.get("cursor"),
                limit=int(q.get("limit", 50)),
            )
            self._send(200, {"cases": [case_to_json(svc, c) for c in cases], "cursor": cursor})
            return

        m = re.fullmatch(r"/cases/([0-9A-Z]+)", path)
        if m:
            self._send(200, case_to_json(svc, svc._get_case(m.group(1))))
            return
        m = re.fullmatch(r"/cases/([0-9A-Z]+)/report", path)
        if m:
            report = svc.store.reports.get(m.group(1))
            if report is None:
                self._error(404, "no report for this case")
                return
            from .core import _report_to_json

            self._send(200, _report_to_json(report))
            return
        m = re.fullmatch(r"/cases/([0-9A-Z]+)/message", path)
        if m:
            msg = svc.store.messages.get(m.group(1))
            if msg is None:
                self._error(404, "no citizen message for this case")
                return
            self._send(200, {"case_id": msg.case_id, "created_at": msg.created_at, "body": msg.body})
            return
        m = re.fullmatch(r"/cases/([0-9A-Z]+)/image", path)
        if m:
            case = svc._get_case(m.group(1))
            blob = (svc.data_dir / case.image_ref).read_bytes()
            self._send(200, blob, content_type="image/x-portable-pixmap")
            return

        if path == "/metrics/classification":
            self._send(200, svc.classification_metrics())
            return
        if path == "/metrics/heatmap":
            rows = int(q.get("rows", 8))
            cols = int(q.get("cols", 8))
            if "bounds" in q:
                bounds = tuple(float(v) for v in q["bounds"].split(","))
                if len(bounds) != 4:
                    raise ValidationError("bounds must be lat_min,lat_max,lon_min,lon_max", "bounds")
            else:
                lats = [c.location[0] for c in svc.store.cases.values()] or [0.0]
                lons = [c.location[1] for c in svc.store.cases.values()] or [0.0]
                bounds = (min(lats), max(lats) + 1e-9, min(lons), max(lons) + 1e-9)
            status, cls = self._status_class_filters(q)
            grid, overflow = svc.aggregate_heatmap(bounds, rows, cols, status=status, cls=cls)
            self._send(200, {"bounds": list(bounds), "rows": rows, "cols": cols, "cells": grid.tolist(), "overflow": overflow})
            return
        if path == "/metrics/throughput":
            window = float(q.get("window", 3600.0))
            self._send(200, svc.throughput_metrics(window))
            return

        if self.ui_dir and (path == "/" or path.startswith("/ui")):
            self._serve_static(path)
            return
        self._error(404, f"no such endpoint: {path}")

    def _serve_static(self, path: str):
        rel = path[3:].lstrip("/") if path.startswith("/ui") else ""
        target = (self.ui_dir / (rel or "index.html")).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            self._error(404, "not found")
            return
        ctype = {
            ".html": "text/html",
            ".js": "text/javascript",
            ".css": "text/css",
            ".map": "application/json",
        }.get(target.suffix, "application/octet-stream")
        self._send(200, target.read_bytes(), content_type=ctype)

    # --- POST -----------------------------------------------------------------------------

    def _route_post(self):
        svc = self.service
        url = urlparse(self.path)
        path = url.path.rstrip("/")

        if path == "/cases":
            ctype = self.headers.get("Content-Type", "")
            if not ctype.startswith("multipart/form-data"):
                raise ValidationError("POST /cases requires multipart/form-data", "content-type")
            fields = _parse_multipart(ctype, self._body())
            for required in ("image", "lat", "lon", "channel"):
                if required not in fields:
                    raise ValidationError(f"missing form field {required!r}", required)
            try:
                lat = float(fields["lat"])
                lon = float(fields["lon"])
            except ValueError as exc:
                raise ValidationError(f"bad coordinate: {exc}", "lat") from exc
            case_id, duplicate = svc.submit_case(
                fields["image"],
                lat,
                lon,
                fields["channel"].decode(),
                idempotency_key=self.headers.get("Idempotency-Key"),
            )
            self._send(200 if duplicate else 201, {"id": case_id, "duplicate": duplicate})
            return

        m = re.fullmatch(r"/cases/([0-9A-Z]+)/override", path)
        if m:
            body = self._json_body()
            if "class" not in body or body["class"] not in TOKEN_CLASSES:
                raise ValidationError(f"class must be one of {sorted(TOKEN_CLASSES)}", "class")
            if not body.get("operator"):
                raise ValidationError("operator is required", "operator")
            case = svc.override_case(m.group(1), TOKEN_CLASSES[body["class"]], body["operator"])
            self._send(200, case_to_json(svc, case))
            return
        m = re.fullmatch(r"/cases/([0-9A-Z]+)/reject", path)
        if m:
            body = self._json_body()
            if not body.get("operator"):
                raise ValidationError("operator is required", "operator")
            case = svc.reject(m.group(1), body["operator"], body.get("reason", ""))
            self._send(200, case_to_json(svc, case))
            return
        self._error(404, f"no such endpoint: {path}")


def make_server(service: CaseService) -> ThreadingHTTPServer:
    handler = type("BoundApiHandler", (ApiHandler,), {
        "service": service,
        "ui_dir": Path(service.config.ui_dir) if service.config.ui_dir else None,
    })
    server = ThreadingHTTPServer((service.config.host, service.config.port), handler)
    server.daemon_threads = True
    return server


def serve_forever(service: CaseService) -> None:
    server = make_server(service)
    service.start_workers()
    host, port = server.server_address
    log.info("serving on http://%s:%s (data_dir=%s)", host, port, service.config.data_dir)
    print(f"civiscan service listening on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    finally:
        service.close()
