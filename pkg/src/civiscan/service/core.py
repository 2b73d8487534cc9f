"""Case service: durable intake, pipeline worker, queries, corrections.

All mutation flows through one event appender; the in-memory store is a pure
fold over the log, so replaying the file after a crash reconstructs exactly
the pre-crash state (minus a torn final line). Workers own one case at a
time; operator decisions only touch cases parked in review.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import metrics
from ..corpus import (
    CLASS_TOKENS,
    TOKEN_CLASSES,
    DatasetManifest,
    GroundTruthRegion,
    IssueClass,
    ManifestRecord,
    SceneConditions,
    record_to_json,
)
from ..imaging import InvalidImageError, decode_pnm
from ..model import Prediction, checkpoint_load, predict_case
from ..pipeline import PipelineSettings, preprocess
from ..regions import BoundingBox, RegionProposal, propose_regions
from ..workflow import (
    Case,
    CaseStatus,
    CHANNELS,
    CitizenMessage,
    DispatchReport,
    IllegalTransitionError,
    Override,
    RuleTable,
    WorkflowError,
    apply_override,
    draft_citizen_message,
    generate_report,
    load_rule_table,
    reject_case,
    transition,
    triage,
)
from .config import ServiceConfig
from .events import Event, EventLog, read_events
from .ids import new_case_id

log = logging.getLogger(__name__)


class ValidationError(ValueError):
    def __init__(self, message, field_name=None):
        super().__init__(message)
        self.field_name = field_name


class NotFoundError(KeyError):
    pass


class ConflictError(RuntimeError):
    def __init__(self, message, current_status):
        super().__init__(message)
        self.current_status = current_status


@dataclass
class CaseStore:
    """Pure fold state over the event log."""

    cases: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    messages: dict = field(default_factory=dict)
    corrections: list = field(default_factory=list)
    idempotency: dict = field(default_factory=dict)
    last_seq: int = 0


def _prediction_to_json(pred: Prediction) -> dict:
    return {
        "class": CLASS_TOKENS[pred.cls],
        "confidence": pred.confidence,
        "probabilities": list(pred.probabilities),
    }


def _prediction_from_json(obj) -> Prediction:
    return Prediction(TOKEN_CLASSES[obj["class"]], float(obj["confidence"]), tuple(obj["probabilities"]))


def _proposals_to_json(proposals) -> list:
    return [
        {"x": p.bbox.x, "y": p.bbox.y, "w": p.bbox.w, "h": p.bbox.h, "objectness": p.objectness}
        for p in proposals
    ]


def _proposals_from_json(rows) -> list:
    return [
        RegionProposal(BoundingBox(r["x"], r["y"], r["w"], r["h"]), float(r["objectness"])) for r in rows
    ]


def _report_to_json(r: DispatchReport) -> dict:
    return {
        "case_id": r.case_id,
        "department": r.department,
        "citation": r.regulation_citation,
        "class": CLASS_TOKENS[r.cls],
        "confidence": r.confidence,
        "lat": r.location[0],
        "lon": r.location[1],
        "created_at": r.created_at,
        "priority": r.priority,
        "sla_hours": r.sla_hours,
        "narrative": r.narrative,
    }


def _report_from_json(o) -> DispatchReport:
    return DispatchReport(
        case_id=o["case_id"],
        department=o["department"],
        regulation_citation=o["citation"],
        cls=TOKEN_CLASSES[o["class"]],
        confidence=float(o["confidence"]),
        location=(o["lat"], o["lon"]),
        created_at=float(o["created_at"]),
        priority=o["priority"],
        sla_hours=int(o["sla_hours"]),
        narrative=o["narrative"],
    )


def apply_event(store: CaseStore, event: Event) -> None:
    """Fold one event into the store. Replay and live mutation share this."""
    p = event.payload
    if event.kind == "submitted":
        case = Case(
            id=event.case_id,
            submitted_at=event.at,
            channel=p["channel"],
            location=(p["lat"], p["lon"]),
            image_ref=p["blob"],
            status=CaseStatus.RECEIVED,
            idempotency_key=p.get("idempotency_key"),
        )
        store.cases[event.case_id] = case
        if case.idempotency_key:
            store.idempotency[case.idempotency_key] = case.id
    else:
        case = store.cases[event.case_id]
        if event.kind == "preprocessed":
            transition(case, CaseStatus.PREPROCESSED)
            case.stage_timings["preprocess"] = p["ms"]
        elif event.kind == "classified":
            transition(case, CaseStatus.CLASSIFIED)
            case.proposals = _proposals_from_json(p["proposals"])
            case.prediction = _prediction_from_json(p["prediction"])
            case.stage_timings["propose"] = p["ms_propose"]
            case.stage_timings["classify"] = p["ms_classify"]
        elif event.kind == "triaged":
            transition(case, CaseStatus.PENDING_REVIEW)
        elif event.kind == "dispatched":
            transition(case, CaseStatus.DISPATCHED)
            case.stage_timings["report"] = p["ms_report"]
            store.reports[case.id] = _report_from_json(p["report"])
        elif event.kind == "overridden":
            case.override = Override(TOKEN_CLASSES[p["class"]], p["operator"], event.at)
            transition(case, CaseStatus.DISPATCHED)
            case.stage_timings["report"] = p["ms_report"]
            store.reports[case.id] = _report_from_json(p["report"])
            store.corrections.append(
                {
                    "case_id": case.id,
                    "image_ref": case.image_ref,
                    "class": p["class"],
                    "operator": p["operator"],
                    "at": event.at,
                    "confirmed": p["confirmed"],
                    "lat": case.location[0],
                    "lon": case.location[1],
                    "proposals": _proposals_to_json(case.proposals),
                }
            )
        elif event.kind == "rejected":
            transition(case, CaseStatus.REJECTED)
        elif event.kind == "notified":
            transition(case, CaseStatus.NOTIFIED)
            case.stage_timings["notify"] = p["ms_notify"]
            store.messages[case.id] = CitizenMessage(case.id, event.at, p["body"])
        elif event.kind == "failed":
            case.error = p["error"]
        else:
            raise ValueError(f"unknown event kind {event.kind}")
    store.last_seq = event.seq


def replay(log_path) -> CaseStore:
    """Rebuild the store from the event log alone."""
    store = CaseStore()
    for event in read_events(log_path):
        apply_event(store, event)
    return store


class CaseService:
    """The live service: store + log + blob dir + pipeline dependencies."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.data_dir = Path(config.data_dir)
        self.blob_dir = self.data_dir / "blobs"
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.data_dir / "events.jsonl"

        self.settings = PipelineSettings(
            standard_size=config.standard_size,
            blur_sigma=config.blur_sigma,
            proposer=config.proposer,
        )
        self.spec, self.params = checkpoint_load(config.checkpoint)
        self.rules: RuleTable = load_rule_table(config.rule_table)
        self.templates_dir = config.templates_dir

        self.store = replay(self.log_path)
        self.event_log = EventLog(self.log_path)
        self.event_log.open_for_append(self.store.last_seq + 1)

        self._mutate = threading.RLock()
        self._queue: queue.Queue = queue.Queue()
        self._img_cache: dict = {}
        self._stop = threading.Event()
        self._workers: list = []
        for case in self.ordered_cases():
            if self._needs_worker(case):
                self._queue.put(case.id)

    # --- lifecycle ---------------------------------------------------------------

    @staticmethod
    def _needs_worker(case: Case) -> bool:
        return case.error is None and case.status in (
            CaseStatus.RECEIVED,
            CaseStatus.PREPROCESSED,
            CaseStatus.CLASSIFIED,
            CaseStatus.DISPATCHED,
        )

    def start_workers(self, n: int | None = None) -> None:
        n = n if n is not None else self.config.workers
        for i in range(n):
            t = threading.Thread(target=self._worker_loop, name=f"pipeline-{i}", daemon=True)
            t.start()
            self._workers.append(t)

    def close(self) -> None:
        self._stop.set()
        for t in self._workers:
            t.join(timeout=5)
        self.event_log.close()

    def _worker_loop(self) -> None:
        while not self._stop.is_set():
            try:
                self.process_next(timeout=0.2)
            except Exception:
                log.exception("worker iteration failed")

    # --- events --------------------------------------------------------------------

    def _append(self, case_id: str, kind: str, payload: dict) -> Event:
        event = self.event_log.append(time.time(), case_id, kind, payload)
        apply_event(self.store, event)
        return event

    # --- intake ----------------------------------------------------------------------

    def submit_case(self, image_bytes: bytes, lat: float, lon: float, channel: str,
                    idempotency_key: str | None = None) -> tuple[str, bool]:
        """Persist and enqueue a submission; returns (case_id, duplicate)."""
        if not (-90.0 <= lat <= 90.0):
            raise ValidationError(f"lat must lie in [-90, 90], got {lat}", "lat")
        if not (-180.0 <= lon <= 180.0):
            raise ValidationError(f"lon must lie in [-180, 180], got {lon}", "lon")
        if channel not in CHANNELS:
            raise ValidationError(f"channel must be one of {CHANNELS}, got {channel!r}", "channel")
        try:
            decode_pnm(image_bytes)
        except InvalidImageError as exc:
            raise ValidationError(f"image rejected: {exc}", "image") from exc

        with self._mutate:
            if idempotency_key and idempotency_key in self.store.idempotency:
                return self.store.idempotency[idempotency_key], True
            case_id = new_case_id()
            blob_rel = f"blobs/{case_id}.ppm"
            (self.data_dir / blob_rel).write_bytes(image_bytes)
            self._append(
                case_id,
                "submitted",
                {"channel": channel, "lat": lat, "lon": lon, "blob": blob_rel, "idempotency_key": idempotency_key},
            )
        self._queue.put(case_id)
        return case_id, False

    # --- pipeline worker -----------------------------------------------------------------

    def _load_preprocessed(self, case: Case):
        img = self._img_cache.get(case.id)
        if img is None:
            raster = decode_pnm((self.data_dir / case.image_ref).read_bytes())
            img = preprocess(raster, self.settings)
            self._img_cache[case.id] = img
        return img

    def process_next(self, timeout: float = 0.0) -> str | None:
        """Dequeue one case and drive it as far as it can go; None when idle."""
        try:
            case_id = self._queue.get(timeout=timeout) if timeout else self._queue.get_nowait()
        except queue.Empty:
            return None
        if self.config.pipeline_delay_ms:
            time.sleep(self.config.pipeline_delay_ms / 1000.0)
        try:
            self._run_stages(case_id)
        except Exception as exc:  # parked: never kills the worker
            log.exception("case %s parked in error state", case_id)
            with self._mutate:
                self._append(case_id, "failed", {"stage": self.store.cases[case_id].status.value, "error": str(exc)})
        finally:
            self._img_cache.pop(case_id, None)
        return case_id

    def _run_stages(self, case_id: str) -> None:
        while True:
            case = self.store.cases[case_id]
            if case.error is not None:
                return
            status = case.status
            if status == CaseStatus.RECEIVED:
                t0 = time.time()
                self._load_preprocessed(case)
                ms = (time.time() - t0) * 1000.0
                with self._mutate:
                    self._append(case_id, "preprocessed", {"ms": ms})
            elif status == CaseStatus.PREPROCESSED:
                img = self._load_preprocessed(case)
                t0 = time.time()
                proposals = propose_regions(img, self.settings.proposer)
                t1 = time.time()
                prediction = predict_case(self.spec, self.params, img, proposals)
                t2 = time.time()
                with self._mutate:
                    self._append(
                        case_id,
                        "classified",
                        {
                            "ms_propose": (t1 - t0) * 1000.0,
                            "ms_classify": (t2 - t1) * 1000.0,
                            "proposals": _proposals_to_json(proposals),
                            "prediction": _prediction_to_json(prediction),
                        },
                    )
            elif status == CaseStatus.CLASSIFIED:
                decision = triage(case.prediction, self.config.threshold)
                if decision == CaseStatus.PENDING_REVIEW:
                    with self._mutate:
                        self._append(
                            case_id,
                            "triaged",
                            {
                                "decision": "review",
                                "confidence": case.prediction.confidence,
                                "threshold": self.config.threshold,
                            },
                        )
                    return
                t0 = time.time()
                report = generate_report(case, self.rules, self.templates_dir)
                ms = (time.time() - t0) * 1000.0
                with self._mutate:
                    self._append(
                        case_id,
                        "dispatched",
                        {
                            "confidence": case.prediction.confidence,
                            "threshold": self.config.threshold,
                            "ms_report": ms,
                            "report": _report_to_json(report),
                        },
                    )
            elif status == CaseStatus.DISPATCHED:
                report = self.store.reports[case_id]
                t0 = time.time()
                message = draft_citizen_message(case, report, self.templates_dir)
                ms = (time.time() - t0) * 1000.0
                with self._mutate:
                    self._append(case_id, "notified", {"ms_notify": ms, "body": message.body})
                return
            else:
                return

    # --- operator decisions ------------------------------------------------------------------

    def _get_case(self, case_id: str) -> Case:
        case = self.store.cases.get(case_id)
        if case is None:
            raise NotFoundError(case_id)
        return case

    def override_case(self, case_id: str, cls: IssueClass, operator: str) -> Case:
        with self._mutate:
            case = self._get_case(case_id)
            if case.status != CaseStatus.PENDING_REVIEW:
                raise ConflictError(f"case {case_id} is {case.status.value}, not pending_review", case.status)
            # build the report against a scratch copy; events are the source of truth
            probe = dataclasses.replace(case)
            probe, correction = apply_override(probe, cls, operator)
            t0 = time.time()
            report = generate_report(probe, self.rules, self.templates_dir)
            ms = (time.time() - t0) * 1000.0
            self._append(
                case_id,
                "overridden",
                {
                    "class": CLASS_TOKENS[cls],
                    "operator": operator,
                    "confirmed": correction.confirmed,
                    "ms_report": ms,
                    "report": _report_to_json(report),
                },
            )
        self._queue.put(case_id)  # notify stage still pending
        return self.store.cases[case_id]

    def reject(self, case_id: str, operator: str, reason: str) -> Case:
        if not reason:
            raise ValidationError("reason is required", "reason")
        with self._mutate:
            case = self._get_case(case_id)
            if case.status != CaseStatus.PENDING_REVIEW:
                raise ConflictError(f"case {case_id} is {case.status.value}, not pending_review", case.status)
            self._append(case_id, "rejected", {"operator": operator, "reason": reason})
        return self.store.cases[case_id]

    # --- queries ---------------------------------------------------------------------------------

    def ordered_cases(self):
        return [self.store.cases[k] for k in sorted(self.store.cases)]

    def query_cases(self, status=None, cls=None, since=None, until=None, cursor=None, limit=50):
        """Filtered page of cases ordered by id; returns (cases, next_cursor)."""
        if limit < 1:
            raise ValidationError("limit must be >= 1", "limit")
        after = None
        if cursor:
            try:
                after = base64.urlsafe_b64decode(cursor.encode()).decode()
            except Exception as exc:
                raise ValidationError(f"bad cursor: {cursor!r}", "cursor") from exc
        rows = []
        for case_id in sorted(self.store.cases):
            if after and case_id <= after:
                continue
            case = self.store.cases[case_id]
            if status is not None and case.status != status:
                continue
            if cls is not None and (case.prediction is None or case.final_class() != cls):
                continue
            if since is not None and case.submitted_at < since:
                continue
            if until is not None and case.submitted_at >= until:
                continue
            rows.append(case)
            if len(rows) > limit:
                break
        next_cursor = None
        if len(rows) > limit:
            rows = rows[:limit]
            next_cursor = base64.urlsafe_b64encode(rows[-1].id.encode()).decode()
        return rows, next_cursor

    # --- corrections export -------------------------------------------------------------------------

    def export_corrections(self, since: float, out_path) -> int:
        """Write review decisions since `since` as corpus manifest records."""
        out_path = Path(out_path)
        rows = [c for c in self.store.corrections if c["at"] >= since]
        tmp = out_path.with_suffix(out_path.suffix + ".tmp")
        try:
            with open(tmp, "w", encoding="utf-8") as fh:
                for c in rows:
                    regions = [
                        GroundTruthRegion((p["x"], p["y"], p["w"], p["h"]), TOKEN_CLASSES[c["class"]])
                        for p in c["proposals"]
                    ]
                    if not regions:
                        raster = decode_pnm((self.data_dir / c["image_ref"]).read_bytes())
                        regions = [GroundTruthRegion((0, 0, raster.width, raster.height), TOKEN_CLASSES[c["class"]])]
                    rec = ManifestRecord(
                        image_path=self._relative_blob(c["image_ref"], out_path),
                        cls=TOKEN_CLASSES[c["class"]],
                        conditions=SceneConditions(),
                        regions=regions,
                        location=(c["lat"], c["lon"]),
                        seed_used=0,
                    )
                    fh.write(json.dumps(record_to_json(rec), separators=(",", ":")) + "\n")
        except OSError:
            tmp.unlink(missing_ok=True)
            raise
        tmp.replace(out_path)
        return len(rows)

    def _relative_blob(self, blob_ref: str, out_path: Path) -> str:
        blob_abs = (self.data_dir / blob_ref).resolve()
        try:
            return str(blob_abs.relative_to(out_path.resolve().parent))
        except ValueError:
            import os.path

            return os.path.relpath(blob_abs, out_path.resolve().parent)

    # --- aggregates -----------------------------------------------------------------------------------

    def aggregate_heatmap(self, bounds, rows, cols, status=None, cls=None):
        """Bin matching case locations into a rows x cols grid over bounds."""
        lat_min, lat_max, lon_min, lon_max = bounds
        if rows < 1 or cols < 1:
            raise ValidationError("rows and cols must be >= 1", "rows")
        if lat_max <= lat_min or lon_max <= lon_min:
            raise ValidationError(f"inverted bounds: {bounds}", "bounds")
        grid = np.zeros((rows, cols), dtype=np.int64)
        overflow = 0
        for case in self.store.cases.values():
            if status is not None and case.status != status:
                continue
            if cls is not None and (case.prediction is None or case.final_class() != cls):
                continue
            lat, lon = case.location
            if not (lat_min <= lat <= lat_max and lon_min <= lon <= lon_max):
                overflow += 1
                continue
            r = min(int((lat - lat_min) / (lat_max - lat_min) * rows), rows - 1)
            c = min(int((lon - lon_min) / (lon_max - lon_min) * cols), cols - 1)
            grid[r, c] += 1
        return grid, overflow

    def classification_metrics(self):
        """Confusion of model prediction vs operator decision over reviewed cases."""
        truths, preds = [], []
        for c in self.store.corrections:
            case = self.store.cases[c["case_id"]]
            if case.prediction is None:
                continue
            truths.append(int(TOKEN_CLASSES[c["class"]]))
            preds.append(int(case.prediction.cls))
        cm = metrics.confusion_matrix(truths, preds, 3)
        out = {"reviewed": len(truths), "counts": cm.counts.tolist()}
        if truths:
            out["report"] = metrics.classification_report(cm).to_json()
        return out

    def throughput_metrics(self, window_seconds: float = 3600.0):
        now = time.time()
        done = [
            c
            for c in self.store.cases.values()
            if c.status in (CaseStatus.NOTIFIED, CaseStatus.REJECTED) and c.submitted_at >= now - window_seconds
        ]
        totals = [sum(c.stage_timings.values()) for c in done if c.stage_timings]
        return {
            "window_seconds": window_seconds,
            "completed": len(done),
            "completed_per_hour": len(done) * 3600.0 / window_seconds,
            "mean_stage_ms": float(np.mean(totals)) if totals else None,
            "queue_depth": self._queue.qsize(),
        }
