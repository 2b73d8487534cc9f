"""Benchmark harness: per-stage latency, sustained throughput, demand model.

The load generator talks to the service exclusively through its HTTP API and
reads the event log file for timing ground truth. Arrivals are open-loop
Poisson with a seeded, deterministic schedule. An optional operator bot
resolves the review queue by approving the model's class, so the complete
workflow (including manual validation) runs unattended.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .corpus import DatasetManifest, load_manifest
from .metrics import efficiency_gain
from .service.events import read_events

STAGES = ("preprocess", "propose", "classify", "report", "notify")
MANUAL_BASELINE_SECONDS = 480.0  # traditional handling time per case


class BenchError(RuntimeError):
    pass


@dataclass
class StageLatencies:
    mean_ms: dict
    p95_ms: dict
    total_mean_ms: float
    total_p95_ms: float
    n_cases: int
    empty: bool = False

    def to_json(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "empty": self.empty,
            "mean_ms": self.mean_ms,
            "p95_ms": self.p95_ms,
            "total_mean_ms": self.total_mean_ms,
            "total_p95_ms": self.total_p95_ms,
            "efficiency_gain_vs_manual": (
                efficiency_gain(MANUAL_BASELINE_SECONDS, self.total_mean_ms / 1000.0)
                if not self.empty
                else None
            ),
        }


@dataclass
class BenchResult:
    offered_rate: float  # realized submissions/hour
    completed_rate: float
    mean_total_ms: float | None
    p95_total_ms: float | None
    saturated: bool
    submitted: int
    completed: int

    def to_json(self) -> dict:
        return {
            "offered_rate_per_hour": self.offered_rate,
            "completed_rate_per_hour": self.completed_rate,
            "mean_total_ms": self.mean_total_ms,
            "p95_total_ms": self.p95_total_ms,
            "saturated": self.saturated,
            "submitted": self.submitted,
            "completed": self.completed,
            "efficiency_gain_vs_manual": (
                efficiency_gain(MANUAL_BASELINE_SECONDS, self.mean_total_ms / 1000.0)
                if self.mean_total_ms is not None and self.mean_total_ms / 1000.0 <= MANUAL_BASELINE_SECONDS
                else None
            ),
        }


@dataclass
class LoadModelConfig:
    base_rate: float  # cases/hour
    elasticity: float = 0.0
    manual_baseline_seconds: float = MANUAL_BASELINE_SECONDS
    rounds: int = 1

    def validate(self):
        if self.base_rate <= 0:
            raise BenchError("base_rate must be > 0")
        if self.elasticity < 0:
            raise BenchError("elasticity must be >= 0")
        if self.rounds < 1:
            raise BenchError("rounds must be >= 1")
        return self


class OperatorBot(threading.Thread):
    """Polls the review queue and approves the model's own prediction."""

    def __init__(self, base_url: str, interval: float = 0.25):
        super().__init__(daemon=True, name="operator-bot")
        self.base_url = base_url
        self.interval = interval
        self._stop = threading.Event()
        self.decided = 0

    def stop(self):
        self._stop.set()

    def run(self):
        while not self._stop.is_set():
            try:
                r = requests.get(
                    f"{self.base_url}/cases", params={"status": "pending_review", "limit": 20}, timeout=5
                )
                for case in r.json().get("cases", []):
                    cls = (case.get("prediction") or {}).get("class", "infrastructure_damage")
                    resp = requests.post(
                        f"{self.base_url}/cases/{case['id']}/override",
                        json={"class": cls, "operator": "bench-bot"},
                        timeout=5,
                    )
                    if resp.status_code == 200:
                        self.decided += 1
            except requests.RequestException:
                pass
            self._stop.wait(self.interval)


def _submit(base_url: str, image_bytes: bytes, lat: float, lon: float, key: str) -> str:
    r = requests.post(
        f"{base_url}/cases",
        files={"image": ("case.ppm", image_bytes, "image/x-portable-pixmap")},
        data={"lat": str(lat), "lon": str(lon), "channel": "mobile_app"},
        headers={"Idempotency-Key": key},
        timeout=30,
    )
    if r.status_code not in (200, 201):
        raise BenchError(f"submission failed: {r.status_code} {r.text[:200]}")
    return r.json()["id"]


def _case_timings(log_path, case_ids, end_time=None):
    """Per-case (stage_ms dict, total_ms) from the event log alone."""
    wanted = set(case_ids)
    submitted = {}
    stage_ms = {cid: {} for cid in wanted}
    terminal = {}
    stage_by_kind = {"preprocessed": ("preprocess", "ms"), "classified": None, "notified": ("notify", "ms_notify")}
    for event in read_events(log_path):
        cid = event.case_id
        if cid not in wanted:
            continue
        if event.kind == "submitted":
            submitted[cid] = event.at
        elif event.kind == "preprocessed":
            stage_ms[cid]["preprocess"] = event.payload["ms"]
        elif event.kind == "classified":
            stage_ms[cid]["propose"] = event.payload["ms_propose"]
            stage_ms[cid]["classify"] = event.payload["ms_classify"]
        elif event.kind in ("dispatched", "overridden"):
            stage_ms[cid]["report"] = event.payload["ms_report"]
        elif event.kind == "notified":
            stage_ms[cid]["notify"] = event.payload["ms_notify"]
            if end_time is None or event.at <= end_time:
                terminal[cid] = (event.at - submitted[cid]) * 1000.0
        elif event.kind == "rejected":
            if end_time is None or event.at <= end_time:
                terminal[cid] = (event.at - submitted[cid]) * 1000.0
    return stage_ms, terminal


def wait_for_terminal(base_url: str, case_ids, timeout: float = 300.0) -> list:
    """Poll until every case is notified/rejected; returns error-parked ids."""
    deadline = time.time() + timeout
    pending = set(case_ids)
    errored = []
    while pending and time.time() < deadline:
        for cid in sorted(pending):
            r = requests.get(f"{base_url}/cases/{cid}", timeout=10)
            if r.status_code != 200:
                continue
            body = r.json()
            if body.get("error"):
                errored.append(cid)
                pending.discard(cid)
            elif body["status"] in ("notified", "rejected"):
                pending.discard(cid)
        if pending:
            time.sleep(0.1)
    if pending:
        raise BenchError(f"cases never reached a terminal status: {sorted(pending)[:5]} (+{max(0, len(pending)-5)})")
    return errored


def measure_stage_latencies(
    base_url: str,
    log_path,
    manifest: DatasetManifest,
    manifest_root,
    n_cases: int,
    seed: int = 0,
) -> StageLatencies:
    """Submit n sequential cases and aggregate per-stage wall-clock times."""
    if n_cases == 0:
        return StageLatencies({}, {}, 0.0, 0.0, 0, empty=True)
    if not len(manifest):
        raise BenchError("empty corpus manifest")
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n_cases):
        rec = manifest.records[int(rng.integers(0, len(manifest)))]
        blob = (Path(manifest_root) / rec.image_path).read_bytes()
        ids.append(_submit(base_url, blob, rec.location[0], rec.location[1], f"bench-stage-{seed}-{i}"))
    errored = wait_for_terminal(base_url, ids)
    if errored:
        raise BenchError(f"cases parked in error state: {errored}")
    stage_ms, totals = _case_timings(log_path, ids)
    mean_ms = {}
    p95_ms = {}
    for stage in STAGES:
        vals = [stage_ms[cid][stage] for cid in ids if stage in stage_ms[cid]]
        if vals:
            mean_ms[stage] = float(np.mean(vals))
            p95_ms[stage] = float(np.percentile(vals, 95))
    tvals = list(totals.values())
    return StageLatencies(
        mean_ms=mean_ms,
        p95_ms=p95_ms,
        total_mean_ms=float(np.mean(tvals)),
        total_p95_ms=float(np.percentile(tvals, 95)),
        n_cases=n_cases,
    )


def poisson_schedule(rate_per_hour: float, duration_s: float, seed: int) -> list:
    """Deterministic arrival offsets (seconds) for a Poisson process."""
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([seed, 0xA221])))
    t = 0.0
    out = []
    mean_gap = 3600.0 / rate_per_hour
    while True:
        t += float(rng.exponential(mean_gap))
        if t >= duration_s:
            return out
        out.append(t)


def run_throughput(
    base_url: str,
    log_path,
    manifest: DatasetManifest,
    manifest_root,
    duration_minutes: float,
    offered_rate: float,
    seed: int = 0,
) -> BenchResult:
    """Open-loop Poisson load for the duration; measures completed terminal cases.

    offered_rate in the result is the realized submission rate, so
    completed_rate <= offered_rate always holds.
    """
    if offered_rate <= 0:
        raise BenchError("offered_rate must be > 0")
    duration_s = duration_minutes * 60.0
    schedule = poisson_schedule(offered_rate, duration_s, seed)
    blobs = []
    for rec in manifest.records[:64]:
        blobs.append(((Path(manifest_root) / rec.image_path).read_bytes(), rec.location))
    if not blobs:
        raise BenchError("empty corpus manifest")

    start = time.time()
    ids = []
    for i, offset in enumerate(schedule):
        now = time.time()
        target = start + offset
        if target > now:
            time.sleep(target - now)
        blob, (lat, lon) = blobs[i % len(blobs)]
        ids.append(_submit(base_url, blob, lat, lon, f"bench-tp-{seed}-{i}"))
    end = start + duration_s
    remaining = end - time.time()
    if remaining > 0:
        time.sleep(remaining)

    _, totals = _case_timings(log_path, ids, end_time=end)
    submitted = len(ids)
    completed = len(totals)
    hours = duration_s / 3600.0
    offered_realized = submitted / hours if hours else 0.0
    completed_rate = completed / hours if hours else 0.0
    tvals = list(totals.values())
    return BenchResult(
        offered_rate=offered_realized,
        completed_rate=completed_rate,
        mean_total_ms=float(np.mean(tvals)) if tvals else None,
        p95_total_ms=float(np.percentile(tvals, 95)) if tvals else None,
        saturated=completed < 0.95 * submitted,
        submitted=submitted,
        completed=completed,
    )


def jevons_next_rate(rate: float, mean_latency_s: float, elasticity: float, baseline_s: float) -> float:
    """Demand update: efficiency gains induce proportional growth, never decline."""
    grown = rate * (1.0 + elasticity * (baseline_s - mean_latency_s) / baseline_s)
    return max(rate, grown)


def jevons_rounds(config: LoadModelConfig, run_round) -> list:
    """Iterate the elastic-demand model.

    run_round(rate_per_hour) -> (mean_latency_seconds, saturated). Returns a
    table of {round, offered_rate, mean_latency_s, saturated}, stopping early
    once the system saturates.
    """
    config.validate()
    rate = config.base_rate
    table = []
    for rnd in range(config.rounds):
        latency, saturated = run_round(rate)
        table.append(
            {"round": rnd, "offered_rate": rate, "mean_latency_s": latency, "saturated": bool(saturated)}
        )
        if saturated:
            break
        rate = jevons_next_rate(rate, latency, config.elasticity, config.manual_baseline_seconds)
    return table


# --- kernel backend comparison -------------------------------------------------------


def bench_kernels(repeats: int = 10) -> list:
    """Time each hot kernel on both backends; the repo ships both paths."""
    from .kernels import NATIVE_AVAILABLE, get_backend

    rng = np.random.default_rng(0)
    x = rng.random((16, 64, 64, 3), dtype=np.float32)
    w = rng.random((3, 3, 3, 8), dtype=np.float32)
    b = np.zeros(8, dtype=np.float32)
    img = rng.random((256, 256, 3))
    taps = np.exp(-np.arange(-3, 4) ** 2 / 2.0)
    taps /= taps.sum()
    mask = rng.random((256, 256)) > 0.8

    backends = ["fallback"] + (["native"] if NATIVE_AVAILABLE else [])
    rows = []
    for name in backends:
        mod = get_backend(name)
        cases = {
            "conv2d_forward": lambda: mod.conv2d_forward(x, w, b, 1, 1),
            "conv2d_backward": lambda: mod.conv2d_backward(x, w, 1, 1, mod.conv2d_forward(x, w, b, 1, 1)),
            "maxpool": lambda: mod.maxpool_forward(x, 2, 2),
            "blur_separable": lambda: mod.blur_separable(img, taps),
            "bilinear_resize": lambda: mod.bilinear_resize(img, 64, 64),
            "label_components": lambda: mod.label_components(mask),
        }
        for op, fn in cases.items():
            fn()  # warm up
            t0 = time.perf_counter()
            for _ in range(repeats):
                fn()
            rows.append({"backend": name, "op": op, "ms": (time.perf_counter() - t0) / repeats * 1000.0})
    return rows
