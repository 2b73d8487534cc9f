import json
import os
import signal
import socket
import subprocess
import sys
import threading
import time

import pytest
import requests

from civiscan.corpus import IssueClass, SceneConditions, render_scene
from civiscan.imaging import denormalize, encode_pnm
from civiscan.service import CaseService, load_config, make_server, read_events, replay

from conftest import write_service_config


def scene_bytes(cls=IssueClass.INFRASTRUCTURE_DAMAGE, seed=101):
    img, _ = render_scene(cls, SceneConditions(), 256, seed=seed)
    return encode_pnm(denormalize(img))


@pytest.fixture()
def live(tmp_path, trained_checkpoint, rules_file):
    """In-process HTTP server with one worker thread."""
    cfg_path = write_service_config(tmp_path, trained_checkpoint, rules_file)
    service = CaseService(load_config(cfg_path))
    server = make_server(service)
    service.start_workers(1)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address
    yield service, f"http://{host}:{port}"
    server.shutdown()
    service.close()


def submit(url, blob, lat=45.0, lon=25.0, channel="mobile_app", key=None):
    headers = {"Idempotency-Key": key} if key else {}
    return requests.post(
        f"{url}/cases",
        files={"image": ("x.ppm", blob, "image/x-portable-pixmap")},
        data={"lat": str(lat), "lon": str(lon), "channel": channel},
        headers=headers,
        timeout=10,
    )


def wait_status(url, case_id, statuses, timeout=60):
    deadline = time.time() + timeout
    while time.time() < deadline:
        body = requests.get(f"{url}/cases/{case_id}", timeout=5).json()
        if body["status"] in statuses:
            return body
        time.sleep(0.05)
    raise AssertionError(f"case {case_id} never reached {statuses}: {body}")


def test_http_submit_process_and_artifacts(live, dispatchable_seeds):
    service, url = live
    blob = scene_bytes(seed=dispatchable_seeds[IssueClass.INFRASTRUCTURE_DAMAGE])
    r = submit(url, blob)
    assert r.status_code == 201
    case_id = r.json()["id"]
    assert len(case_id) == 26

    body = wait_status(url, case_id, ("notified",))
    assert body["prediction"]["class"] == "infrastructure_damage"
    assert body["has_report"] and body["has_message"]

    report = requests.get(f"{url}/cases/{case_id}/report", timeout=5).json()
    assert report["department"] == "Roads Department"
    message = requests.get(f"{url}/cases/{case_id}/message", timeout=5).json()
    assert case_id in message["body"]
    image = requests.get(f"{url}/cases/{case_id}/image", timeout=5)
    assert image.content == blob

    health = requests.get(f"{url}/healthz", timeout=5).json()
    assert health["status"] == "ok"
    config = requests.get(f"{url}/config", timeout=5).json()
    assert config["threshold"] == 0.8


def test_http_validation_errors(live):
    _, url = live
    r = submit(url, scene_bytes(), lat=91.0)
    assert r.status_code == 400
    assert r.json()["field"] == "lat"
    r = submit(url, b"not a pixmap")
    assert r.status_code == 400
    assert "image" in r.json()["error"]
    r = requests.post(f"{url}/cases", data={"lat": "1"}, timeout=5)
    assert r.status_code == 400
    r = requests.get(f"{url}/cases", params={"status": "bogus"}, timeout=5)
    assert r.status_code == 400


def test_http_idempotency(live):
    _, url = live
    blob = scene_bytes(seed=300)
    a = submit(url, blob, key="dup-1")
    b = submit(url, blob, key="dup-1")
    assert a.status_code == 201 and b.status_code == 200
    assert a.json()["id"] == b.json()["id"]
    assert b.json()["duplicate"]


def test_http_metrics_endpoints(live):
    _, url = live
    submit(url, scene_bytes(seed=301), lat=45.0, lon=25.0)
    heat = requests.get(f"{url}/metrics/heatmap", params={"rows": 2, "cols": 2}, timeout=5).json()
    assert sum(map(sum, heat["cells"])) + heat["overflow"] >= 1
    cls = requests.get(f"{url}/metrics/classification", timeout=5).json()
    assert cls["reviewed"] == 0
    tp = requests.get(f"{url}/metrics/throughput", timeout=5).json()
    assert "completed_per_hour" in tp


def test_http_override_conflict(tmp_path, uniform_checkpoint, rules_file):
    cfg_path = write_service_config(tmp_path, uniform_checkpoint, rules_file)
    service = CaseService(load_config(cfg_path))
    server = make_server(service)
    service.start_workers(1)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    url = "http://%s:%s" % server.server_address
    try:
        r = submit(url, scene_bytes(seed=400))
        case_id = r.json()["id"]
        wait_status(url, case_id, ("pending_review",))
        ok = requests.post(
            f"{url}/cases/{case_id}/override",
            json={"class": "waste_disposal", "operator": "op-a"},
            timeout=5,
        )
        assert ok.status_code == 200
        lose = requests.post(
            f"{url}/cases/{case_id}/override",
            json={"class": "infrastructure_damage", "operator": "op-b"},
            timeout=5,
        )
        assert lose.status_code == 409
        assert lose.json()["current_status"] in ("dispatched", "notified")
        body = wait_status(url, case_id, ("notified",))
        assert body["override"]["class"] == "waste_disposal"
        assert body["override"]["operator"] == "op-a"

        r = submit(url, scene_bytes(seed=401))
        reject_id = r.json()["id"]
        wait_status(url, reject_id, ("pending_review",))
        rej = requests.post(
            f"{url}/cases/{reject_id}/reject",
            json={"operator": "op-a", "reason": "duplicate"},
            timeout=5,
        )
        assert rej.status_code == 200
        assert requests.get(f"{url}/cases/{reject_id}", timeout=5).json()["status"] == "rejected"
    finally:
        server.shutdown()
        service.close()


# --- crash recovery ----------------------------------------------------------------


def spawn_server(config_path):
    proc = subprocess.Popen(
        [sys.executable, "-m", "civiscan.cli", "serve", "--config", str(config_path)],
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        text=True,
    )
    line = proc.stdout.readline()
    assert "listening on" in line, f"server failed to start: {line}"
    url = line.strip().split("listening on ")[-1]
    deadline = time.time() + 10
    while time.time() < deadline:
        try:
            requests.get(f"{url}/healthz", timeout=1)
            break
        except requests.RequestException:
            time.sleep(0.05)
    return proc, url


def free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_crash_recovery_small(tmp_path, trained_checkpoint, rules_file):
    n = 30
    port = free_port()
    cfg_path = write_service_config(tmp_path, trained_checkpoint, rules_file, port=port, workers=2)
    data_dir = tmp_path / "data"

    proc, url = spawn_server(cfg_path)
    blobs = {f"key-{i}": scene_bytes(seed=500 + (i % 6)) for i in range(n)}
    first_ids = {}
    try:
        for key, blob in blobs.items():
            r = submit(url, blob, key=key)
            assert r.status_code in (200, 201)
            first_ids[key] = r.json()["id"]
    finally:
        # kill -9 mid-processing: workers are still draining the queue
        proc.send_signal(signal.SIGKILL)
        proc.wait()

    # restart on the same data dir; resubmit everything idempotently
    proc, url = spawn_server(cfg_path)
    try:
        second_ids = {}
        for key, blob in blobs.items():
            r = submit(url, blob, key=key)
            assert r.status_code in (200, 201)
            second_ids[key] = r.json()["id"]
        assert second_ids == first_ids  # no duplicates, no losses

        deadline = time.time() + 120
        while time.time() < deadline:
            health = requests.get(f"{url}/healthz", timeout=5).json()
            listing = requests.get(f"{url}/cases", params={"limit": 100}, timeout=5).json()
            statuses = {c["id"]: c["status"] for c in listing["cases"]}
            if len(statuses) == n and all(
                s in ("notified", "rejected", "pending_review") for s in statuses.values()
            ) and health["queue_depth"] == 0:
                break
            time.sleep(0.2)
        assert len(statuses) == n
    finally:
        proc.send_signal(signal.SIGTERM)
        proc.wait(timeout=10)

    store = replay(data_dir / "events.jsonl")
    assert len(store.cases) == n
    assert sorted(store.cases) == sorted(first_ids.values())
    seqs = [e.seq for e in read_events(data_dir / "events.jsonl")]
    assert seqs == list(range(1, len(seqs) + 1))
