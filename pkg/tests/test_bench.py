import threading
import time

import numpy as np
import pytest

from civiscan import bench
from civiscan.bench import (
    BenchError,
    LoadModelConfig,
    OperatorBot,
    bench_kernels,
    jevons_next_rate,
    jevons_rounds,
    measure_stage_latencies,
    poisson_schedule,
    run_throughput,
)
from civiscan.corpus import CorpusConfig, generate_corpus
from civiscan.service import CaseService, load_config, make_server

from conftest import write_service_config


# --- jevons model -----------------------------------------------------------------


def test_jevons_zero_elasticity_constant():
    table = jevons_rounds(
        LoadModelConfig(base_rate=100.0, elasticity=0.0, rounds=4),
        lambda rate: (7.0, False),
    )
    assert [row["offered_rate"] for row in table] == [100.0] * 4


def test_jevons_latency_at_baseline_is_fixed_point():
    table = jevons_rounds(
        LoadModelConfig(base_rate=50.0, elasticity=0.7, rounds=3),
        lambda rate: (480.0, False),
    )
    assert [row["offered_rate"] for row in table] == [50.0, 50.0, 50.0]


def test_jevons_growth_factor_hand_computed():
    # 1 + 0.5 * (480 - 7) / 480 = 1.4927083...
    factor = jevons_next_rate(1.0, 7.0, 0.5, 480.0)
    assert factor == pytest.approx(1.4927, abs=1e-4)
    table = jevons_rounds(
        LoadModelConfig(base_rate=100.0, elasticity=0.5, rounds=3),
        lambda rate: (7.0, False),
    )
    assert table[1]["offered_rate"] == pytest.approx(100.0 * factor, rel=1e-12)
    assert table[2]["offered_rate"] == pytest.approx(100.0 * factor * factor, rel=1e-12)


def test_jevons_trajectory_non_decreasing_and_stops_on_saturation():
    rng = np.random.default_rng(0)

    def run_round(rate):
        return float(rng.uniform(1.0, 400.0)), rate > 800.0

    table = jevons_rounds(LoadModelConfig(base_rate=100.0, elasticity=1.5, rounds=50), run_round)
    rates = [row["offered_rate"] for row in table]
    assert all(b >= a for a, b in zip(rates, rates[1:]))
    if table[-1]["saturated"]:
        assert len(table) < 50


def test_jevons_validates_config():
    with pytest.raises(BenchError):
        LoadModelConfig(base_rate=0.0).validate()


# --- poisson schedule ----------------------------------------------------------------


def test_poisson_schedule_deterministic_and_sane():
    a = poisson_schedule(3600.0, 10.0, seed=5)
    b = poisson_schedule(3600.0, 10.0, seed=5)
    assert a == b
    assert all(0 < t < 10.0 for t in a)
    assert all(t2 > t1 for t1, t2 in zip(a, a[1:]))
    # around one arrival per second over 10s
    assert 2 <= len(a) <= 25


# --- harness against a live service ---------------------------------------------------


@pytest.fixture(scope="module")
def bench_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchcorpus")
    manifest = generate_corpus(
        CorpusConfig(n_images=12, seed=77, image_size=256,
                     low_light_rate=0.0, adverse_weather_rate=0.0, clutter_rate=0.0),
        root,
    )
    return root, manifest


@pytest.fixture()
def bench_service(tmp_path, trained_checkpoint, rules_file):
    def boot(**overrides):
        cfg_path = write_service_config(tmp_path, trained_checkpoint, rules_file, **overrides)
        service = CaseService(load_config(cfg_path))
        server = make_server(service)
        service.start_workers()
        threading.Thread(target=server.serve_forever, daemon=True).start()
        url = "http://%s:%s" % server.server_address
        return service, server, url

    made = []

    def factory(**overrides):
        triple = boot(**overrides)
        made.append(triple)
        return triple

    yield factory
    for service, server, _ in made:
        server.shutdown()
        service.close()


def test_stage_latencies_empty_run(bench_service, bench_corpus):
    root, manifest = bench_corpus
    service, _, url = bench_service()
    result = measure_stage_latencies(url, service.log_path, manifest, root, 0)
    assert result.empty and result.n_cases == 0


def test_stage_latencies_small_run(bench_service, bench_corpus):
    root, manifest = bench_corpus
    service, _, url = bench_service(workers=2)
    bot = OperatorBot(url, interval=0.1)
    bot.start()
    try:
        result = measure_stage_latencies(url, service.log_path, manifest, root, 6, seed=1)
    finally:
        bot.stop()
    assert result.n_cases == 6
    assert set(result.mean_ms) == {"preprocess", "propose", "classify", "report", "notify"}
    assert result.total_mean_ms >= sum(result.mean_ms.values()) * 0.5
    # total includes queueing so it dominates the sum of in-worker stages
    assert result.total_mean_ms > 0
    js = result.to_json()
    assert 0 < js["efficiency_gain_vs_manual"] <= 1.0


def test_throughput_sparse_arrivals(bench_service, bench_corpus):
    root, manifest = bench_corpus
    service, _, url = bench_service(workers=1)
    result = run_throughput(url, service.log_path, manifest, root,
                            duration_minutes=0.1, offered_rate=30.0, seed=3)
    assert result.submitted in (0, 1, 2)
    assert result.completed <= result.submitted
    assert result.completed_rate <= result.offered_rate + 1e-9


def test_throughput_saturation_detected(bench_service, bench_corpus):
    root, manifest = bench_corpus
    # worker sleeps 700ms per case: capacity ~1.4/s; offer ~6/s
    service, _, url = bench_service(workers=1, pipeline_delay_ms=700)
    result = run_throughput(url, service.log_path, manifest, root,
                            duration_minutes=0.15, offered_rate=6 * 3600.0, seed=4)
    assert result.submitted >= 20
    assert result.saturated
    assert result.completed < result.submitted
    assert result.completed_rate <= result.offered_rate


def test_throughput_sustained_no_saturation(bench_service, bench_corpus):
    root, manifest = bench_corpus
    service, _, url = bench_service(workers=2)
    bot = OperatorBot(url, interval=0.1)
    bot.start()
    try:
        # 3600/hour for 12s: one case per second against a ~100ms pipeline
        result = run_throughput(url, service.log_path, manifest, root,
                                duration_minutes=0.2, offered_rate=3600.0, seed=5)
    finally:
        bot.stop()
    assert result.submitted >= 5
    assert not result.saturated
    assert result.mean_total_ms is not None and result.mean_total_ms < 7000.0


# --- kernels comparison ---------------------------------------------------------------


def test_bench_kernels_smoke():
    rows = bench_kernels(repeats=2)
    backends = {row["backend"] for row in rows}
    assert "fallback" in backends
    ops = {row["op"] for row in rows if row["backend"] == "fallback"}
    assert {"conv2d_forward", "blur_separable", "label_components"} <= ops
    assert all(row["ms"] > 0 for row in rows)
