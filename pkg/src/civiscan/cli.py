"""Command-line entry points.

Verbs: corpus generate/stats, model train/eval/grid, serve, replay,
export-corrections, bench stages/throughput/jevons/kernels.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import corpus as corpus_mod
from . import metrics as metrics_mod


def _cmd_corpus_generate(args):
    cfg = corpus_mod.CorpusConfig(
        n_images=args.n,
        seed=args.seed,
        image_size=args.image_size,
        low_light_rate=args.low_light_rate,
        adverse_weather_rate=args.adverse_weather_rate,
        clutter_rate=args.clutter_rate,
    )
    manifest = corpus_mod.generate_corpus(cfg, args.out)
    print(json.dumps(corpus_mod.corpus_stats(manifest), indent=2))


def _cmd_corpus_stats(args):
    manifest = corpus_mod.load_manifest(args.manifest)
    print(json.dumps(corpus_mod.corpus_stats(manifest), indent=2))


def _cmd_model_train(args):
    from . import model as model_mod

    manifest = corpus_mod.load_manifest(args.manifest)
    spec = model_mod.reference_network(args.input_size)
    data = model_mod.prepare_training_data(manifest, args.manifest, input_size=args.input_size)
    config = model_mod.TrainConfig(args.lr, args.batch, args.epochs, seed=args.seed)
    params, history = model_mod.train(spec, data, config)
    model_mod.checkpoint_save(spec, params, args.out)
    for row in history:
        print(json.dumps(row))
    print(f"checkpoint written to {args.out}", file=sys.stderr)


def _cmd_model_eval(args):
    from . import model as model_mod
    from .pipeline import PipelineSettings, evaluate_manifest

    spec, params = model_mod.checkpoint_load(args.checkpoint)
    manifest = corpus_mod.load_manifest(args.manifest)
    cm, report, acc = evaluate_manifest(manifest, args.manifest, spec, params, PipelineSettings())
    class_names = [corpus_mod.CLASS_TOKENS[c] for c in corpus_mod.IssueClass]
    if args.json:
        # line-delimited: one row per class, then the summary
        for name, row, counts in zip(class_names, report.per_class, cm.counts.tolist()):
            print(json.dumps({
                "class": name, "precision": row.precision, "recall": row.recall,
                "f1": row.f1, "support": row.support, "degenerate": row.degenerate,
                "confusion_row": counts,
            }))
        print(json.dumps({
            "accuracy": report.accuracy, "macro_precision": report.macro_precision,
            "macro_recall": report.macro_recall, "macro_f1": report.macro_f1,
            "n": cm.total,
        }))
    else:
        print(metrics_mod.format_report_table(report, class_names))
        print("\nconfusion matrix (rows = truth, cols = predicted):")
        for name, row in zip(class_names, cm.counts.tolist()):
            print(f"  {name:<28}{row}")


def _cmd_model_grid(args):
    from . import model as model_mod

    train_manifest = corpus_mod.load_manifest(args.train_manifest)
    val_manifest = corpus_mod.load_manifest(args.val_manifest)
    spec = model_mod.reference_network(args.input_size)
    if args.space_file:
        raw = json.loads(Path(args.space_file).read_text())
        space = model_mod.GridSpace(raw["learning_rates"], raw["batch_sizes"], raw["epoch_counts"])
    else:
        space = model_mod.default_grid()
    train_data = model_mod.prepare_training_data(train_manifest, args.train_manifest, input_size=args.input_size)
    val_data = model_mod.prepare_training_data(
        val_manifest, args.val_manifest, input_size=args.input_size, with_crops=False
    )
    result = model_mod.grid_search(space, spec, train_data, val_data, base_seed=args.seed, n_jobs=args.jobs)
    for row in result.table:
        print(json.dumps(row))
    print(
        f"best: lr={result.best.learning_rate} batch={result.best.batch_size} epochs={result.best.epochs}",
        file=sys.stderr,
    )
    if args.out:
        model_mod.checkpoint_save(spec, result.best_params, args.out)
        print(f"best checkpoint written to {args.out}", file=sys.stderr)


def _cmd_serve(args):
    from .service import CaseService, load_config, serve_forever

    service = CaseService(load_config(args.config))
    serve_forever(service)


def _cmd_replay(args):
    from .service import replay
    from .service.events import read_events

    store = replay(args.log)
    seqs = [e.seq for e in read_events(args.log)]
    status_counts: dict = {}
    for case in store.cases.values():
        status_counts[case.status.value] = status_counts.get(case.status.value, 0) + 1
    summary = {
        "events": len(seqs),
        "cases": len(store.cases),
        "statuses": status_counts,
        "reports": len(store.reports),
        "messages": len(store.messages),
        "corrections": len(store.corrections),
    }
    if args.verify:
        assert seqs == list(range(1, len(seqs) + 1)), "event seq has gaps"
        for case in store.cases.values():
            if case.override is not None:
                assert case.status.value in ("dispatched", "notified"), f"override on {case.status}"
        summary["verified"] = True
    print(json.dumps(summary, indent=2))


def _cmd_export_corrections(args):
    from .service import CaseService, load_config

    service = CaseService(load_config(args.config))
    try:
        count = service.export_corrections(args.since, args.out)
    finally:
        service.close()
    print(f"{count} corrections written to {args.out}")


def _bench_service(args):
    """Boot a service in-process for benchmarking; returns (service, server, url, thread)."""
    import threading

    from .service import CaseService, load_config, make_server

    service = CaseService(load_config(args.config))
    server = make_server(service)
    service.start_workers()
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address
    return service, server, f"http://{host}:{port}"


def _cmd_bench_stages(args):
    from . import bench as bench_mod

    service, server, url = _bench_service(args)
    manifest = corpus_mod.load_manifest(args.manifest)
    bot = bench_mod.OperatorBot(url)
    bot.start()
    try:
        result = bench_mod.measure_stage_latencies(
            url, service.log_path, manifest, Path(args.manifest).parent, args.n, seed=args.seed
        )
    finally:
        bot.stop()
        server.shutdown()
        service.close()
    print(json.dumps(result.to_json(), indent=2))


def _cmd_bench_throughput(args):
    from . import bench as bench_mod

    service, server, url = _bench_service(args)
    manifest = corpus_mod.load_manifest(args.manifest)
    bot = bench_mod.OperatorBot(url)
    bot.start()
    try:
        result = bench_mod.run_throughput(
            url, service.log_path, manifest, Path(args.manifest).parent,
            args.minutes, args.rate, seed=args.seed,
        )
    finally:
        bot.stop()
        server.shutdown()
        service.close()
    print(json.dumps(result.to_json(), indent=2))


def _cmd_bench_jevons(args):
    from . import bench as bench_mod

    service, server, url = _bench_service(args)
    manifest = corpus_mod.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    bot = bench_mod.OperatorBot(url)
    bot.start()

    def run_round(rate):
        result = bench_mod.run_throughput(url, service.log_path, manifest, root, args.round_minutes, rate, seed=args.seed)
        mean_s = (result.mean_total_ms or 0.0) / 1000.0
        return mean_s, result.saturated

    try:
        table = bench_mod.jevons_rounds(
            bench_mod.LoadModelConfig(
                base_rate=args.base_rate, elasticity=args.elasticity, rounds=args.rounds
            ),
            run_round,
        )
    finally:
        bot.stop()
        server.shutdown()
        service.close()
    for row in table:
        print(json.dumps(row))


def _cmd_bench_kernels(args):
    from . import bench as bench_mod
    from .kernels import BACKEND, NATIVE_AVAILABLE

    rows = bench_mod.bench_kernels(repeats=args.repeats)
    print(f"active backend: {BACKEND} (native available: {NATIVE_AVAILABLE})")
    print(f"{'op':<20}{'backend':<12}{'ms':>10}")
    for row in rows:
        print(f"{row['op']:<20}{row['backend']:<12}{row['ms']:>10.3f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="civiscan", description="image-petition triage pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    corpus_p = sub.add_parser("corpus", help="synthetic corpus tools")
    corpus_sub = corpus_p.add_subparsers(dest="subcommand", required=True)
    gen = corpus_sub.add_parser("generate", help="render a labeled corpus")
    gen.add_argument("--n", type=int, default=5712)
    gen.add_argument("--seed", type=int, default=42)
    gen.add_argument("--out", required=True)
    gen.add_argument("--image-size", type=int, default=256)
    gen.add_argument("--low-light-rate", type=float, default=0.35)
    gen.add_argument("--adverse-weather-rate", type=float, default=0.20)
    gen.add_argument("--clutter-rate", type=float, default=0.25)
    gen.set_defaults(func=_cmd_corpus_generate)
    stats = corpus_sub.add_parser("stats", help="summarize a manifest")
    stats.add_argument("--manifest", required=True)
    stats.set_defaults(func=_cmd_corpus_stats)

    model_p = sub.add_parser("model", help="train and evaluate the classifier")
    model_sub = model_p.add_subparsers(dest="subcommand", required=True)
    tr = model_sub.add_parser("train")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--lr", type=float, default=0.01)
    tr.add_argument("--batch", type=int, default=32)
    tr.add_argument("--epochs", type=int, default=18)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--input-size", type=int, default=64)
    tr.set_defaults(func=_cmd_model_train)
    ev = model_sub.add_parser("eval")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--json", action="store_true")
    ev.set_defaults(func=_cmd_model_eval)
    gr = model_sub.add_parser("grid")
    gr.add_argument("--train-manifest", required=True)
    gr.add_argument("--val-manifest", required=True)
    gr.add_argument("--space-file")
    gr.add_argument("--out")
    gr.add_argument("--seed", type=int, default=0)
    gr.add_argument("--jobs", type=int, default=None)
    gr.add_argument("--input-size", type=int, default=64)
    gr.set_defaults(func=_cmd_model_grid)

    serve = sub.add_parser("serve", help="run the case service")
    serve.add_argument("--config", required=True)
    serve.set_defaults(func=_cmd_serve)

    rp = sub.add_parser("replay", help="rebuild state from an event log")
    rp.add_argument("--log", required=True)
    rp.add_argument("--verify", action="store_true")
    rp.set_defaults(func=_cmd_replay)

    ex = sub.add_parser("export-corrections", help="dump review decisions as training data")
    ex.add_argument("--config", required=True)
    ex.add_argument("--since", type=float, default=0.0)
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=_cmd_export_corrections)

    bench_p = sub.add_parser("bench", help="performance harness")
    bench_sub = bench_p.add_subparsers(dest="subcommand", required=True)
    st = bench_sub.add_parser("stages")
    st.add_argument("--config", required=True)
    st.add_argument("--manifest", required=True)
    st.add_argument("--n", type=int, default=20)
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=_cmd_bench_stages)
    tp = bench_sub.add_parser("throughput")
    tp.add_argument("--config", required=True)
    tp.add_argument("--manifest", required=True)
    tp.add_argument("--rate", type=float, default=500.0)
    tp.add_argument("--minutes", type=float, default=10.0)
    tp.add_argument("--seed", type=int, default=0)
    tp.set_defaults(func=_cmd_bench_throughput)
    jv = bench_sub.add_parser("jevons")
    jv.add_argument("--config", required=True)
    jv.add_argument("--manifest", required=True)
    jv.add_argument("--base-rate", type=float, default=120.0)
    jv.add_argument("--elasticity", type=float, default=0.5)
    jv.add_argument("--rounds", type=int, default=3)
    jv.add_argument("--round-minutes", type=float, default=2.0)
    jv.add_argument("--seed", type=int, default=0)
    jv.set_defaults(func=_cmd_bench_jevons)
    kn = bench_sub.add_parser("kernels")
    kn.add_argument("--repeats", type=int, default=10)
    kn.set_defaults(func=_cmd_bench_kernels)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
