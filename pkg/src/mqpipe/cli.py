"""Command line front end.

Subcommands: generate, profile, train, simulate, report.  Options can come
from a flat key=value config file (--config); explicit flags win over the
file, the file wins over built-in defaults.  Unknown config keys are
rejected.  Exit codes: 0 success, 2 usage or configuration error,
3 runtime failure (sampling breakdown, pipeline stall, non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import autotune, bench, graph
from .pipeline import (PipelineTimeout, Trace, simulate_sequential,
                       simulate_timings, utilization)
from .racom import compute_sync_period
from .runtime import PipelineConfig
from .samplers import SamplerParams, SamplingError, parse_method
from .timing import DurationModel, TransferModel, parse_stage_durations

# config-file keys and their parsers; names match the CLI flags
CONFIG_KEYS = {
    "seed": int,
    "deterministic": None,     # bool, special-cased
    "devices": int,
    "queue": str,
    "sync": str,
    "method": str,
    "fanout": int,
    "nodes_per_layer": int,
    "num_layers": int,
    "cache_fraction": float,
    "cache_mode": str,
    "optimizer": str,
    "repeats": int,
    "batch_size": int,
    "sampler_workers": int,
    "epochs": int,
    "hidden_dim": int,
    "arch": str,
    "learning_rate": float,
    "grad_delay": str,
    "transfer_base": str,
    "transfer_per_byte_ms": float,
    "durations": str,
    "timing_mode": str,
    "memory": int,
    "early_stop_delta": float,
    "early_stop_batches": int,
    "walk_steps": int,
}

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


class ConfigError(ValueError):
    pass


def parse_config_file(path: str) -> dict:
    """Flat key=value lines; '#' starts a comment; unknown keys are fatal."""
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        caster = CONFIG_KEYS[key]
        if caster is None:
            low = raw.lower()
            if low in _TRUE:
                values[key] = True
            elif low in _FALSE:
                values[key] = False
            else:
                raise ConfigError(f"{path}:{lineno}: {key} wants a boolean, "
                                  f"got {raw!r}")
        else:
            try:
                values[key] = caster(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: "
                                  f"{exc}") from exc
    return values


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value options file")
    p.add_argument("--seed", type=int, help="master RNG seed (default 0)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="serialized schedule with a virtual clock")
    p.add_argument("--devices", type=int, help="simulated device count")
    p.add_argument("--queue", help="queue depth, or 'auto' to size from a "
                                   "profiling pass")
    p.add_argument("--sync", help="model sync period in windows, or 'auto'")
    p.add_argument("--method", help="sampler: ns | fastgcn | ladies with "
                                    "optional +f / +d modifiers")
    p.add_argument("--fanout", type=int, help="neighbors per node (ns)")
    p.add_argument("--nodes-per-layer", type=int, dest="nodes_per_layer",
                   help="layer budget (fastgcn / ladies)")
    p.add_argument("--num-layers", type=int, dest="num_layers",
                   help="model and sampler depth")
    p.add_argument("--cache-fraction", type=float, dest="cache_fraction",
                   help="resident feature fraction of |V|")
    p.add_argument("--cache-mode", dest="cache_mode",
                   choices=["auto", "degree", "walk", "off"],
                   help="cache weighting policy")
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--repeats", type=int, help="independent seeded runs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--sampler-workers", type=int, dest="sampler_workers")
    p.add_argument("--grad-delay", dest="grad_delay",
                   help="gradient delivery delay model, e.g. uniform:5,30")
    p.add_argument("--transfer-base", dest="transfer_base",
                   help="base transfer duration model")
    p.add_argument("--transfer-per-byte-ms", type=float,
                   dest="transfer_per_byte_ms",
                   help="transfer cost per missing feature byte")
    p.add_argument("--durations", help="simulated stage durations, e.g. "
                                       "sample=uniform:18,48,compute=11.89")
    p.add_argument("--timing-mode", dest="timing_mode",
                   choices=["real", "simulated"])


_DEFAULTS = {
    "seed": 0, "deterministic": False, "devices": 1, "queue": "2",
    "sync": "auto", "method": "ns", "fanout": 5, "nodes_per_layer": 512,
    "num_layers": 2, "cache_fraction": 0.2, "cache_mode": "auto",
    "optimizer": "adam", "repeats": 1, "batch_size": 512,
    "sampler_workers": 1, "epochs": 10, "hidden_dim": 64, "arch": "gcn",
    "learning_rate": 0.001, "grad_delay": "none", "transfer_base": "none",
    "transfer_per_byte_ms": 0.0, "durations": "", "timing_mode": "real",
    "memory": autotune.DEFAULT_DEVICE_MEMORY, "early_stop_delta": 0.01,
    "early_stop_batches": 200, "walk_steps": 2,
}


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge CLI > config file > defaults into one options dict."""
    opts = dict(_DEFAULTS)
    if getattr(args, "config", None):
        opts.update(parse_config_file(args.config))
    for key in _DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    return opts


def build_pipeline_config(opts: dict, queue_capacity: int,
                          sync_period: int) -> PipelineConfig:
    base, flat, debias = parse_method(opts["method"])
    if base == "gcn" and opts.get("arch") == "sage":
        base = "sage"   # node-wise sampling follows the model architecture
    sampler = SamplerParams(method=base, fanout=opts["fanout"],
                            nodes_per_layer=opts["nodes_per_layer"],
                            num_layers=opts["num_layers"], flat=flat,
                            debias=debias)
    durations = (parse_stage_durations(opts["durations"])
                 if opts["durations"] else {})
    return PipelineConfig(
        num_devices=opts["devices"],
        queue_capacity=queue_capacity,
        sampler_workers=opts["sampler_workers"],
        batch_size=opts["batch_size"],
        sampler=sampler,
        optimizer=opts["optimizer"],
        sync_period=sync_period,
        delay_model=DurationModel.parse(opts["grad_delay"]),
        transfer_model=TransferModel(
            base=DurationModel.parse(opts["transfer_base"]),
            per_byte_ms=opts["transfer_per_byte_ms"]),
        timing_mode=opts["timing_mode"],
        stage_durations=durations,
        deterministic=opts["deterministic"],
        seed=opts["seed"],
    )


def _resolve_sync(opts: dict, g) -> int:
    if opts["sync"] == "auto":
        return compute_sync_period(g.num_nodes, g.num_edges, opts["devices"])
    period = int(opts["sync"])
    if period < 1:
        raise ConfigError("sync period must be at least 1")
    return period


def _probe_config(opts: dict):
    """Single-device probe used to measure per-stage costs.

    Serial replay takes its stage times from the duration models alone, so
    wall-clock probes must run the threaded path.
    """
    probe = build_pipeline_config(opts, queue_capacity=2, sync_period=1)
    probe.deterministic = probe.timing_mode == "simulated"
    return probe


def _resolve_queue(opts: dict, g, settings: bench.TrainSettings) -> int:
    if opts["queue"] != "auto":
        depth = int(opts["queue"])
        if depth < 1:
            raise ConfigError("queue depth must be at least 1")
        return depth
    model = _init_model_for(g, settings, opts["seed"])
    prof = autotune.profile(g, model, _probe_config(opts))
    return autotune.auto_queue_size(prof, opts["memory"])


def _init_model_for(g, settings: bench.TrainSettings, seed: int):
    from . import nn
    return nn.init_model(g.feature_dim, settings.hidden_dim, g.num_classes,
                         num_layers=settings.num_layers, arch=settings.arch,
                         seed=seed, learning_rate=settings.learning_rate)


def _settings_from(opts: dict) -> bench.TrainSettings:
    return bench.TrainSettings(
        epochs=opts["epochs"], hidden_dim=opts["hidden_dim"],
        num_layers=opts["num_layers"], arch=opts["arch"],
        learning_rate=opts["learning_rate"],
        cache_fraction=opts["cache_fraction"],
        cache_mode=opts["cache_mode"], walk_steps=opts["walk_steps"],
        early_stop_delta=opts["early_stop_delta"],
        early_stop_batches=opts["early_stop_batches"],
        repeats=opts["repeats"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args: argparse.Namespace) -> int:
    opts = resolve_options(args)
    if args.kind == "power-law":
        g = graph.generate_power_law(args.nodes, exponent=args.exponent,
                                     seed=opts["seed"])
    else:
        sizes = [args.nodes // args.blocks] * args.blocks
        sizes[0] += args.nodes - sum(sizes)
        g = graph.generate_sbm(sizes, p_in=args.p_in, p_out=args.p_out,
                               seed=opts["seed"])
    g = graph.split_masks(g, ratios=(args.train_frac, args.val_frac,
                                     args.test_frac), seed=opts["seed"])
    graph.save(g, args.out)
    print(f"wrote {args.out}: {g.num_nodes} nodes, {g.num_edges} arcs, "
          f"{g.feature_dim} features, {g.num_classes} classes")
    return 0


def cmd_profile(args: argparse.Namespace) -> int:
    opts = resolve_options(args)
    g = graph.load(args.graph)
    settings = _settings_from(opts)
    config = _probe_config(opts)
    model = _init_model_for(g, settings, opts["seed"])
    prof = autotune.profile(g, model, config)
    cap = autotune.compute_cap(opts["memory"], prof.peak_memory_bytes,
                               prof.minibatch_memory_bytes)
    depth = autotune.compute_queue_size(prof.max_prep_ms(),
                                        prof.mean_compute_ms(), cap)
    out = {
        "batches": prof.num_batches,
        "sample_ms_mean": round(float(prof.sample_ms.mean()), 4),
        "transfer_ms_mean": round(float(prof.transfer_ms.mean()), 4),
        "compute_ms_mean": round(prof.mean_compute_ms(), 4),
        "max_prep_ms": round(prof.max_prep_ms(), 4),
        "peak_memory_bytes": prof.peak_memory_bytes,
        "minibatch_memory_bytes": prof.minibatch_memory_bytes,
        "memory_cap": cap,
        "queue_depth": depth,
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    opts = resolve_options(args)
    g = graph.load(args.graph)
    settings = _settings_from(opts)
    queue_depth = _resolve_queue(opts, g, settings)
    sync_period = _resolve_sync(opts, g)
    config = build_pipeline_config(opts, queue_depth, sync_period)
    results = bench.train_repeats(g, config, settings)
    report = bench.build_report(results[0], config, settings)
    payload = json.loads(report.to_json())
    if settings.repeats > 1:
        payload["repeat_summary"] = bench.summarize_repeats(results)
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(json.dumps(payload, sort_keys=True,
                                separators=(",", ":")))
    if args.trace:
        results[0].trace.dump_jsonl(args.trace)
    if args.history:
        bench.write_history_csv(results[0].history, args.history)
    print(text)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    opts = resolve_options(args)
    durations = parse_stage_durations(
        opts["durations"] or
        "sample=uniform:18,48,transfer=uniform:1,3,compute=11.89")
    queue_depth = 2 if opts["queue"] == "auto" else int(opts["queue"])
    res = simulate_timings(num_devices=opts["devices"],
                           queue_capacity=queue_depth,
                           sampler_workers=opts["sampler_workers"],
                           durations=durations, num_batches=args.batches,
                           seed=opts["seed"])
    seq = simulate_sequential(durations=durations, num_batches=args.batches,
                              seed=opts["seed"])
    busy = {d: round(utilization(res.trace, d), 4)
            for d in range(opts["devices"])}
    out = {
        "makespan_ms": round(res.makespan_ms, 3),
        "sequential_ms": round(seq.makespan_ms, 3),
        "speedup": round(seq.makespan_ms / res.makespan_ms, 3)
        if res.makespan_ms else float("nan"),
        "busy_fraction": busy,
        "queue_high_water": res.queue_high_water,
    }
    if args.trace:
        res.trace.dump_jsonl(args.trace)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    trace = Trace.load_jsonl(args.trace)
    devices = sorted({ev.device for ev in trace.events()
                      if ev.stage.startswith("compute")})
    out = {"devices": {}}
    for d in devices:
        times, raw, smooth = bench.utilization_timeseries(trace, d)
        out["devices"][str(d)] = {
            "utilization": round(utilization(trace, d), 4),
            "smoothed_peak": round(float(smooth.max()), 4) if smooth.size else 0.0,
        }
        if args.timeseries:
            path = args.timeseries.replace("{device}", str(d))
            bench.write_timeseries_csv(times, raw, smooth, path)
    if args.csv:
        bench.write_trace_csv(trace, args.csv)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mqpipe",
        description="pipelined multi-queue GNN training at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic graph")
    p_gen.add_argument("--kind", choices=["power-law", "sbm"],
                       default="power-law")
    p_gen.add_argument("--nodes", type=int, required=True)
    p_gen.add_argument("--exponent", type=float, default=2.1)
    p_gen.add_argument("--blocks", type=int, default=2)
    p_gen.add_argument("--p-in", type=float, default=0.1, dest="p_in")
    p_gen.add_argument("--p-out", type=float, default=0.01, dest="p_out")
    p_gen.add_argument("--train-frac", type=float, default=0.66,
                       dest="train_frac")
    p_gen.add_argument("--val-frac", type=float, default=0.10,
                       dest="val_frac")
    p_gen.add_argument("--test-frac", type=float, default=0.24,
                       dest="test_frac")
    p_gen.add_argument("--out", required=True)
    _add_common(p_gen)

    p_prof = sub.add_parser("profile", help="time stages and size the queue")
    p_prof.add_argument("--graph", required=True)
    p_prof.add_argument("--memory", type=int,
                        help="device memory budget in bytes")
    _add_common(p_prof)

    p_train = sub.add_parser("train", help="train a model on a graph file")
    p_train.add_argument("--graph", required=True)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p_train.add_argument("--arch", choices=["gcn", "sage"])
    p_train.add_argument("--learning-rate", type=float, dest="learning_rate")
    p_train.add_argument("--early-stop-delta", type=float,
                         dest="early_stop_delta")
    p_train.add_argument("--early-stop-batches", type=int,
                         dest="early_stop_batches")
    p_train.add_argument("--walk-steps", type=int, dest="walk_steps")
    p_train.add_argument("--report", help="write the run report JSON here")
    p_train.add_argument("--trace", help="write the event trace JSONL here")
    p_train.add_argument("--history", help="write per-epoch CSV here")
    _add_common(p_train)

    p_sim = sub.add_parser("simulate",
                           help="timing-only pipeline simulation")
    p_sim.add_argument("--batches", type=int, default=100)
    p_sim.add_argument("--trace", help="write the event trace JSONL here")
    _add_common(p_sim)

    p_rep = sub.add_parser("report", help="summarize a trace file")
    p_rep.add_argument("--trace", required=True)
    p_rep.add_argument("--csv", help="also dump the trace as CSV")
    p_rep.add_argument("--timeseries",
                       help="per-device utilization CSV path; '{device}' "
                            "is replaced by the device id")
    _add_common(p_rep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "generate": cmd_generate,
        "profile": cmd_profile,
        "train": cmd_train,
        "simulate": cmd_simulate,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (SamplingError, PipelineTimeout, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main(argv=sys.argv[1:]))
