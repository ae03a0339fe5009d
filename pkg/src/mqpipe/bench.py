"""End-to-end training runs, reports and utilization analysis.

This module owns everything above a single epoch: cache refresh policy,
early stopping on validation accuracy, best-snapshot test evaluation,
repeat aggregation and serialization of results.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .cache import cache_probs_degree, cache_probs_walk, refresh_cache
from .pipeline import MS_TO_NS, Trace, utilization
from .runtime import PipelineConfig, run_epoch

UTIL_BUCKET_MS = 1.0
UTIL_WINDOW_MS = 150.0


@dataclass
class TrainSettings:
    epochs: int = 10
    hidden_dim: int = 64
    num_layers: int = 2
    arch: str = "gcn"
    learning_rate: float = 0.001
    cache_fraction: float = 0.2
    cache_mode: str = "auto"           # auto | degree | walk | off
    walk_steps: int = 2
    early_stop_delta: float = 0.01
    early_stop_batches: int = 200
    repeats: int = 1

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.arch not in ("gcn", "sage"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.cache_mode not in ("auto", "degree", "walk", "off"):
            raise ValueError(f"unknown cache mode {self.cache_mode!r}")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")


@dataclass
class TrainResult:
    seed: int
    history: list
    best_val_acc: float
    best_epoch: int
    test_acc: float
    epochs_run: int
    stopped_early: bool
    trace: Trace
    model: object
    cache_hits: int = 0
    cache_misses: int = 0


def choose_cache_mode(g, mode: str) -> str:
    """Most-training-reach heuristic: with a majority of nodes in the
    training set, plain in-degree tracks reuse; with a small training set,
    weight by what sampling can actually reach from it."""
    if mode != "auto":
        return mode
    train_fraction = float(g.train_mask.mean())
    return "degree" if train_fraction >= 0.5 else "walk"


def _cache_probs(g, mode: str, config: PipelineConfig):
    if mode == "degree":
        return cache_probs_degree(g)
    return cache_probs_walk(g, config.sampler.fanout,
                            config.sampler.num_layers)


def evaluate(g, model, mask) -> float:
    logits = nn.full_forward(g, model)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return 0.0
    return nn.accuracy(logits[idx], g.labels[idx])


def train(g, config: PipelineConfig, settings: TrainSettings,
          seed: int | None = None) -> TrainResult:
    """Train to convergence or the epoch budget; returns the best snapshot.

    Validation accuracy is checked after each epoch.  If it fails to beat
    the best seen by `early_stop_delta` for a stretch of batches at least
    `early_stop_batches` long, training stops.
    """
    settings.validate()
    config.validate()
    if seed is None:
        seed = config.seed
    base = nn.init_model(g.feature_dim, settings.hidden_dim, g.num_classes,
                         num_layers=settings.num_layers, arch=settings.arch,
                         seed=seed, learning_rate=settings.learning_rate)
    replicas = [base.copy() for _ in range(config.num_devices)]
    mode = choose_cache_mode(g, settings.cache_mode)
    trace = Trace()
    history = []
    best_val = -1.0
    best_state = replicas[0].copy()
    best_epoch = -1
    batches_since_improvement = 0
    stopped_early = False
    epochs_run = 0
    cache_hits = cache_misses = 0

    for epoch in range(settings.epochs):
        cache = None
        if mode != "off" and settings.cache_fraction > 0:
            probs = _cache_probs(g, mode, config)
            cache_rng = np.random.default_rng(np.random.SeedSequence(
                [seed, epoch, 8]))
            cache = refresh_cache(g, probs, settings.cache_fraction, cache_rng)
        stats, _ = run_epoch(g, cache, replicas, config, epoch=epoch,
                             trace=trace)
        epochs_run += 1
        cache_hits += stats.cache_hits
        cache_misses += stats.cache_misses
        val_acc = evaluate(g, replicas[0], g.val_mask)
        history.append({
            "epoch": epoch,
            "mean_loss": stats.mean_loss,
            "val_acc": val_acc,
            "batches": stats.batches,
            "sync_count": stats.sync_count,
            "cache_hits": stats.cache_hits,
            "cache_misses": stats.cache_misses,
            "dropped_targets": stats.dropped_targets,
        })
        if val_acc > best_val:
            best_state = replicas[0].copy()
            best_epoch = epoch
        if val_acc >= best_val + settings.early_stop_delta:
            batches_since_improvement = 0
        else:
            batches_since_improvement += stats.batches
        best_val = max(best_val, val_acc)
        if batches_since_improvement >= settings.early_stop_batches:
            stopped_early = True
            break

    test_acc = evaluate(g, best_state, g.test_mask)
    return TrainResult(seed=seed, history=history, best_val_acc=best_val,
                       best_epoch=best_epoch, test_acc=test_acc,
                       epochs_run=epochs_run, stopped_early=stopped_early,
                       trace=trace, model=best_state,
                       cache_hits=cache_hits, cache_misses=cache_misses)


def train_repeats(g, config: PipelineConfig,
                  settings: TrainSettings) -> list:
    """Independent runs with offset seeds; model init and data order differ,
    graph and configuration stay fixed."""
    return [train(g, config, settings, seed=config.seed + i)
            for i in range(settings.repeats)]


def summarize_repeats(results: list) -> dict:
    accs = np.array([r.test_acc for r in results], dtype=np.float64)
    vals = np.array([r.best_val_acc for r in results], dtype=np.float64)
    return {
        "repeats": len(results),
        "test_acc_mean": float(accs.mean()),
        "test_acc_std": float(accs.std()),
        "val_acc_mean": float(vals.mean()),
        "val_acc_std": float(vals.std()),
        "epochs_run": [r.epochs_run for r in results],
    }


# ---------------------------------------------------------------------------
# reporting


def config_echo(config: PipelineConfig) -> dict:
    sp = config.sampler
    return {
        "num_devices": config.num_devices,
        "queue_capacity": config.queue_capacity,
        "sampler_workers": config.sampler_workers,
        "batch_size": config.batch_size,
        "method": sp.method,
        "fanout": sp.fanout,
        "nodes_per_layer": sp.nodes_per_layer,
        "num_layers": sp.num_layers,
        "flat": sp.flat,
        "debias": sp.debias,
        "optimizer": config.optimizer,
        "sync_period": config.sync_period,
        "delay_model": config.delay_model.spec,
        "transfer_base": config.transfer_model.base.spec,
        "transfer_per_byte_ms": config.transfer_model.per_byte_ms,
        "timing_mode": config.timing_mode,
        "stage_durations": {k: m.spec
                            for k, m in sorted(config.stage_durations.items())},
        "deterministic": config.deterministic,
        "seed": config.seed,
    }


def trace_summary(trace: Trace) -> dict:
    events = trace.events()
    per_stage: dict[str, int] = {}
    for ev in events:
        per_stage[ev.stage] = per_stage.get(ev.stage, 0) + 1
    makespan = max((ev.t_end_ns for ev in events), default=0)
    return {
        "events": len(events),
        "per_stage": dict(sorted(per_stage.items())),
        "makespan_ms": makespan / MS_TO_NS,
    }


@dataclass
class RunReport:
    config: dict
    settings: dict
    seed: int
    history: list
    best_val_acc: float
    best_epoch: int
    test_acc: float
    epochs_run: int
    stopped_early: bool
    trace: dict
    utilization: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Canonical bytes: sorted keys, fixed separators, no timestamps."""
        return json.dumps(asdict(self), sort_keys=True,
                          separators=(",", ":"), allow_nan=False)


def build_report(result: TrainResult, config: PipelineConfig,
                 settings: TrainSettings) -> RunReport:
    util = {}
    for d in range(config.num_devices):
        try:
            util[str(d)] = round(utilization(result.trace, d), 6)
        except ValueError:
            util[str(d)] = 0.0
    history = [{k: (round(v, 6) if isinstance(v, float) else v)
                for k, v in row.items()} for row in result.history]
    return RunReport(
        config=config_echo(config),
        settings=asdict(settings),
        seed=result.seed,
        history=history,
        best_val_acc=round(result.best_val_acc, 6),
        best_epoch=result.best_epoch,
        test_acc=round(result.test_acc, 6),
        epochs_run=result.epochs_run,
        stopped_early=result.stopped_early,
        trace=trace_summary(result.trace),
        utilization=util,
    )


# ---------------------------------------------------------------------------
# utilization timeseries


def utilization_timeseries(trace: Trace, device: int,
                           bucket_ms: float = UTIL_BUCKET_MS,
                           window_ms: float = UTIL_WINDOW_MS):
    """Busy fraction per bucket plus a trailing sliding mean.

    Busy means a compute stage is in flight on the device.  The sliding
    window is truncated at the start of the run rather than zero-padded,
    so early values average only what has actually elapsed.

    Returns (times_ms, raw, smooth) arrays of equal length.
    """
    events = [ev for ev in trace.events(device=device)
              if ev.stage in ("compute_fwd", "compute_bwd")]
    if not events:
        return (np.zeros(0), np.zeros(0), np.zeros(0))
    # epoch clocks restart at zero; stack epochs end to end on one axis,
    # with offsets from the whole trace so device series stay aligned
    epoch_end: dict[int, int] = {}
    for ev in trace.events():
        epoch_end[ev.epoch] = max(epoch_end.get(ev.epoch, 0), ev.t_end_ns)
    offset = {}
    end_ns = 0
    for ep in sorted(epoch_end):
        offset[ep] = end_ns
        end_ns += epoch_end[ep]
    n = int(np.ceil(end_ns / (bucket_ms * MS_TO_NS)))
    n = max(n, 1)
    raw = np.zeros(n)
    bucket_ns = bucket_ms * MS_TO_NS
    for ev in events:
        start = ev.t_start_ns + offset[ev.epoch]
        end = ev.t_end_ns + offset[ev.epoch]
        lo = int(start // bucket_ns)
        hi = int(np.ceil(end / bucket_ns))
        for b in range(lo, min(hi, n)):
            b0 = b * bucket_ns
            b1 = b0 + bucket_ns
            overlap = min(end, b1) - max(start, b0)
            if overlap > 0:
                raw[b] += overlap / bucket_ns
    np.clip(raw, 0.0, 1.0, out=raw)
    w = max(1, int(round(window_ms / bucket_ms)))
    csum = np.concatenate([[0.0], np.cumsum(raw)])
    idx = np.arange(1, n + 1)
    lo = np.maximum(0, idx - w)
    smooth = (csum[idx] - csum[lo]) / (idx - lo)
    times = (np.arange(n) + 1) * bucket_ms
    return times, raw, smooth


# ---------------------------------------------------------------------------
# CSV output


def write_trace_csv(trace: Trace, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "device", "batch", "epoch",
                         "t_start_ns", "t_end_ns"])
        for ev in trace.events():
            writer.writerow([ev.stage, ev.device, ev.batch, ev.epoch,
                             ev.t_start_ns, ev.t_end_ns])


def write_history_csv(history: list, path: str) -> None:
    if not history:
        with open(path, "w", newline="") as fh:
            fh.write("")
        return
    keys = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)


def write_timeseries_csv(times, raw, smooth, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_ms", "busy", "busy_smooth"])
        for t, r, s in zip(times, raw, smooth):
            writer.writerow([f"{t:.3f}", f"{r:.6f}", f"{s:.6f}"])
