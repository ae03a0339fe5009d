"""Multi-device training runtime over the queue pipeline.

Two execution modes share the same per-batch logic and trace schema:

* threaded: sampler, transfer and compute workers per device, joined by
  bounded queues, wall-clock timestamps.  This is the production path.
* deterministic: every worker step is serialized onto one round-robin
  schedule with a virtual clock, so traces, losses and weights are
  bit-reproducible for a given seed.

Gradient flow in both modes: each compute result is broadcast to every
device's inbox (self included) with a modeled delivery delay; per-window
running means are applied in window order once all expected contributions
arrived; devices keep working on newer batches while older windows wait,
and all replicas rendezvous for a full model average every `sync_period`
applied windows and again at the epoch barrier.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cache import CacheState, gather_features, lookup
from .pipeline import (BoundedQueue, MS_TO_NS, PipelineStopped,
                       PipelineTimeout, Trace)
from .racom import (Accumulator, GradientInbox, GradientPacket, apply_update,
                    share_gradient, sync_models)
from .samplers import SamplerParams, build_minibatch
from .timing import NO_DELAY, DurationModel, TransferModel

_SENTINEL = object()


@dataclass
class PipelineConfig:
    num_devices: int = 1
    queue_capacity: int = 2
    sampler_workers: int = 1
    batch_size: int = 1024
    sampler: SamplerParams = field(default_factory=SamplerParams)
    optimizer: str = "adam"
    sync_period: int = 1
    delay_model: DurationModel = NO_DELAY
    transfer_model: TransferModel = field(default_factory=TransferModel)
    timing_mode: str = "real"            # real | simulated
    stage_durations: dict = field(default_factory=dict)
    deterministic: bool = False
    seed: int = 0
    queue_timeout: float = 60.0
    capture_weights: bool = False    # snapshot replica weights per applied window

    def validate(self) -> None:
        if self.num_devices < 1:
            raise ValueError("need at least one device")
        if self.queue_capacity < 1:
            raise ValueError("queue capacity must be at least 1")
        if self.sampler_workers < 1:
            raise ValueError("need at least one sampler worker per device")
        if self.sync_period < 1:
            raise ValueError("sync period must be at least 1")
        if self.timing_mode not in ("real", "simulated"):
            raise ValueError(f"unknown timing_mode {self.timing_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochStats:
    epoch: int
    losses: dict
    batches: int
    cache_hits: int = 0
    cache_misses: int = 0
    dropped_targets: int = 0
    sync_count: int = 0
    epoch_sync: int = 0
    applied_windows: dict = field(default_factory=dict)
    queue_high_water: dict = field(default_factory=dict)
    queue_keys: dict = field(default_factory=dict)
    weight_traces: dict = field(default_factory=dict)
    wall_ms: float = 0.0

    @property
    def mean_loss(self) -> float:
        if not self.losses:
            return float("nan")
        return float(np.mean(list(self.losses.values())))


def plan_epoch(g, config: PipelineConfig, epoch: int):
    """Shuffle training targets and deal batches round-robin to devices.

    Returns (per_device, expected) where per_device[d] is a list of
    (window, batch_id, targets) and expected[k] counts the devices that
    contribute a gradient to window k.
    """
    train_ids = np.flatnonzero(g.train_mask)
    if train_ids.size == 0:
        raise ValueError("graph has no training nodes")
    rng = np.random.default_rng(np.random.SeedSequence(
        [config.seed, epoch, 0]))
    perm = rng.permutation(train_ids)
    bs = config.batch_size
    batches = [perm[i:i + bs] for i in range(0, perm.size, bs)]
    per_device = [[] for _ in range(config.num_devices)]
    for j, targets in enumerate(batches):
        d = j % config.num_devices
        per_device[d].append((len(per_device[d]), j, targets))
    total_windows = max((len(lst) for lst in per_device), default=0)
    expected = [sum(1 for lst in per_device if len(lst) > k)
                for k in range(total_windows)]
    return per_device, expected


def batch_rng(config: PipelineConfig, epoch: int, batch_id: int):
    """Batch content depends only on (seed, epoch, batch_id), never on which
    worker thread builds it."""
    return np.random.default_rng(np.random.SeedSequence(
        [config.seed, epoch, 1, batch_id]))


def transfer_stage(batch, cache: CacheState | None, g, transfer_model, rng):
    """Serve cached feature rows, copy misses from the store, price the move.

    Returns (batch, delay_ms).  Counters on the cache are bumped through
    lookup; with no cache everything is a miss but nothing is counted.
    """
    ids = batch.input_ids
    if cache is not None:
        hits, misses = lookup(cache, ids)
        batch.cache_hits = int(hits.size)
        batch.cache_misses = int(misses.size)
        miss_bytes = int(misses.size) * g.feature_dim * g.features.itemsize
    else:
        miss_bytes = int(ids.size) * g.feature_dim * g.features.itemsize
    batch.features = gather_features(cache, g, ids)
    delay = transfer_model.delay_ms(miss_bytes, rng) if transfer_model else 0.0
    return batch, delay


class _Device:
    """Mutable per-device bookkeeping shared by both execution modes."""

    def __init__(self, device_id: int, replica, total_windows: int,
                 expected: list, config: PipelineConfig):
        self.id = device_id
        self.replica = replica
        self.inbox = GradientInbox()
        self.accumulator = Accumulator()
        self.total_windows = total_windows
        self.expected = expected
        self.config = config
        self.next_window = 0
        self.applied = 0
        self.next_milestone = config.sync_period
        self.losses: dict[int, float] = {}
        self.cache_hits = 0
        self.cache_misses = 0
        self.dropped = 0
        self.weight_trace: list = []

    def drain_and_apply(self, now_ms: float, trace: Trace, epoch: int,
                        budget: int | None = None):
        """Fold in arrived packets, then apply ready windows in order.

        `budget` caps how many windows may be applied, so a device parks
        exactly at a sync milestone instead of running past it; replicas
        then meet every rendezvous with equal step counts.  Returns the
        number of windows applied on this call.
        """
        for packet in self.inbox.drain(now_ms):
            self.accumulator.accumulate(packet)
        applied = 0
        while (self.next_window < self.total_windows
               and (budget is None or applied < budget)
               and self.accumulator.ready(self.next_window,
                                          self.expected[self.next_window])):
            mean = self.accumulator.finalize(self.next_window,
                                             self.expected[self.next_window])
            apply_update(self.replica, mean, self.config.optimizer)
            if self.config.capture_weights:
                self.weight_trace.append(
                    (self.next_window,
                     [w.copy() for w in self.replica.weights]))
            t = round(now_ms * MS_TO_NS)
            trace.add("grad_apply", self.id, self.next_window, epoch, t, t)
            self.next_window += 1
            self.applied += 1
            applied += 1
        return applied

    def done(self) -> bool:
        return self.next_window >= self.total_windows


def _stage_models(config: PipelineConfig) -> dict:
    models = {s: DurationModel("none") for s in ("sample", "transfer", "compute")}
    if config.timing_mode == "simulated":
        models.update(config.stage_durations)
    return models


def run_epoch(g, cache: CacheState | None, replicas: list,
              config: PipelineConfig, epoch: int = 0,
              trace: Trace | None = None):
    """Train one epoch across all devices; returns (EpochStats, Trace).

    Every training target lands in exactly one batch.  The epoch ends with
    all gradient windows applied on every replica and, for multi-device
    runs, an epoch-barrier model average.
    """
    config.validate()
    if len(replicas) != config.num_devices:
        raise ValueError("one model replica per device required")
    if trace is None:
        trace = Trace()
    if config.deterministic:
        stats = _run_epoch_serial(g, cache, replicas, config, epoch, trace)
    else:
        stats = _run_epoch_threaded(g, cache, replicas, config, epoch, trace)
    return stats, trace


# ---------------------------------------------------------------------------
# deterministic serialized mode


def _run_epoch_serial(g, cache, replicas, config, epoch, trace) -> EpochStats:
    per_device, expected = plan_epoch(g, config, epoch)
    total_windows = len(expected)
    devices = [_Device(d, replicas[d], total_windows, expected, config)
               for d in range(config.num_devices)]
    delay_rngs = [np.random.default_rng(np.random.SeedSequence(
        [config.seed, epoch, 2, d])) for d in range(config.num_devices)]
    dur_rngs = [np.random.default_rng(np.random.SeedSequence(
        [config.seed, epoch, 3, d])) for d in range(config.num_devices)]
    xfer_rngs = [np.random.default_rng(np.random.SeedSequence(
        [config.seed, epoch, 4, d])) for d in range(config.num_devices)]
    models = _stage_models(config)
    inboxes = [dev.inbox for dev in devices]
    t_dev = [0.0] * config.num_devices
    sync_count = 0
    cached_mask = cache.cached_mask if cache is not None else None

    def emit(stage, d, batch, t0, t1):
        trace.add(stage, d, batch, epoch, round(t0 * MS_TO_NS),
                  round(t1 * MS_TO_NS))

    def apply_phase() -> bool:
        """Budgeted applies interleaved with milestone rendezvous.

        Devices apply at most up to the shared milestone; when all have
        parked there, the replicas average and everyone resumes.  Returns
        whether anything was applied or synced.
        """
        nonlocal sync_count
        moved = False
        progress = True
        while progress:
            progress = False
            milestone = devices[0].next_milestone
            for dev in devices:
                budget = milestone - dev.applied
                if budget > 0 and dev.drain_and_apply(
                        t_dev[dev.id], trace, epoch, budget):
                    progress = moved = True
            if (milestone <= total_windows
                    and min(dev.applied for dev in devices) >= milestone):
                t_sync = max(t_dev)
                sync_models([dev.replica for dev in devices])
                for d in range(config.num_devices):
                    t_dev[d] = t_sync
                    emit("sync", d, -1, t_sync, t_sync)
                for dev in devices:
                    dev.next_milestone += config.sync_period
                sync_count += 1
                progress = moved = True
        return moved

    for k in range(total_windows):
        # compute phase: each device handles its window-k batch
        for dev in devices:
            if k >= len(per_device[dev.id]):
                continue
            window, bid, targets = per_device[dev.id][k]
            d = dev.id
            rngb = batch_rng(config, epoch, bid)
            t0 = t_dev[d]
            batch = build_minibatch(g, targets, config.sampler, rngb,
                                    batch_id=bid, epoch=epoch,
                                    cached_mask=cached_mask)
            s_ms = models["sample"].sample(dur_rngs[d])
            emit("sample", d, bid, t0, t0 + s_ms)
            emit("enqueue_cpu", d, bid, t0 + s_ms, t0 + s_ms)
            batch, xfer_delay = transfer_stage(batch, cache, g,
                                               config.transfer_model,
                                               xfer_rngs[d])
            t1 = t0 + s_ms
            t_ms = models["transfer"].sample(dur_rngs[d]) + xfer_delay
            emit("transfer", d, bid, t1, t1 + t_ms)
            emit("enqueue_dev", d, bid, t1 + t_ms, t1 + t_ms)
            t2 = t1 + t_ms
            c_ms = models["compute"].sample(dur_rngs[d])
            logits, fw_cache = nn.forward(batch, dev.replica, return_cache=True)
            loss, dlogits = nn.batch_loss(logits, batch.target_labels)
            grads = nn.backward(batch, dev.replica, fw_cache, dlogits)
            emit("compute_fwd", d, bid, t2, t2 + c_ms / 2)
            emit("compute_bwd", d, bid, t2 + c_ms / 2, t2 + c_ms)
            t_dev[d] = t2 + c_ms
            dev.losses[bid] = loss
            dev.cache_hits += batch.cache_hits
            dev.cache_misses += batch.cache_misses
            dev.dropped += batch.dropped_targets
            packet = GradientPacket(source_device=d, iteration=window,
                                    grads=grads, loss=loss)
            emit("grad_share", d, bid, t_dev[d], t_dev[d])
            share_gradient(packet, inboxes, t_dev[d], config.delay_model,
                           delay_rngs[d])
        apply_phase()

    # epoch drain: advance virtual clocks to pending arrivals until all
    # windows everywhere are applied
    while any(not dev.done() for dev in devices):
        progressed = apply_phase()
        for dev in devices:
            if dev.done():
                continue
            nxt = dev.inbox.next_arrival()
            if nxt is not None and nxt > t_dev[dev.id]:
                t_dev[dev.id] = nxt
                progressed = True
        if not progressed:
            missing = {dev.id: dev.next_window for dev in devices
                       if not dev.done()}
            raise PipelineTimeout(f"epoch drain stalled at windows {missing}")

    epoch_sync = 0
    if config.num_devices > 1:
        t_sync = max(t_dev)
        sync_models(replicas)
        for d in range(config.num_devices):
            emit("sync", d, -1, t_sync, t_sync)
        epoch_sync = 1

    losses = {}
    for dev in devices:
        losses.update(dev.losses)
    return EpochStats(
        epoch=epoch,
        losses=losses,
        batches=sum(len(lst) for lst in per_device),
        cache_hits=sum(dev.cache_hits for dev in devices),
        cache_misses=sum(dev.cache_misses for dev in devices),
        dropped_targets=sum(dev.dropped for dev in devices),
        sync_count=sync_count,
        epoch_sync=epoch_sync,
        applied_windows={dev.id: dev.applied for dev in devices},
        queue_high_water={d: {"cpu": 1 if per_device[d] else 0,
                              "dev": 1 if per_device[d] else 0}
                          for d in range(config.num_devices)},
        queue_keys={d: {"cpu_put": [b for _, b, _ in per_device[d]],
                        "cpu_get": [b for _, b, _ in per_device[d]],
                        "dev_put": [b for _, b, _ in per_device[d]],
                        "dev_get": [b for _, b, _ in per_device[d]]}
                    for d in range(config.num_devices)},
        weight_traces={dev.id: dev.weight_trace for dev in devices},
        wall_ms=max(t_dev) if t_dev else 0.0,
    )


# ---------------------------------------------------------------------------
# threaded real mode


def _run_epoch_threaded(g, cache, replicas, config, epoch, trace) -> EpochStats:
    per_device, expected = plan_epoch(g, config, epoch)
    total_windows = len(expected)
    devices = [_Device(d, replicas[d], total_windows, expected, config)
               for d in range(config.num_devices)]
    inboxes = [dev.inbox for dev in devices]
    cached_mask = cache.cached_mask if cache is not None else None
    models = _stage_models(config)
    simulated = config.timing_mode == "simulated"

    stop = threading.Event()
    errors: list = []
    sync_lock = threading.Lock()
    sync_counter = [0]
    t0 = time.monotonic_ns()

    def now_ms() -> float:
        return (time.monotonic_ns() - t0) / MS_TO_NS

    def emit(stage, d, batch, start_ms, end_ms):
        trace.add(stage, d, batch, epoch, round(start_ms * MS_TO_NS),
                  round(end_ms * MS_TO_NS))

    def sync_action():
        sync_models(replicas)
        t = now_ms()
        for d in range(config.num_devices):
            emit("sync", d, -1, t, t)
        with sync_lock:
            sync_counter[0] += 1

    barrier = threading.Barrier(config.num_devices, action=sync_action)

    cpu_queues = [BoundedQueue(config.queue_capacity, f"cpu[{d}]")
                  for d in range(config.num_devices)]
    dev_queues = [BoundedQueue(config.queue_capacity, f"dev[{d}]")
                  for d in range(config.num_devices)]
    claim_locks = [threading.Lock() for _ in range(config.num_devices)]
    claim_next = [0] * config.num_devices

    def fail(exc: BaseException):
        errors.append(exc)
        stop.set()
        barrier.abort()

    def sampler_main(d: int, worker: int):
        dur_rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed, epoch, 3, d, worker]))
        try:
            while not stop.is_set():
                with claim_locks[d]:
                    i = claim_next[d]
                    if i >= len(per_device[d]):
                        break
                    claim_next[d] = i + 1
                window, bid, targets = per_device[d][i]
                t_s = now_ms()
                batch = build_minibatch(g, targets, config.sampler,
                                        batch_rng(config, epoch, bid),
                                        batch_id=bid, epoch=epoch,
                                        cached_mask=cached_mask)
                if simulated:
                    _sleep_ms(models["sample"].sample(dur_rng))
                t_done = now_ms()
                emit("sample", d, bid, t_s, t_done)
                cpu_queues[d].put((window, batch), key=bid,
                                  timeout=config.queue_timeout, stop=stop)
                emit("enqueue_cpu", d, bid, t_done, now_ms())
            cpu_queues[d].put(_SENTINEL, timeout=config.queue_timeout,
                              stop=stop)
        except PipelineStopped:
            pass
        except BaseException as exc:  # noqa: BLE001 - reported to the main thread
            fail(exc)

    def transfer_main(d: int):
        xfer_rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed, epoch, 4, d]))
        dur_rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed, epoch, 5, d]))
        sentinels = 0
        try:
            while sentinels < config.sampler_workers and not stop.is_set():
                item = cpu_queues[d].get(timeout=config.queue_timeout,
                                         stop=stop)
                if item is _SENTINEL:
                    sentinels += 1
                    continue
                window, batch = item
                cpu_queues[d].record_get_key(batch.batch_id)
                t_s = now_ms()
                batch, delay_ms = transfer_stage(batch, cache, g,
                                                 config.transfer_model,
                                                 xfer_rng)
                if simulated:
                    delay_ms += models["transfer"].sample(dur_rng)
                _sleep_ms(delay_ms)
                t_done = now_ms()
                emit("transfer", d, batch.batch_id, t_s, t_done)
                dev_queues[d].put((window, batch), key=batch.batch_id,
                                  timeout=config.queue_timeout, stop=stop)
                emit("enqueue_dev", d, batch.batch_id, t_done, now_ms())
            dev_queues[d].put(_SENTINEL, timeout=config.queue_timeout,
                              stop=stop)
        except PipelineStopped:
            pass
        except BaseException as exc:  # noqa: BLE001
            fail(exc)

    def apply_and_rendezvous(dev: _Device) -> int:
        """Budgeted drain/apply with milestone barriers.

        Never applies past the next milestone; parks at the barrier there,
        so every replica reaches sync_models with identical step counts.
        """
        total = 0
        while True:
            budget = dev.next_milestone - dev.applied
            total += dev.drain_and_apply(now_ms(), trace, epoch, budget)
            if (dev.applied >= dev.next_milestone
                    and dev.next_milestone <= total_windows):
                try:
                    barrier.wait(timeout=config.queue_timeout)
                except threading.BrokenBarrierError:
                    if not stop.is_set() and not errors:
                        fail(PipelineTimeout(
                            f"device {dev.id} timed out at the "
                            f"window-{dev.next_milestone} rendezvous"))
                    raise
                dev.next_milestone += config.sync_period
                continue
            return total

    def compute_main(d: int):
        dev = devices[d]
        delay_rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed, epoch, 2, d]))
        dur_rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed, epoch, 6, d]))
        try:
            while not stop.is_set():
                item = dev_queues[d].get(timeout=config.queue_timeout,
                                         stop=stop)
                if item is _SENTINEL:
                    break
                window, batch = item
                dev_queues[d].record_get_key(batch.batch_id)
                t_s = now_ms()
                logits, fw_cache = nn.forward(batch, dev.replica,
                                              return_cache=True)
                if simulated:
                    _sleep_ms(models["compute"].sample(dur_rng) / 2)
                t_mid = now_ms()
                emit("compute_fwd", d, batch.batch_id, t_s, t_mid)
                loss, dlogits = nn.batch_loss(logits, batch.target_labels)
                grads = nn.backward(batch, dev.replica, fw_cache, dlogits)
                if simulated:
                    _sleep_ms(models["compute"].sample(dur_rng) / 2)
                t_done = now_ms()
                emit("compute_bwd", d, batch.batch_id, t_mid, t_done)
                dev.losses[batch.batch_id] = loss
                dev.cache_hits += batch.cache_hits
                dev.cache_misses += batch.cache_misses
                dev.dropped += batch.dropped_targets
                packet = GradientPacket(source_device=d, iteration=window,
                                        grads=grads, loss=loss)
                emit("grad_share", d, batch.batch_id, t_done, t_done)
                share_gradient(packet, inboxes, t_done, config.delay_model,
                               delay_rng)
                apply_and_rendezvous(dev)
            # epoch drain: wait out pending deliveries
            last_progress = time.monotonic()
            while not dev.done() and not stop.is_set():
                if apply_and_rendezvous(dev):
                    last_progress = time.monotonic()
                    continue
                if time.monotonic() - last_progress > config.queue_timeout:
                    raise PipelineTimeout(
                        f"device {d} stalled waiting for window {dev.next_window}")
                time.sleep(0.0002)
        except (PipelineStopped, threading.BrokenBarrierError):
            pass
        except BaseException as exc:  # noqa: BLE001
            fail(exc)

    threads = []
    for d in range(config.num_devices):
        for w in range(config.sampler_workers):
            threads.append(threading.Thread(target=sampler_main, args=(d, w),
                                            name=f"sampler-{d}-{w}"))
        threads.append(threading.Thread(target=transfer_main, args=(d,),
                                        name=f"transfer-{d}"))
        threads.append(threading.Thread(target=compute_main, args=(d,),
                                        name=f"compute-{d}"))
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]

    epoch_sync = 0
    if config.num_devices > 1:
        sync_models(replicas)
        t = now_ms()
        for d in range(config.num_devices):
            emit("sync", d, -1, t, t)
        epoch_sync = 1

    losses = {}
    for dev in devices:
        losses.update(dev.losses)
    return EpochStats(
        epoch=epoch,
        losses=losses,
        batches=sum(len(lst) for lst in per_device),
        cache_hits=sum(dev.cache_hits for dev in devices),
        cache_misses=sum(dev.cache_misses for dev in devices),
        dropped_targets=sum(dev.dropped for dev in devices),
        sync_count=sync_counter[0],
        epoch_sync=epoch_sync,
        applied_windows={dev.id: dev.applied for dev in devices},
        queue_high_water={d: {"cpu": cpu_queues[d].high_water,
                              "dev": dev_queues[d].high_water}
                          for d in range(config.num_devices)},
        queue_keys={d: {"cpu_put": list(cpu_queues[d].put_keys),
                        "cpu_get": list(cpu_queues[d].get_keys),
                        "dev_put": list(dev_queues[d].put_keys),
                        "dev_get": list(dev_queues[d].get_keys)}
                    for d in range(config.num_devices)},
        weight_traces={dev.id: dev.weight_trace for dev in devices},
        wall_ms=now_ms(),
    )


def _sleep_ms(ms: float) -> None:
    if ms > 0:
        time.sleep(ms / 1000.0)
