"""Pipeline plumbing: trace schema, bounded queues, timing simulation.

The multi-queue layout per device is

    samplers -> [cpu queue] -> transfer -> [device queue] -> compute

with capacity-bounded queues between stages.  Producers block when a queue
is full; every stage boundary is recorded as a trace event, so queue
occupancy and utilization are reconstructable from the trace alone.
"""

from __future__ import annotations

import heapq
import json
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .timing import DurationModel

STAGES = ("sample", "enqueue_cpu", "transfer", "enqueue_dev",
          "compute_fwd", "compute_bwd", "grad_share", "grad_apply", "sync")

MS_TO_NS = 1_000_000


@dataclass(frozen=True)
class TraceEvent:
    stage: str
    device: int
    batch: int
    epoch: int
    t_start_ns: int
    t_end_ns: int

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.t_end_ns < self.t_start_ns:
            raise ValueError("event ends before it starts")

    def to_dict(self) -> dict:
        return {"stage": self.stage, "device": self.device, "batch": self.batch,
                "epoch": self.epoch, "t_start_ns": self.t_start_ns,
                "t_end_ns": self.t_end_ns}


class Trace:
    """Append-only, thread-safe event collector."""

    def __init__(self):
        self._events = []
        self._lock = threading.Lock()

    def add(self, stage: str, device: int, batch: int, epoch: int,
            t_start_ns: int, t_end_ns: int) -> None:
        ev = TraceEvent(stage, device, batch, epoch, int(t_start_ns),
                        int(t_end_ns))
        with self._lock:
            self._events.append(ev)

    def events(self, stage: str | None = None, device: int | None = None):
        with self._lock:
            evs = list(self._events)
        if stage is not None:
            evs = [e for e in evs if e.stage == stage]
        if device is not None:
            evs = [e for e in evs if e.device == device]
        return evs

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    def extend(self, other: "Trace") -> None:
        with self._lock, other._lock:
            self._events.extend(other._events)

    def dump_jsonl(self, path: str) -> None:
        with open(path, "w") as fh:
            for ev in self.events():
                fh.write(json.dumps(ev.to_dict()) + "\n")

    @staticmethod
    def load_jsonl(path: str) -> "Trace":
        tr = Trace()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                tr.add(d["stage"], d["device"], d["batch"], d["epoch"],
                       d["t_start_ns"], d["t_end_ns"])
        return tr


class PipelineTimeout(RuntimeError):
    """A queue operation starved past its deadline (likely deadlock)."""


class PipelineStopped(RuntimeError):
    """Another worker failed; this one is shutting down."""


class BoundedQueue:
    """Blocking FIFO with a hard capacity and bookkeeping counters.

    put/get record the key sequence so tests can verify conservation and
    FIFO order.  A shared stop event aborts blocked workers cleanly.
    """

    def __init__(self, capacity: int, name: str = "queue"):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.name = name
        self._items = deque()
        self._cond = threading.Condition()
        self.puts = 0
        self.gets = 0
        self.high_water = 0
        self.put_keys: list = []
        self.get_keys: list = []

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)

    def put(self, item, key=None, timeout: float = 60.0, stop=None) -> None:
        deadline = timeout
        with self._cond:
            while len(self._items) >= self.capacity:
                if stop is not None and stop.is_set():
                    raise PipelineStopped(self.name)
                if deadline <= 0:
                    raise PipelineTimeout(f"put on full {self.name}")
                self._cond.wait(min(0.05, deadline))
                deadline -= 0.05
            self._items.append(item)
            self.puts += 1
            if key is not None:
                self.put_keys.append(key)
            self.high_water = max(self.high_water, len(self._items))
            self._cond.notify_all()

    def get(self, timeout: float = 60.0, stop=None):
        deadline = timeout
        with self._cond:
            while not self._items:
                if stop is not None and stop.is_set():
                    raise PipelineStopped(self.name)
                if deadline <= 0:
                    raise PipelineTimeout(f"get on empty {self.name}")
                self._cond.wait(min(0.05, deadline))
                deadline -= 0.05
            item = self._items.popleft()
            self.gets += 1
            self._cond.notify_all()
            return item

    def record_get_key(self, key) -> None:
        with self._cond:
            self.get_keys.append(key)


def utilization(trace: Trace, device: int = 0, exclude: int = 20,
                min_for_exclusion: int = 60) -> float:
    """Fraction of the traced span the device spent in compute.

    Within each epoch, batches are ordered by compute start; when at least
    min_for_exclusion batches exist the first and last `exclude` are
    dropped to remove warmup and drain effects.  Epoch clocks restart at
    zero, so busy and span accumulate per epoch.  Idle-only traces yield 0.
    """
    events = [e for e in trace.events(device=device)
              if e.stage in ("compute_fwd", "compute_bwd")]
    if not events:
        return 0.0
    by_epoch: dict[int, dict[int, list]] = {}
    for e in events:
        by_epoch.setdefault(e.epoch, {}).setdefault(e.batch, []).append(e)
    busy = 0
    span = 0
    for per_batch in by_epoch.values():
        batches = sorted(per_batch.values(),
                         key=lambda evs: min(e.t_start_ns for e in evs))
        if len(batches) >= min_for_exclusion and len(batches) > 2 * exclude:
            batches = batches[exclude:-exclude]
        busy += sum(e.t_end_ns - e.t_start_ns for evs in batches for e in evs)
        span += (max(e.t_end_ns for evs in batches for e in evs)
                 - min(e.t_start_ns for evs in batches for e in evs))
    return busy / span if span > 0 else (1.0 if busy > 0 else 0.0)


# ---------------------------------------------------------------------------
# discrete-event timing simulation (no numerics, virtual clock)


@dataclass
class SimResult:
    trace: Trace
    makespan_ms: float
    queue_high_water: dict
    produced: int
    consumed: int


def _draw_durations(models: dict, num_batches: int, rng) -> dict:
    out = {}
    for stage in ("sample", "transfer", "compute"):
        model = models.get(stage, DurationModel("none"))
        out[stage] = np.array([model.sample(rng) for _ in range(num_batches)])
    return out


def simulate_timings(num_devices: int, queue_capacity: int,
                     sampler_workers: int, durations: dict,
                     num_batches: int, seed: int = 0,
                     epoch: int = 0) -> SimResult:
    """Event-driven simulation of the stage pipeline under a virtual clock.

    Each device runs `sampler_workers` parallel samplers, one transfer
    worker and one compute worker, joined by two capacity-bounded queues.
    Durations are drawn up front per (device, batch, stage), so results are
    bit-reproducible for a seed no matter how events interleave.
    """
    if num_batches < 0:
        raise ValueError("num_batches must be nonnegative")
    if sampler_workers < 1:
        raise ValueError("need at least one sampler worker")
    trace = Trace()
    high_water = {}
    makespan = 0.0
    produced = consumed = 0
    for device in range(num_devices):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, epoch, 7, device]))
        dur = _draw_durations(durations, num_batches, rng)
        res = _simulate_device(device, num_batches, queue_capacity,
                               sampler_workers, dur, trace, epoch)
        high_water[device] = res["high_water"]
        makespan = max(makespan, res["makespan"])
        produced += res["produced"]
        consumed += res["consumed"]
    return SimResult(trace=trace, makespan_ms=makespan,
                     queue_high_water=high_water, produced=produced,
                     consumed=consumed)


def _simulate_device(device: int, num_batches: int, capacity: int,
                     workers: int, dur: dict, trace: Trace, epoch: int):
    if capacity < 1:
        raise ValueError("capacity must be at least 1")
    s_dur, t_dur, c_dur = dur["sample"], dur["transfer"], dur["compute"]

    heap = []
    seq = 0

    def push(t, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (t, seq, kind, payload))
        seq += 1

    def emit(stage, batch, t0, t1):
        trace.add(stage, device, batch, epoch,
                  round(t0 * MS_TO_NS), round(t1 * MS_TO_NS))

    next_batch = 0
    cpu_q: deque = deque()
    dev_q: deque = deque()
    blocked_samplers: deque = deque()   # (worker, batch, sample_done_t)
    transfer_blocked = None             # (batch, transfer_done_t)
    transfer_busy = False
    compute_busy = False
    cpu_hw = dev_hw = 0
    produced = consumed = 0
    makespan = 0.0

    def sampler_start(worker, t):
        nonlocal next_batch
        if next_batch >= num_batches:
            return
        k = next_batch
        next_batch += 1
        push(t + s_dur[k], "s_done", (worker, k, t))

    def cpu_slot_freed(t):
        if blocked_samplers:
            worker, k, done_t = blocked_samplers.popleft()
            cpu_enqueue(k, done_t, t)
            sampler_start(worker, t)

    def cpu_enqueue(k, sample_done_t, t):
        nonlocal cpu_hw, produced
        cpu_q.append(k)
        cpu_hw = max(cpu_hw, len(cpu_q))
        produced += 1
        emit("enqueue_cpu", k, sample_done_t, t)
        transfer_pop(t)

    def transfer_pop(t):
        nonlocal transfer_busy
        if transfer_busy or transfer_blocked is not None or not cpu_q:
            return
        k = cpu_q.popleft()
        transfer_busy = True  # before waking producers, or they re-enter
        push(t + t_dur[k], "t_done", (k, t))
        cpu_slot_freed(t)

    def dev_enqueue(k, transfer_done_t, t):
        nonlocal dev_hw
        dev_q.append(k)
        dev_hw = max(dev_hw, len(dev_q))
        emit("enqueue_dev", k, transfer_done_t, t)
        compute_pop(t)

    def dev_slot_freed(t):
        nonlocal transfer_blocked, transfer_busy
        if transfer_blocked is not None:
            k, done_t = transfer_blocked
            transfer_blocked = None
            transfer_busy = False
            dev_enqueue(k, done_t, t)
            transfer_pop(t)

    def compute_pop(t):
        nonlocal compute_busy
        if compute_busy or not dev_q:
            return
        k = dev_q.popleft()
        compute_busy = True  # before waking the blocked transfer
        push(t + c_dur[k], "c_done", (k, t))
        dev_slot_freed(t)

    for w in range(workers):
        sampler_start(w, 0.0)

    while heap:
        t, _, kind, payload = heapq.heappop(heap)
        makespan = max(makespan, t)
        if kind == "s_done":
            worker, k, t_start = payload
            emit("sample", k, t_start, t)
            if len(cpu_q) < capacity:
                cpu_enqueue(k, t, t)
                sampler_start(worker, t)
            else:
                blocked_samplers.append((worker, k, t))
        elif kind == "t_done":
            k, t_start = payload
            emit("transfer", k, t_start, t)
            if len(dev_q) < capacity:
                transfer_busy = False
                dev_enqueue(k, t, t)
                transfer_pop(t)
            else:
                transfer_blocked = (k, t)  # holds the item, stays busy
        elif kind == "c_done":
            k, t_start = payload
            emit("compute_fwd", k, t_start, t)
            consumed += 1
            compute_busy = False
            compute_pop(t)

    return {"high_water": {"cpu": cpu_hw, "dev": dev_hw},
            "makespan": makespan, "produced": produced, "consumed": consumed}


def simulate_sequential(durations: dict, num_batches: int, seed: int = 0,
                        epoch: int = 0, device: int = 0) -> SimResult:
    """Unpipelined replay: each batch runs sample, transfer, compute
    back-to-back on one timeline.  Baseline for pipelining comparisons."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 7, device]))
    dur = _draw_durations(durations, num_batches, rng)
    trace = Trace()
    t = 0.0
    for k in range(num_batches):
        s, tr, c = dur["sample"][k], dur["transfer"][k], dur["compute"][k]
        trace.add("sample", device, k, epoch, round(t * MS_TO_NS),
                  round((t + s) * MS_TO_NS))
        t += s
        trace.add("enqueue_cpu", device, k, epoch, round(t * MS_TO_NS),
                  round(t * MS_TO_NS))
        trace.add("transfer", device, k, epoch, round(t * MS_TO_NS),
                  round((t + tr) * MS_TO_NS))
        t += tr
        trace.add("enqueue_dev", device, k, epoch, round(t * MS_TO_NS),
                  round(t * MS_TO_NS))
        trace.add("compute_fwd", device, k, epoch, round(t * MS_TO_NS),
                  round((t + c) * MS_TO_NS))
        t += c
    return SimResult(trace=trace, makespan_ms=t,
                     queue_high_water={device: {"cpu": 1, "dev": 1}},
                     produced=num_batches, consumed=num_batches)
