"""Queue sizing from measured stage timings and a device memory budget.

The queue depth balances two pressures: deep enough to hide preparation
(sampling + transfer) behind compute, shallow enough that staged batches
fit in device memory next to the model's working set.
"""

from __future__ import annotations

import math
import tracemalloc
from dataclasses import dataclass, replace

import numpy as np

from .pipeline import MS_TO_NS, Trace
from .runtime import PipelineConfig, run_epoch

DEFAULT_DEVICE_MEMORY = 24 * 2 ** 30
MEMORY_MARGIN = 0.075
WARMUP_BATCHES = 20
MIN_FOR_EXCLUSION = 60


class AutotuneError(ValueError):
    pass


def steady_slice(n: int, exclude: int = WARMUP_BATCHES,
                 min_for_exclusion: int = MIN_FOR_EXCLUSION) -> slice:
    """Trim warmup and cooldown batches, but only when enough remain."""
    if n >= min_for_exclusion and n > 2 * exclude:
        return slice(exclude, n - exclude)
    return slice(0, n)


@dataclass(frozen=True)
class TimingProfile:
    """Per-batch stage durations in ms, batch-id order, plus memory figures."""

    sample_ms: np.ndarray
    transfer_ms: np.ndarray
    compute_ms: np.ndarray
    peak_memory_bytes: int
    minibatch_memory_bytes: int

    @property
    def num_batches(self) -> int:
        return int(self.sample_ms.size)

    def max_prep_ms(self) -> float:
        """Worst-case preparation: max over batches of sample + transfer."""
        sl = steady_slice(self.num_batches)
        prep = self.sample_ms[sl] + self.transfer_ms[sl]
        if prep.size == 0:
            raise AutotuneError("profile holds no batches")
        return float(prep.max())

    def mean_compute_ms(self) -> float:
        sl = steady_slice(self.num_batches)
        if self.compute_ms[sl].size == 0:
            raise AutotuneError("profile holds no batches")
        return float(self.compute_ms[sl].mean())


def _durations_by_batch(trace: Trace, stages) -> dict:
    per_batch: dict[int, float] = {}
    for stage in stages:
        for ev in trace.events(stage=stage):
            per_batch[ev.batch] = (per_batch.get(ev.batch, 0.0)
                                   + (ev.t_end_ns - ev.t_start_ns) / MS_TO_NS)
    return per_batch


def profile_from_trace(trace: Trace, minibatch_memory_bytes: int,
                       peak_memory_bytes: int) -> TimingProfile:
    sample = _durations_by_batch(trace, ["sample"])
    transfer = _durations_by_batch(trace, ["transfer"])
    compute = _durations_by_batch(trace, ["compute_fwd", "compute_bwd"])
    ids = sorted(compute)
    if not ids:
        raise AutotuneError("trace holds no compute events to profile")
    return TimingProfile(
        sample_ms=np.array([sample.get(b, 0.0) for b in ids]),
        transfer_ms=np.array([transfer.get(b, 0.0) for b in ids]),
        compute_ms=np.array([compute[b] for b in ids]),
        peak_memory_bytes=int(peak_memory_bytes),
        minibatch_memory_bytes=int(minibatch_memory_bytes),
    )


def profile(g, model, config: PipelineConfig, cache=None,
            epoch: int = 0) -> TimingProfile:
    """Measure one single-device epoch and distill per-batch stage timings.

    The run uses a replica copy, so profiling never perturbs the model
    being tuned.
    """
    probe = replace(config, num_devices=1)
    started_here = not tracemalloc.is_tracing()
    if started_here:
        tracemalloc.start()
    tracemalloc.reset_peak()
    try:
        _, trace = run_epoch(g, cache, [model.copy()], probe, epoch=epoch)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if started_here:
            tracemalloc.stop()
    mb_bytes = config.batch_size * g.feature_dim * g.features.itemsize
    return profile_from_trace(trace, mb_bytes, peak)


def compute_cap(total_memory_bytes: int, peak_memory_bytes: int,
                minibatch_memory_bytes: int,
                margin: float = MEMORY_MARGIN) -> int:
    """How many staged minibatches fit beside the model's padded peak.

    Raises when even one staged batch does not fit: pipelining is then
    impossible at this batch size and the caller must shrink something.
    """
    if minibatch_memory_bytes <= 0:
        raise AutotuneError("minibatch memory must be positive")
    budget = total_memory_bytes - peak_memory_bytes * (1.0 + margin)
    cap = int(math.floor(budget / minibatch_memory_bytes))
    if cap < 1:
        raise AutotuneError(
            f"no headroom for staged batches: budget {budget:.0f} bytes, "
            f"minibatch {minibatch_memory_bytes} bytes")
    return cap


def compute_queue_size(max_prep_ms: float, mean_compute_ms: float,
                       cap: int) -> int:
    """Depth that hides preparation behind compute, clamped to [2, cap]."""
    if mean_compute_ms <= 0:
        raise AutotuneError("mean compute time must be positive")
    if cap < 1:
        raise AutotuneError("memory cap must allow at least one batch")
    depth = math.ceil(max_prep_ms / mean_compute_ms)
    return min(cap, max(2, depth))


def auto_queue_size(prof: TimingProfile,
                    total_memory_bytes: int = DEFAULT_DEVICE_MEMORY,
                    margin: float = MEMORY_MARGIN) -> int:
    cap = compute_cap(total_memory_bytes, prof.peak_memory_bytes,
                      prof.minibatch_memory_bytes, margin)
    return compute_queue_size(prof.max_prep_ms(), prof.mean_compute_ms(), cap)
