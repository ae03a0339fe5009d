"""Asynchronous gradient sharing with consistent periodic synchronization.

Every device broadcasts each mini-batch gradient to every device's inbox,
its own included, so all replicas fold in the same packets through the same
code path.  Per-iteration accumulators hold a running mean that is exact
under any arrival order; a device applies an iteration's mean only once all
expected contributions arrived, and keeps computing newer batches while it
waits.  Replicas additionally rendezvous every `period` applied iterations
to average weights and optimizer moments outright.
"""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nn import ModelState, adam_step, sgd_step


@dataclass
class GradientPacket:
    source_device: int
    iteration: int
    grads: list
    loss: float = 0.0


class AccumulatorError(RuntimeError):
    pass


class Accumulator:
    """Running mean of gradient packets, keyed by iteration window.

    new = current + (packet - current) / count  with count incremented
    first, which makes the stored value the exact arithmetic mean of the
    packets seen so far regardless of arrival order.
    """

    def __init__(self):
        self._windows: dict[int, tuple[list, int]] = {}

    def accumulate(self, packet: GradientPacket) -> None:
        mean, count = self._windows.get(packet.iteration, (None, 0))
        count += 1
        if mean is None:
            mean = [np.asarray(g, dtype=np.float64).copy() for g in packet.grads]
        else:
            for acc, g in zip(mean, packet.grads):
                if acc.shape != g.shape:
                    raise AccumulatorError("gradient shape mismatch")
                acc += (np.asarray(g, dtype=np.float64) - acc) / count
        self._windows[packet.iteration] = (mean, count)

    def count(self, iteration: int) -> int:
        return self._windows.get(iteration, (None, 0))[1]

    def ready(self, iteration: int, expected: int) -> bool:
        return self.count(iteration) == expected

    def finalize(self, iteration: int, expected: int) -> list:
        """Return the window's mean and zero it out.  Exactly `expected`
        contributions must be present."""
        if iteration not in self._windows:
            raise AccumulatorError(f"finalize before accumulate: window {iteration}")
        mean, count = self._windows.pop(iteration)
        if count != expected:
            self._windows[iteration] = (mean, count)
            raise AccumulatorError(
                f"window {iteration} has {count} contributions, expected {expected}")
        return mean

    def pending(self) -> list:
        return sorted(self._windows)


def apply_update(state: ModelState, grads: list, optimizer: str) -> ModelState:
    """One optimizer step with the accumulated mean gradient."""
    if optimizer == "adam":
        return adam_step(state, grads)
    if optimizer == "sgd":
        return sgd_step(state, grads)
    raise ValueError(f"unknown optimizer {optimizer!r}")


def compute_sync_period(num_nodes: int, num_edges: int, num_devices: int,
                        scale_k: float = 1.0) -> int:
    """Iterations between full model syncs: ceil(k * sqrt(V) / sqrt(G*E)).

    Dense graphs drive the period to the floor of 1 (sync every iteration);
    edge-free graphs make the ratio undefined, so the edge term drops out
    with a warning.
    """
    if num_nodes <= 0 or num_devices <= 0:
        raise ValueError("need positive node and device counts")
    if num_edges == 0:
        warnings.warn("sync period on an edge-free graph: ignoring edge term")
        period = math.ceil(scale_k * math.sqrt(num_nodes))
    else:
        period = math.ceil(scale_k * math.sqrt(num_nodes)
                           / math.sqrt(num_devices * num_edges))
    return max(1, period)


def staleness_cost(period: float, alpha: float, beta: float, num_nodes: int,
                   num_edges: int, num_devices: int) -> float:
    """Drift-vs-overhead tradeoff: alpha*P*E + beta*(1/P)*(V/G)."""
    if period <= 0:
        raise ValueError("period must be positive")
    return (alpha * period * num_edges
            + beta * (1.0 / period) * (num_nodes / num_devices))


def sync_models(replicas: list) -> None:
    """Average weights and Adam moments across replicas, in place.

    All replicas receive the same mean arrays, so pairwise differences are
    exactly zero afterwards.  Replicas must agree on step counts (they do at
    a rendezvous, having applied the same number of windows).
    """
    if not replicas:
        raise ValueError("no replicas to sync")
    steps = {r.step_count for r in replicas}
    if len(steps) != 1:
        raise RuntimeError(f"sync with unequal step counts: {sorted(steps)}")
    n = len(replicas)
    for l in range(len(replicas[0].weights)):
        mean_w = sum(r.weights[l].astype(np.float64) for r in replicas) / n
        mean_m = sum(r.m[l].astype(np.float64) for r in replicas) / n
        mean_v = sum(r.v[l].astype(np.float64) for r in replicas) / n
        for r in replicas:
            dt = r.weights[l].dtype
            r.weights[l][...] = mean_w.astype(dt)
            r.m[l][...] = mean_m.astype(dt)
            r.v[l][...] = mean_v.astype(dt)


class GradientInbox:
    """Per-device mailbox of (arrival_time_ms, packet), producer-side
    non-blocking.  Drains are ordered by arrival time then sequence."""

    def __init__(self):
        self._items = []
        self._seq = 0
        self._lock = threading.Lock()

    def deliver(self, arrival_ms: float, packet: GradientPacket) -> None:
        with self._lock:
            self._items.append((arrival_ms, self._seq, packet))
            self._seq += 1

    def drain(self, now_ms: float) -> list:
        """Remove and return packets whose arrival time has passed."""
        with self._lock:
            due = [it for it in self._items if it[0] <= now_ms]
            self._items = [it for it in self._items if it[0] > now_ms]
        return [p for _, _, p in sorted(due)]

    def next_arrival(self) -> float | None:
        with self._lock:
            return min((it[0] for it in self._items), default=None)

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


def share_gradient(packet: GradientPacket, inboxes: list, now_ms: float,
                   delay_model, rng) -> list:
    """Broadcast a packet to every inbox with a per-destination delay draw.

    Returns the arrival times, indexed by destination device.
    """
    arrivals = []
    for inbox in inboxes:
        delay = delay_model.sample(rng) if delay_model is not None else 0.0
        arrival = now_ms + delay
        inbox.deliver(arrival, packet)
        arrivals.append(arrival)
    return arrivals
