"""Feature cache with importance-driven residency.

The cache holds feature rows for a fixed fraction of nodes, chosen by
weighted sampling without replacement from a per-node importance
distribution: in-degree (static) or an L-step sampling-reachability walk
from the training set.  Residency is recomputed at epoch boundaries.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .graph import GraphCSR
from .samplers import weighted_sample_without_replacement


@dataclass
class CacheState:
    """Resident node set plus hit/miss counters (counter access is locked)."""

    cached_ids: np.ndarray
    cached_mask: np.ndarray
    cached_features: np.ndarray
    fraction: float
    hits: int = 0
    misses: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def size(self) -> int:
        return int(self.cached_ids.size)

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


def cache_probs_degree(g: GraphCSR) -> np.ndarray:
    """In-degree importance: a node is sampled in proportion to how many
    neighbor lists it appears in.  Edge-free graphs fall back to uniform."""
    deg = g.in_degrees.astype(np.float64)
    total = deg.sum()
    if total == 0:
        return np.full(g.num_nodes, 1.0 / g.num_nodes)
    return deg / total


def cache_probs_walk(g: GraphCSR, fanout: int, steps: int) -> np.ndarray:
    """Reachability of each node under fanout-limited sampling.

    Starts uniform on the training set and applies  p <- D A p + p  for
    `steps` rounds, where D scales node v by min(fanout, in_deg(v)) /
    in_deg(v), then normalizes.  Nodes in components untouched by the
    training set keep probability zero.
    """
    train_ids = np.flatnonzero(g.train_mask)
    if train_ids.size == 0:
        raise ValueError("walk probabilities need a nonempty training set")
    p = np.zeros(g.num_nodes, dtype=np.float64)
    p[train_ids] = 1.0 / train_ids.size
    indeg = g.in_degrees.astype(np.float64)
    d = np.zeros(g.num_nodes, dtype=np.float64)
    nz = indeg > 0
    d[nz] = np.minimum(fanout, indeg[nz]) / indeg[nz]
    out_deg = np.diff(g.row_offsets)
    src = np.repeat(np.arange(g.num_nodes), out_deg)
    for _ in range(steps):
        flow = np.bincount(src, weights=p[g.col_indices], minlength=g.num_nodes)
        p = d * flow + p
    total = p.sum()
    if total <= 0:
        raise ValueError("walk produced no probability mass")
    return p / total


def refresh_cache(g: GraphCSR, probs: np.ndarray, fraction: float,
                  rng) -> CacheState:
    """Rebuild residency: ceil(fraction * |V|) nodes drawn WOR by probs.

    If fewer nodes carry positive probability than the budget, the shortfall
    is filled uniformly from the zero-probability remainder so the resident
    count is always exactly the budget.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must lie in (0, 1]")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (g.num_nodes,):
        raise ValueError("probs must have one entry per node")
    budget = int(np.ceil(fraction * g.num_nodes))
    positive = int(np.count_nonzero(probs > 0))
    take = min(budget, positive)
    chosen = weighted_sample_without_replacement(probs, take, rng)
    if take < budget:
        rest = np.setdiff1d(np.arange(g.num_nodes), chosen, assume_unique=False)
        extra = rng.choice(rest, size=budget - take, replace=False)
        chosen = np.concatenate([chosen, extra])
    cached_ids = np.sort(chosen.astype(np.int64))
    mask = np.zeros(g.num_nodes, dtype=bool)
    mask[cached_ids] = True
    return CacheState(
        cached_ids=cached_ids,
        cached_mask=mask,
        cached_features=g.features[cached_ids].copy(),
        fraction=fraction,
    )


def lookup(cache: CacheState, ids: np.ndarray):
    """Partition ids into (hits, misses) preserving order; bump counters."""
    ids = np.asarray(ids, dtype=np.int64)
    hit_mask = cache.cached_mask[ids]
    hits = ids[hit_mask]
    misses = ids[~hit_mask]
    with cache._lock:
        cache.hits += int(hits.size)
        cache.misses += int(misses.size)
    return hits, misses


def gather_features(cache: CacheState | None, g: GraphCSR,
                    ids: np.ndarray) -> np.ndarray:
    """Assemble feature rows for ids, serving hits from cache storage."""
    ids = np.asarray(ids, dtype=np.int64)
    if cache is None:
        return g.features[ids].copy()
    out = np.empty((ids.size, g.feature_dim), dtype=g.features.dtype)
    hit_mask = cache.cached_mask[ids]
    pos = np.searchsorted(cache.cached_ids, ids[hit_mask])
    out[hit_mask] = cache.cached_features[pos]
    out[~hit_mask] = g.features[ids[~hit_mask]]
    return out
