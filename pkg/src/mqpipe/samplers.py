"""Mini-batch construction: node-wise and layer-wise importance sampling.

Blocks are bipartite adjacency slices stored as (row, col, value) triplets
with rows over the destination list and cols over the source list.  The
`values` field always carries the method's estimator scaling; layer-wise
blocks additionally carry the row sums used to normalize the slice for
training, so the raw estimator stays inspectable.

Layer blocks are ordered bottom-up: layers[0] consumes input features and
the last block produces target embeddings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .graph import GraphCSR, laplacian_row


class SamplingError(RuntimeError):
    """Raised when a layer cannot be built (e.g. empty candidate set)."""


@dataclass(frozen=True)
class Block:
    """One layer's sampled adjacency slice (dst rows x src cols)."""

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray            # exact estimator scaling
    effective_values: np.ndarray  # what the forward pass applies
    src_ids: np.ndarray
    dst_ids: np.ndarray
    dst_in_src: np.ndarray | None = None  # positions of dst rows in src list
    sample_probs: np.ndarray | None = None  # base draw probability per src

    @property
    def num_dst(self) -> int:
        return int(self.dst_ids.size)

    @property
    def num_src(self) -> int:
        return int(self.src_ids.size)


@dataclass
class MiniBatch:
    batch_id: int
    epoch: int
    target_ids: np.ndarray
    target_labels: np.ndarray
    layers: tuple
    input_ids: np.ndarray
    features: np.ndarray | None = None  # gathered input rows, set at build
    cache_hits: int = 0
    cache_misses: int = 0
    dropped_targets: int = 0
    method: str = "gcn"

    def digest(self) -> str:
        """Stable content hash over ids, triplets and features."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.target_ids).tobytes())
        for blk in self.layers:
            for arr in (blk.rows, blk.cols, blk.values, blk.src_ids, blk.dst_ids):
                h.update(np.ascontiguousarray(arr).tobytes())
        if self.features is not None:
            h.update(np.ascontiguousarray(self.features).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SamplerParams:
    """Knobs shared by every sampling method; parsed from the method string."""

    method: str = "gcn"          # gcn | sage | fastgcn | ladies
    fanout: int = 5
    nodes_per_layer: int = 512
    num_layers: int = 2
    flat: bool = False
    debias: bool = False
    replace: bool = False        # with-replacement layer-wise form


def parse_method(spec: str) -> tuple[str, bool, bool]:
    """'ladies+f+d' -> ('ladies', flat=True, debias=True).

    'ns' is the node-wise entry point and aliases the gcn estimator; pick
    the sage variant by naming it directly (or via the model arch upstream).
    """
    parts = spec.lower().split("+")
    base, mods = parts[0], parts[1:]
    if base == "ns":
        base = "gcn"
    if base not in ("gcn", "sage", "fastgcn", "ladies"):
        raise ValueError(f"unknown method {base!r}")
    flat = debias = False
    for m in mods:
        if m in ("f", "flat"):
            flat = True
        elif m in ("d", "debias"):
            debias = True
        else:
            raise ValueError(f"unknown method modifier {m!r}")
    if (flat or debias) and base in ("gcn", "sage"):
        raise ValueError("flat/debias modifiers apply to layer-wise methods only")
    return base, flat, debias


def weighted_sample_without_replacement(weights, k: int, rng) -> np.ndarray:
    """Draw k distinct indices with probability proportional to weight.

    Uses exponential keys u^(1/w); the descending key order is equivalent to
    sequential draws with renormalization after each removal, so the returned
    order is the draw order.  Ties break toward the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("weights must be 1-D")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    positive = np.flatnonzero(w > 0)
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k > positive.size:
        raise ValueError(f"k={k} exceeds {positive.size} positive weights")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    u = rng.random(positive.size)
    keys = u ** (1.0 / w[positive])
    order = np.lexsort((positive, -keys))
    return positive[order[:k]].astype(np.int64)


# ---------------------------------------------------------------------------
# node-wise sampling


def node_wise_block(g: GraphCSR, dst_ids: np.ndarray, fanout: int, rng,
                    arch: str = "gcn", cached_mask=None) -> Block:
    """Fanout-bounded uniform neighbor sampling for one layer.

    gcn rows hold normalized-adjacency entries: the node's own entry at
    scale 1 plus each sampled neighbor scaled by |N(v)|/s per the
    inclusion probability s/|N(v)|.  sage rows hold mean weights 1/s and the
    node's own embedding travels through the concat path instead.
    When cached_mask is given, cache-resident neighbors are preferred; the
    scale factors are kept, which biases the estimator exactly as much as
    the preference does.
    """
    dst_ids = np.asarray(dst_ids, dtype=np.int64)
    src_list = list(dst_ids)
    src_pos = {int(v): i for i, v in enumerate(dst_ids)}
    rows, cols, vals = [], [], []
    deg_hat = g.a_hat_degrees
    for r, v in enumerate(dst_ids):
        v = int(v)
        nbrs = g.out_neighbors(v)
        nbrs = nbrs[nbrs != v]  # the loop entry is handled separately
        n = nbrs.size
        if n == 0:
            sampled = nbrs
        elif n <= fanout:
            sampled = nbrs
        elif cached_mask is not None:
            hot = nbrs[cached_mask[nbrs]]
            cold = nbrs[~cached_mask[nbrs]]
            if hot.size >= fanout:
                sampled = rng.choice(hot, size=fanout, replace=False)
            else:
                extra = rng.choice(cold, size=fanout - hot.size, replace=False)
                sampled = np.concatenate([hot, extra])
        else:
            sampled = rng.choice(nbrs, size=fanout, replace=False)
        s = sampled.size
        if arch == "gcn":
            rows.append(r)
            cols.append(src_pos[v])
            vals.append(1.0 / deg_hat[v])
            scale = n / s if s else 0.0
            for u in sampled:
                u = int(u)
                if u not in src_pos:
                    src_pos[u] = len(src_list)
                    src_list.append(u)
                rows.append(r)
                cols.append(src_pos[u])
                vals.append(scale / np.sqrt(deg_hat[v] * deg_hat[u]))
        else:  # sage: plain mean over the sampled neighbors, zero if none
            for u in sampled:
                u = int(u)
                if u not in src_pos:
                    src_pos[u] = len(src_list)
                    src_list.append(u)
                rows.append(r)
                cols.append(src_pos[u])
                vals.append(1.0 / s)
    values = np.asarray(vals, dtype=np.float64)
    return Block(
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        values=values,
        effective_values=values,
        src_ids=np.asarray(src_list, dtype=np.int64),
        dst_ids=dst_ids,
        dst_in_src=np.arange(dst_ids.size, dtype=np.int64),
    )


def sample_node_wise(g: GraphCSR, targets, fanout: int, layers: int, rng,
                     arch: str = "gcn", cached_mask=None) -> list:
    """Top-down fanout sampling; returns blocks bottom-up."""
    dst = np.asarray(targets, dtype=np.int64)
    if dst.size == 0:
        raise SamplingError("empty target set")
    blocks = []
    for _ in range(layers):
        blk = node_wise_block(g, dst, fanout, rng, arch=arch,
                              cached_mask=cached_mask)
        blocks.append(blk)
        dst = blk.src_ids
    blocks.reverse()
    return blocks


# ---------------------------------------------------------------------------
# layer-wise sampling


def _slice_csr(g: GraphCSR, nodes: np.ndarray):
    """Stored entries for a node list as parallel (local row, col) arrays."""
    starts = g.row_offsets[nodes].astype(np.int64)
    counts = (g.row_offsets[nodes + 1] - starts).astype(np.int64)
    total = int(counts.sum())
    rows = np.repeat(np.arange(nodes.size, dtype=np.int64), counts)
    gather = (np.arange(total, dtype=np.int64)
              - np.repeat(np.cumsum(counts) - counts, counts)
              + np.repeat(starts, counts))
    return rows, g.col_indices[gather].astype(np.int64)


def _restricted_rows(g: GraphCSR, prev_nodes: np.ndarray):
    """Laplacian rows for prev_nodes as parallel (row, col, value) arrays."""
    prev = np.asarray(prev_nodes, dtype=np.int64)
    rows, cols = _slice_csr(g, prev)
    # inject missing self-loops, keeping row-major sorted-column order
    has_loop = np.zeros(prev.size, dtype=bool)
    has_loop[rows[cols == prev[rows]]] = True
    missing = np.flatnonzero(~has_loop)
    if missing.size:
        rows = np.concatenate([rows, missing])
        cols = np.concatenate([cols, prev[missing]])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
    deg = g.a_hat_degrees
    vals = 1.0 / np.sqrt(deg[prev[rows]] * deg[cols].astype(np.float64))
    return rows, cols, vals


def ladies_candidates(g: GraphCSR, prev_nodes) -> np.ndarray:
    """Sorted deduplicated union of the previous layer's neighbor lists."""
    prev_nodes = np.asarray(prev_nodes, dtype=np.int64)
    if prev_nodes.size == 0:
        return np.empty(0, dtype=np.int64)
    _, cols = _slice_csr(g, prev_nodes)
    return np.unique(cols).astype(np.int64)


def _candidate_norms(g: GraphCSR, candidates: np.ndarray,
                     prev_nodes: np.ndarray, squared: bool):
    rows, cols, vals = _restricted_rows(g, prev_nodes)
    pos = np.searchsorted(candidates, cols)
    pos_ok = (pos < candidates.size)
    pos_clip = np.minimum(pos, candidates.size - 1)
    keep = pos_ok & (candidates[pos_clip] == cols)
    col_sq = np.zeros(candidates.size, dtype=np.float64)
    np.add.at(col_sq, pos_clip[keep], vals[keep] ** 2)
    return col_sq if squared else np.sqrt(col_sq)


def ladies_probs(g: GraphCSR, candidates, prev_nodes) -> np.ndarray:
    """Squared column norms of the row-restricted Laplacian, normalized."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise SamplingError("empty candidate set")
    col_sq = _candidate_norms(g, candidates, np.asarray(prev_nodes), squared=True)
    total = col_sq.sum()
    if total <= 0:
        raise SamplingError("all candidate columns have zero norm")
    return col_sq / total


def flat_probs(g: GraphCSR, candidates, prev_nodes) -> np.ndarray:
    """Unsquared column norms of the restricted Laplacian, normalized.

    This flattens the distribution relative to the squared form: high-norm
    columns lose relative mass, low-norm columns gain it.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise SamplingError("empty candidate set")
    norms = _candidate_norms(g, candidates, np.asarray(prev_nodes), squared=False)
    total = norms.sum()
    if total <= 0:
        raise SamplingError("all candidate columns have zero norm")
    return norms / total


def fastgcn_probs(g: GraphCSR, flat: bool = False) -> np.ndarray:
    """Global importance over all nodes: column norms of the full Laplacian."""
    all_nodes = np.arange(g.num_nodes, dtype=np.int64)
    norms = _candidate_norms(g, all_nodes, all_nodes, squared=not flat)
    return norms / norms.sum()


def debias_estimate(x_rows: np.ndarray, probs: np.ndarray, n: int) -> np.ndarray:
    """Recursive estimate of the sum of n rows from s sequential draws.

    x_rows are the drawn rows in draw order; probs their base probabilities
    (the full distribution sums to 1 over all n candidates).  Starting from
    Y_0 = 0, each step mixes in the partial sum of prior draws plus the new
    row boosted by its probability renormalized to the remaining pool:

        Y_{i+1} = (1 - a_{i+1}) Y_i + a_{i+1} (sum_prior + x / p_renorm)

    with a_1 = 1 and a_{k+1} = n / ((n - k)(k + 1)).  The conditional mean
    of every mixed term is the full sum, so the estimate is exactly unbiased
    for any probability vector.
    """
    x_rows = np.asarray(x_rows, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    s = x_rows.shape[0]
    if probs.shape[0] != s:
        raise ValueError("x_rows and probs must align")
    if s == 0 or s > n:
        raise ValueError("need 0 < s <= n draws")
    y = np.zeros(x_rows.shape[1:], dtype=np.float64)
    prior = np.zeros_like(y)
    remaining = 1.0
    for i in range(s):
        alpha = 1.0 if i == 0 else n / ((n - i) * (i + 1))
        p_here = probs[i] / remaining
        y = (1.0 - alpha) * y + alpha * (prior + x_rows[i] / p_here)
        prior = prior + x_rows[i]
        remaining -= probs[i]
    return y


def debias_coefficients(probs: np.ndarray, n: int) -> np.ndarray:
    """Per-draw weights c with  estimate == c @ x_rows  (the recursion is
    linear in the rows).  Used to fold the correction into block values."""
    probs = np.asarray(probs, dtype=np.float64)
    s = probs.size
    alphas = np.empty(s)
    for i in range(s):
        alphas[i] = 1.0 if i == 0 else n / ((n - i) * (i + 1))
    # beta_i = alpha_i * prod_{j>i} (1 - alpha_j): weight of mixed term i
    betas = np.empty(s)
    tail = 1.0
    for i in range(s - 1, -1, -1):
        betas[i] = alphas[i] * tail
        tail *= 1.0 - alphas[i]
    remaining = 1.0 - np.concatenate([[0.0], np.cumsum(probs[:-1])])
    p_at_draw = probs / remaining
    beta_suffix = np.concatenate([np.cumsum(betas[::-1])[::-1][1:], [0.0]])
    return betas / p_at_draw + beta_suffix


def _layer_wise_block(g: GraphCSR, prev_nodes: np.ndarray,
                      candidates: np.ndarray, probs: np.ndarray,
                      budget: int, rng, debias: bool,
                      replace: bool) -> Block:
    """Sample one layer-wise block given candidate probabilities."""
    rrows, rcols, rvals = _restricted_rows(g, prev_nodes)

    def slice_values(chosen_ids, entry_scale):
        pos = np.searchsorted(chosen_ids, rcols)
        pos_ok = pos < chosen_ids.size
        pos_clip = np.minimum(pos, chosen_ids.size - 1)
        keep = pos_ok & (chosen_ids[pos_clip] == rcols)
        rows = rrows[keep]
        cols = pos_clip[keep]
        vals = rvals[keep] * entry_scale[cols]
        return rows, cols, vals

    if debias:
        s = min(budget, int(np.count_nonzero(probs > 0)))
        order = weighted_sample_without_replacement(probs, s, rng)
        coeffs = debias_coefficients(probs[order], candidates.size)
        # columns must be sorted for the searchsorted slice; remap the
        # draw-order coefficients onto the sorted id list
        sort_idx = np.argsort(order, kind="stable")
        chosen = candidates[order[sort_idx]]
        scale = coeffs[sort_idx]
        rows, cols, vals = slice_values(chosen, scale)
        values = vals
        effective = values
        sample_probs = probs[order[sort_idx]]
    elif replace:
        s = budget
        draws = rng.choice(candidates.size, size=s, replace=True, p=probs)
        uniq, counts = np.unique(draws, return_counts=True)
        chosen = candidates[uniq]
        scale = counts / (s * probs[uniq])
        rows, cols, vals = slice_values(chosen, scale)
        values = vals
        effective = values
        sample_probs = probs[uniq]
    else:
        s = min(budget, int(np.count_nonzero(probs > 0)))
        order = weighted_sample_without_replacement(probs, s, rng)
        idx = np.sort(order)
        chosen = candidates[idx]
        scale = 1.0 / (s * probs[idx])
        rows, cols, vals = slice_values(chosen, scale)
        values = vals
        # normalize each nonzero row to sum one for training stability
        row_sums = np.zeros(prev_nodes.size, dtype=np.float64)
        np.add.at(row_sums, rows, vals)
        divisor = np.where(row_sums > 0, row_sums, 1.0)
        effective = vals / divisor[rows]
        sample_probs = probs[idx]

    return Block(
        rows=rows,
        cols=cols,
        values=values,
        effective_values=effective,
        src_ids=chosen.astype(np.int64),
        dst_ids=np.asarray(prev_nodes, dtype=np.int64),
        dst_in_src=None,
        sample_probs=sample_probs,
    )


def sample_ladies(g: GraphCSR, targets, nodes_per_layer: int, layers: int,
                  rng, flat: bool = False, debias: bool = False,
                  replace: bool = False) -> tuple[list, int]:
    """Layer-wise dependent sampling; returns (blocks bottom-up, dropped).

    Zero-out-degree targets cannot seed a candidate set and are dropped with
    a count.  Candidates per layer are the union of the previous layer's
    neighbor lists; probabilities are the squared (or flat) restricted
    column norms.
    """
    targets = np.asarray(targets, dtype=np.int64)
    degs = np.diff(g.row_offsets)[targets]
    dropped = int(np.count_nonzero(degs == 0))
    targets = targets[degs > 0]
    if targets.size == 0:
        raise SamplingError("no targets with outgoing edges")
    prev = targets
    blocks = []
    prob_fn = flat_probs if flat else ladies_probs
    for _ in range(layers):
        cand = ladies_candidates(g, prev)
        if cand.size == 0:
            raise SamplingError("empty candidate set mid-chain")
        probs = prob_fn(g, cand, prev)
        blk = _layer_wise_block(g, prev, cand, probs, nodes_per_layer, rng,
                                debias=debias, replace=replace)
        blocks.append(blk)
        prev = blk.src_ids
    blocks.reverse()
    return blocks, dropped


def sample_fastgcn(g: GraphCSR, targets, nodes_per_layer: int, layers: int,
                   rng, flat: bool = False, debias: bool = False,
                   probs: np.ndarray | None = None) -> list:
    """Independent layer sampling from the global importance distribution.

    Draws are i.i.d. with replacement (the default estimator form) or
    without replacement with the recursive correction when debias is set.
    Rows whose support misses every drawn node aggregate to zero; that is
    inherent to sampling from a target-oblivious distribution.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise SamplingError("empty target set")
    if probs is None:
        probs = fastgcn_probs(g, flat=flat)
    all_nodes = np.arange(g.num_nodes, dtype=np.int64)
    prev = targets
    blocks = []
    for _ in range(layers):
        blk = _layer_wise_block(g, prev, all_nodes, probs, nodes_per_layer,
                                rng, debias=debias, replace=not debias)
        blocks.append(blk)
        prev = blk.src_ids
    blocks.reverse()
    return blocks


# ---------------------------------------------------------------------------
# batch assembly


def build_minibatch(g: GraphCSR, targets, params: SamplerParams, rng,
                    batch_id: int = 0, epoch: int = 0,
                    cached_mask=None) -> MiniBatch:
    """Dispatch to the configured method and gather input features."""
    targets = np.asarray(targets, dtype=np.int64)
    dropped = 0
    if params.method in ("gcn", "sage"):
        blocks = sample_node_wise(g, targets, params.fanout, params.num_layers,
                                  rng, arch=params.method,
                                  cached_mask=cached_mask)
    elif params.method == "ladies":
        blocks, dropped = sample_ladies(
            g, targets, params.nodes_per_layer, params.num_layers, rng,
            flat=params.flat, debias=params.debias, replace=params.replace)
    elif params.method == "fastgcn":
        blocks = sample_fastgcn(g, targets, params.nodes_per_layer,
                                params.num_layers, rng, flat=params.flat,
                                debias=params.debias)
    else:
        raise ValueError(f"unknown method {params.method!r}")
    kept_targets = blocks[-1].dst_ids
    input_ids = blocks[0].src_ids
    hits = misses = 0
    if cached_mask is not None and input_ids.size:
        hits = int(np.count_nonzero(cached_mask[input_ids]))
        misses = int(input_ids.size - hits)
    return MiniBatch(
        batch_id=batch_id,
        epoch=epoch,
        target_ids=kept_targets,
        target_labels=g.labels[kept_targets],
        layers=tuple(blocks),
        input_ids=input_ids,
        features=g.features[input_ids].copy(),
        cache_hits=hits,
        cache_misses=misses,
        dropped_targets=dropped,
        method=params.method,
    )
