"""Immutable CSR graph storage with node features, labels and split masks.

Edges are stored directed.  Undirected inputs are ingested by adding both
arcs.  The normalized adjacency used for aggregation treats every node as
having a self-loop regardless of whether one is stored: access-time views
work on A-hat = A union I, never on a materialized matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MQG1"


@dataclass(frozen=True)
class LaplacianRow:
    """One row of the symmetrically normalized adjacency D^-1/2 (A+I) D^-1/2."""

    node: int
    indices: np.ndarray  # sorted neighbor ids, self included
    values: np.ndarray   # 1/sqrt(deg_hat(i) * deg_hat(j)) per index


@dataclass(frozen=True)
class GraphCSR:
    """Directed graph in CSR form plus per-node payloads.

    Arrays are read-only; build a new instance to change anything.
    `row_offsets` has length num_nodes+1 and `col_indices[row_offsets[v]:
    row_offsets[v+1]]` lists the out-neighbors of v in ascending order.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    features: np.ndarray        # (num_nodes, feature_dim) float32
    labels: np.ndarray          # (num_nodes,) int32
    num_classes: int
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    in_degrees: np.ndarray = field(default=None)    # computed in __post_init__
    a_hat_degrees: np.ndarray = field(default=None)  # row sums of A union I

    def __post_init__(self):
        if self.in_degrees is None:
            indeg = np.bincount(self.col_indices, minlength=self.num_nodes)
            object.__setattr__(self, "in_degrees", indeg.astype(np.int64))
        if self.a_hat_degrees is None:
            out = np.diff(self.row_offsets)
            # nodes with a stored self-edge must not count the loop twice
            src = np.repeat(np.arange(self.num_nodes), out)
            has_loop = np.zeros(self.num_nodes, dtype=bool)
            has_loop[src[self.col_indices == src]] = True
            deg_hat = out + np.where(has_loop, 0, 1)
            object.__setattr__(self, "a_hat_degrees", deg_hat.astype(np.int64))
        for name in ("row_offsets", "col_indices", "features", "labels",
                     "train_mask", "val_mask", "test_mask", "in_degrees",
                     "a_hat_degrees"):
            getattr(self, name).setflags(write=False)
        if self.row_offsets.shape != (self.num_nodes + 1,):
            raise ValueError("row_offsets must have num_nodes+1 entries")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != self.col_indices.size:
            raise ValueError("row_offsets must start at 0 and end at num_edges")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if self.col_indices.size and (self.col_indices.min() < 0
                                      or self.col_indices.max() >= self.num_nodes):
            raise ValueError("col_indices out of range")

    @property
    def num_edges(self) -> int:
        return int(self.col_indices.size)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def out_neighbors(self, v: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[v]:self.row_offsets[v + 1]]

    def out_degree(self, v: int) -> int:
        return int(self.row_offsets[v + 1] - self.row_offsets[v])

    def in_degree(self, v: int) -> int:
        """In-degree from the precomputed column counts."""
        return int(self.in_degrees[v])


def build_csr(edges, num_nodes: int, features=None, labels=None,
              num_classes: int | None = None) -> GraphCSR:
    """Build a GraphCSR from (src, dst) pairs.

    Duplicate arcs collapse to one; rows come out sorted, so identical edge
    sets produce identical layouts regardless of input order.  Node ids must
    lie in [0, num_nodes).
    """
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                     dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise ValueError("edge endpoint out of range")
    if arr.size:
        keys = arr[:, 0] * num_nodes + arr[:, 1]
        keys = np.unique(keys)
        src = keys // num_nodes
        dst = keys % num_nodes
    else:
        src = dst = np.empty(0, dtype=np.int64)
    row_offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(row_offsets, src + 1, 1)
    row_offsets = np.cumsum(row_offsets)
    col_indices = dst.copy()

    if features is None:
        features = degree_bucket_features(row_offsets)
    features = np.ascontiguousarray(features, dtype=np.float32)
    if features.shape[0] != num_nodes:
        raise ValueError("features must have one row per node")
    if labels is None:
        labels = np.zeros(num_nodes, dtype=np.int32)
    labels = np.ascontiguousarray(labels, dtype=np.int32)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if num_nodes else 0
    empty_mask = np.zeros(num_nodes, dtype=bool)
    return GraphCSR(
        num_nodes=num_nodes,
        row_offsets=row_offsets,
        col_indices=col_indices,
        features=features,
        labels=labels,
        num_classes=num_classes,
        train_mask=empty_mask.copy(),
        val_mask=empty_mask.copy(),
        test_mask=empty_mask.copy(),
    )


def degree_bucket_features(row_offsets: np.ndarray) -> np.ndarray:
    """Default features: one-hot of the floor(log2(out_degree+1)) bucket."""
    deg = np.diff(row_offsets)
    buckets = np.floor(np.log2(deg + 1)).astype(np.int64)
    dim = int(buckets.max()) + 1 if buckets.size else 1
    feats = np.zeros((deg.size, dim), dtype=np.float32)
    feats[np.arange(deg.size), buckets] = 1.0
    return feats


def load_edge_list(path: str, num_nodes: int, feature_path: str | None = None,
                   undirected: bool = True) -> GraphCSR:
    """Load a whitespace 'src dst' edge list.

    Malformed lines and out-of-range ids raise ValueError naming the line
    number.  With undirected=True each listed edge contributes both arcs;
    self-loops are kept as given either way.
    """
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'src dst', got {text!r}")
            try:
                s, d = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(f"line {lineno}: non-integer node id in {text!r}") from None
            if not (0 <= s < num_nodes and 0 <= d < num_nodes):
                raise ValueError(f"line {lineno}: node id out of range in {text!r}")
            edges.append((s, d))
            if undirected and s != d:
                edges.append((d, s))
    features = np.load(feature_path) if feature_path else None
    return build_csr(edges, num_nodes, features=features)


def laplacian_row(g: GraphCSR, v: int) -> LaplacianRow:
    """Row v of the normalized adjacency with the self-loop injected."""
    if not (0 <= v < g.num_nodes):
        raise IndexError(f"node {v} out of range")
    row = g.out_neighbors(v)
    pos = int(np.searchsorted(row, v))
    if pos < row.size and row[pos] == v:
        indices = row.astype(np.int64)
    else:
        # np.insert is ~10x slower than a preallocated splice on short rows
        indices = np.empty(row.size + 1, dtype=np.int64)
        indices[:pos] = row[:pos]
        indices[pos] = v
        indices[pos + 1:] = row[pos:]
    dv = g.a_hat_degrees[v]
    values = 1.0 / np.sqrt(dv * g.a_hat_degrees[indices].astype(np.float64))
    return LaplacianRow(node=v, indices=indices, values=values)


def laplacian_triplets(g: GraphCSR):
    """All rows of the normalized adjacency as (rows, cols, values) arrays.

    Materializes the access-time view once for full-graph passes; entry
    order is row-major with sorted columns, self-loops included.
    """
    out_deg = np.diff(g.row_offsets)
    src = np.repeat(np.arange(g.num_nodes), out_deg)
    stored_loops = g.col_indices == src
    # stored self-loops are dropped here and re-added once per node below
    rows = np.concatenate([src[~stored_loops], np.arange(g.num_nodes)])
    cols = np.concatenate([g.col_indices[~stored_loops], np.arange(g.num_nodes)])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    deg_hat = g.a_hat_degrees.astype(np.float64)
    vals = 1.0 / np.sqrt(deg_hat[rows] * deg_hat[cols])
    return rows, cols, vals


def split_masks(g: GraphCSR, ratios=(0.66, 0.10, 0.24), seed: int = 0) -> GraphCSR:
    """Return a copy of g with disjoint train/val/test masks.

    Sizes are floor(ratio * num_nodes) exactly; leftover nodes from the
    floors stay unassigned.  Deterministic per seed.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) > 1.0 + 1e-9:
        raise ValueError("ratios must be three nonnegative values summing to <= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(g.num_nodes)
    n_train = int(ratios[0] * g.num_nodes)
    n_val = int(ratios[1] * g.num_nodes)
    n_test = int(ratios[2] * g.num_nodes)
    train = np.zeros(g.num_nodes, dtype=bool)
    val = np.zeros(g.num_nodes, dtype=bool)
    test = np.zeros(g.num_nodes, dtype=bool)
    train[order[:n_train]] = True
    val[order[n_train:n_train + n_val]] = True
    test[order[n_train + n_val:n_train + n_val + n_test]] = True
    return GraphCSR(
        num_nodes=g.num_nodes,
        row_offsets=g.row_offsets,
        col_indices=g.col_indices,
        features=g.features,
        labels=g.labels,
        num_classes=g.num_classes,
        train_mask=train,
        val_mask=val,
        test_mask=test,
    )


def generate_power_law(num_nodes: int, exponent: float = 2.1,
                       seed: int = 0) -> GraphCSR:
    """Configuration-model graph with power-law degrees, both arcs stored.

    Degrees are zipf(exponent) draws truncated to [1, num_nodes-1]; an odd
    stub total is repaired by redrawing the last degree.  Stub pairings that
    form self-loops or repeat an existing pair are dropped.
    """
    if num_nodes < 2:
        raise ValueError("need at least 2 nodes")
    if exponent <= 1.0:
        raise ValueError("exponent must exceed 1")
    rng = np.random.default_rng(seed)

    def draw(size):
        d = rng.zipf(exponent, size=size)
        while np.any(d >= num_nodes):
            bad = d >= num_nodes
            d[bad] = rng.zipf(exponent, size=int(bad.sum()))
        return d

    degrees = draw(num_nodes)
    while degrees.sum() % 2 != 0:
        degrees[-1] = draw(1)[0]
    stubs = np.repeat(np.arange(num_nodes), degrees)
    rng.shuffle(stubs)
    pairs = stubs.reshape(-1, 2)
    keep = pairs[:, 0] != pairs[:, 1]
    pairs = pairs[keep]
    edges = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    # labels: degree bucket capped to 4 classes, so the graph is trainable
    # out of the box (degree features carry the signal); degrees start at 1,
    # so bucket 1 is the smallest and shifts down to class 0
    buckets = np.floor(np.log2(degrees + 1)).astype(np.int32) - 1
    labels = np.clip(buckets, 0, 3)
    g = build_csr(edges, num_nodes, labels=labels,
                  num_classes=int(labels.max()) + 1)
    return g


def generate_sbm(block_sizes, p_in: float, p_out: float, seed: int = 0,
                 noise: float = 0.1) -> GraphCSR:
    """Stochastic block model with labels = block ids.

    Each unordered pair is linked with p_in inside a block and p_out across
    blocks; both arcs are stored.  Features are a one-hot block indicator
    plus seeded gaussian noise.
    """
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValueError("require 0 <= p_out < p_in <= 1")
    block_sizes = list(block_sizes)
    num_nodes = sum(block_sizes)
    labels = np.repeat(np.arange(len(block_sizes)), block_sizes).astype(np.int32)
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(num_nodes, k=1)
    same = labels[iu] == labels[ju]
    probs = np.where(same, p_in, p_out)
    chosen = rng.random(probs.size) < probs
    src = iu[chosen]
    dst = ju[chosen]
    edges = np.concatenate(
        [np.stack([src, dst], axis=1), np.stack([dst, src], axis=1)], axis=0)
    feats = np.zeros((num_nodes, len(block_sizes)), dtype=np.float64)
    feats[np.arange(num_nodes), labels] = 1.0
    feats += noise * rng.standard_normal(feats.shape)
    g = build_csr(edges, num_nodes, features=feats.astype(np.float32),
                  labels=labels, num_classes=len(block_sizes))
    return g


def _pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8), bitorder="little").tobytes()


def _unpack_mask(buf: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    return bits[:n].astype(bool)


def serialize(g: GraphCSR) -> bytes:
    """Binary container: magic, u64 header, CSR arrays, payloads, masks."""
    header = struct.pack("<4sQQQQ", MAGIC, g.num_nodes, g.num_edges,
                         g.feature_dim, g.num_classes)
    parts = [
        header,
        g.row_offsets.astype("<u8").tobytes(),
        g.col_indices.astype("<u8").tobytes(),
        g.features.astype("<f4").tobytes(),
        g.labels.astype("<i4").tobytes(),
        _pack_mask(g.train_mask),
        _pack_mask(g.val_mask),
        _pack_mask(g.test_mask),
    ]
    return b"".join(parts)


def deserialize(buf: bytes) -> GraphCSR:
    """Inverse of serialize. Rejects bad magic and truncated buffers."""
    if len(buf) < 36:
        raise ValueError("buffer too short for header")
    magic, n, e, d, c = struct.unpack_from("<4sQQQQ", buf, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    off = 36
    mask_bytes = (n + 7) // 8
    need = off + 8 * (n + 1) + 8 * e + 4 * n * d + 4 * n + 3 * mask_bytes
    if len(buf) < need:
        raise ValueError(f"buffer truncated: need {need} bytes, have {len(buf)}")

    def take(count, dtype):
        nonlocal off
        out = np.frombuffer(buf, dtype=dtype, count=count, offset=off).copy()
        off += count * np.dtype(dtype).itemsize
        return out

    row_offsets = take(n + 1, "<u8").astype(np.int64)
    col_indices = take(e, "<u8").astype(np.int64)
    features = take(n * d, "<f4").astype(np.float32).reshape(n, d)
    labels = take(n, "<i4").astype(np.int32)
    masks = []
    for _ in range(3):
        masks.append(_unpack_mask(buf[off:off + mask_bytes], n))
        off += mask_bytes
    return GraphCSR(
        num_nodes=int(n),
        row_offsets=row_offsets,
        col_indices=col_indices,
        features=features,
        labels=labels,
        num_classes=int(c),
        train_mask=masks[0],
        val_mask=masks[1],
        test_mask=masks[2],
    )


def save(g: GraphCSR, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(g))


def load(path: str) -> GraphCSR:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
