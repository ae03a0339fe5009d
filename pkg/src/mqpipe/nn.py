"""Dense numerics for block-wise GNN training: forward, backward, optimizers.

Everything is plain numpy.  Training runs in float32; tests and oracles can
ask for float64 via ModelState.dtype.  Public entry points verify that their
outputs are finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ModelState:
    """Weights plus Adam moments for one model replica.

    arch is 'gcn' (aggregate then transform) or 'sage' (concat self with the
    neighbor mean, then transform).  Exactly one device worker may mutate a
    replica at a time.
    """

    weights: list
    arch: str = "gcn"
    learning_rate: float = 0.001
    step_count: int = 0
    m: list = field(default=None)
    v: list = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros_like(w) for w in self.weights]
        if self.v is None:
            self.v = [np.zeros_like(w) for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "ModelState":
        return ModelState(
            weights=[w.copy() for w in self.weights],
            arch=self.arch,
            learning_rate=self.learning_rate,
            step_count=self.step_count,
            m=[m.copy() for m in self.m],
            v=[v.copy() for v in self.v],
        )


def init_model(feature_dim: int, hidden_dim: int, num_classes: int,
               num_layers: int = 2, arch: str = "gcn", seed: int = 0,
               learning_rate: float = 0.001, dtype=np.float32) -> ModelState:
    """Glorot-uniform init. SAGE layers see concatenated input, hence 2x fan-in."""
    if arch not in ("gcn", "sage"):
        raise ValueError(f"unknown arch {arch!r}")
    rng = np.random.default_rng(seed)
    dims = [feature_dim] + [hidden_dim] * (num_layers - 1) + [num_classes]
    weights = []
    for l in range(num_layers):
        fan_in = dims[l] * (2 if arch == "sage" else 1)
        fan_out = dims[l + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit,
                                   size=(fan_in, fan_out)).astype(dtype))
    return ModelState(weights=weights, arch=arch, learning_rate=learning_rate)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains NaN or Inf")


def block_apply(block, h: np.ndarray) -> np.ndarray:
    """Sparse aggregation out[r] = sum_k vals[k] * h[cols[k]] over block triplets.

    Training applies the effective (row-normalized where applicable) weights;
    the raw estimator values stay on the block for analysis.
    """
    out = np.zeros((block.num_dst, h.shape[1]), dtype=h.dtype)
    if block.rows.size:
        vals = block.effective_values.astype(h.dtype)
        np.add.at(out, block.rows, vals[:, None] * h[block.cols])
    return out


def block_apply_t(block, grad: np.ndarray, num_src: int) -> np.ndarray:
    """Transpose of block_apply: scatter dst gradients back onto src rows."""
    out = np.zeros((num_src, grad.shape[1]), dtype=grad.dtype)
    if block.rows.size:
        vals = block.effective_values.astype(grad.dtype)
        np.add.at(out, block.cols, vals[:, None] * grad[block.rows])
    return out


def gcn_forward(batch, state: ModelState, return_cache: bool = False):
    """Stacked aggregate-transform layers, ReLU between, linear output."""
    h = np.asarray(batch.features, dtype=state.dtype)
    cache = {"inputs": [], "pre": []}
    last = len(batch.layers) - 1
    for l, block in enumerate(batch.layers):
        agg = block_apply(block, h)
        cache["inputs"].append((h, agg))
        z = agg @ state.weights[l]
        cache["pre"].append(z)
        h = np.maximum(z, 0) if l < last else z
    _check_finite("gcn_forward output", h)
    return (h, cache) if return_cache else h


def sage_forward(batch, state: ModelState, return_cache: bool = False):
    """Mean-of-neighbors aggregation concatenated with the node's own row.

    Nodes whose block row is empty (no sampled neighbors) aggregate to zero.
    """
    h = np.asarray(batch.features, dtype=state.dtype)
    cache = {"inputs": [], "pre": []}
    last = len(batch.layers) - 1
    for l, block in enumerate(batch.layers):
        agg = block_apply(block, h)
        self_h = h[block.dst_in_src]
        both = np.concatenate([agg, self_h], axis=1)
        cache["inputs"].append((h, both))
        z = both @ state.weights[l]
        cache["pre"].append(z)
        h = np.maximum(z, 0) if l < last else z
    _check_finite("sage_forward output", h)
    return (h, cache) if return_cache else h


def forward(batch, state: ModelState, return_cache: bool = False):
    fn = sage_forward if state.arch == "sage" else gcn_forward
    return fn(batch, state, return_cache=return_cache)


def batch_loss(logits: np.ndarray, labels: np.ndarray):
    """Softmax cross-entropy summed over the batch.

    Returns (loss, dloss/dlogits).  Stable via the max-shift trick.
    """
    labels = np.asarray(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    n = logits.shape[0]
    loss = -log_probs[np.arange(n), labels].sum()
    grad = exp / denom
    grad[np.arange(n), labels] -= 1.0
    _check_finite("batch_loss", grad)
    return float(loss), grad


def backward(batch, state: ModelState, cache, dlogits: np.ndarray) -> list:
    """Backprop through the layer stack; returns per-layer weight gradients."""
    grads = [None] * len(state.weights)
    dz = dlogits.astype(state.dtype)
    for l in range(len(batch.layers) - 1, -1, -1):
        block = batch.layers[l]
        h_in, transformed = cache["inputs"][l]
        if l < len(batch.layers) - 1:
            dz = dz * (cache["pre"][l] > 0)
        grads[l] = transformed.T @ dz
        if l > 0:
            dt = dz @ state.weights[l].T
            if state.arch == "sage":
                d_in = h_in.shape[1]
                dh = block_apply_t(block, dt[:, :d_in], h_in.shape[0])
                np.add.at(dh, block.dst_in_src, dt[:, d_in:])
            else:
                dh = block_apply_t(block, dt, h_in.shape[0])
            dz = dh
    for g in grads:
        _check_finite("backward", g)
    return grads


def loss_and_grads(batch, state: ModelState):
    """Forward, loss over batch targets, backward. One-stop call for training."""
    logits, cache = forward(batch, state, return_cache=True)
    loss, dlogits = batch_loss(logits, batch.target_labels)
    grads = backward(batch, state, cache, dlogits)
    return loss, grads, logits


def adam_step(state: ModelState, grads: list) -> ModelState:
    """Standard Adam with bias correction; mutates state in place."""
    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    for w, g, m, v in zip(state.weights, grads, state.m, state.v):
        g = g.astype(w.dtype)
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        w -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        _check_finite("adam_step", w)
    return state


def sgd_step(state: ModelState, grads: list) -> ModelState:
    """Plain gradient step, no momentum; moments are left untouched."""
    state.step_count += 1
    for w, g in zip(state.weights, grads):
        w -= state.learning_rate * g.astype(w.dtype)
        _check_finite("sgd_step", w)
    return state


def full_forward(g, state: ModelState) -> np.ndarray:
    """Exact whole-graph forward pass, used for evaluation.

    gcn aggregates with the complete normalized adjacency; sage takes the
    mean over every out-neighbor (zero when there are none) and concatenates
    the node's own embedding.
    """
    from .graph import laplacian_triplets

    h = g.features.astype(state.dtype)
    last = len(state.weights) - 1
    if state.arch == "gcn":
        rows, cols, vals = laplacian_triplets(g)
        vals = vals.astype(state.dtype)
        for l, w in enumerate(state.weights):
            agg = np.zeros_like(h)
            np.add.at(agg, rows, vals[:, None] * h[cols])
            z = agg @ w
            h = np.maximum(z, 0) if l < last else z
    else:
        src_all = np.repeat(np.arange(g.num_nodes), np.diff(g.row_offsets))
        keep = g.col_indices != src_all  # loops ride the concat path instead
        src, dst = src_all[keep], g.col_indices[keep]
        counts = np.bincount(src, minlength=g.num_nodes).astype(state.dtype)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
        for l, w in enumerate(state.weights):
            agg = np.zeros_like(h)
            np.add.at(agg, src, h[dst])
            agg *= inv[:, None]
            z = np.concatenate([agg, h], axis=1) @ w
            h = np.maximum(z, 0) if l < last else z
    _check_finite("full_forward", h)
    return h


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if logits.shape[0] == 0:
        return 0.0
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())
