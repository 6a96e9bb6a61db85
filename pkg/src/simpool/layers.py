"""Differentiable layers: GMN encoder/propagation, GCN, MLP, pooling.

All layers operate on single graphs (2-D tensors); batches are handled by
the model loop. Parameters are named so checkpoints stay stable.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = [
    "Dense",
    "MLP",
    "GmnEncoder",
    "GmnPropagation",
    "GcnLayer",
    "PoolingBlock",
    "pool_forward",
    "loss_le",
    "loss_lc",
    "cross_entropy",
    "ACTIVATIONS",
]

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "linear": lambda t: t,
}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Dense:
    """Affine map with an elementwise activation."""

    def __init__(self, rng, in_dim: int, out_dim: int, activation: str, name: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.name = name
        self.activation = activation
        self.weight = ad.parameter(glorot(rng, in_dim, out_dim))
        # small nonzero bias keeps pre-activations off the exact relu kink
        # for all-zero input rows (isolated nodes), where finite differences
        # would otherwise straddle a non-differentiable point
        self.bias = ad.parameter(rng.uniform(-0.05, 0.05, size=(1, out_dim)))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if x.shape[1] != self.in_dim:
            raise ValueError(
                f"{self.name}: input width {x.shape[1]} != expected {self.in_dim}"
            )
        return ACTIVATIONS[self.activation](ad.add(ad.matmul(x, self.weight), self.bias))

    def parameters(self) -> dict[str, ad.Tensor]:
        return {f"{self.name}.w": self.weight, f"{self.name}.b": self.bias}


class MLP:
    """Stack of dense layers."""

    def __init__(self, rng, dims: list[int], activations: list[str], name: str):
        if len(dims) != len(activations) + 1:
            raise ValueError("dims must have one more entry than activations")
        self.layers = [
            Dense(rng, dims[i], dims[i + 1], activations[i], f"{name}.{i}")
            for i in range(len(activations))
        ]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out


class GmnEncoder:
    """Per-node MLP transform; no cross-node mixing."""

    def __init__(self, rng, in_dim: int, out_dim: int, activation: str, name: str):
        self.dense = Dense(rng, in_dim, out_dim, activation, f"{name}.node_mlp")

    @property
    def out_dim(self) -> int:
        return self.dense.out_dim

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return self.dense(x)

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.dense.parameters()


class GmnPropagation:
    """Message passing over weighted edges.

    For every nonzero A[j, i] a message f_message(concat(h_i, h_j)) is
    produced, scaled by A[j, i], and summed into receiver i; the new state
    is f_node(concat(h_i, aggregate_i)). With no edges the aggregate is
    zero and f_node still runs.
    """

    def __init__(self, rng, in_dim: int, message_dim: int, out_dim: int,
                 activation: str, name: str):
        self.f_message = Dense(rng, 2 * in_dim, message_dim, activation, f"{name}.msg")
        self.f_node = Dense(rng, in_dim + message_dim, out_dim, activation, f"{name}.node")

    @property
    def out_dim(self) -> int:
        return self.f_node.out_dim

    @staticmethod
    def _edge_pattern(a: ad.Tensor):
        """Edge endpoints and receiver scatter matrix.

        The sparsity pattern is memoised on constant adjacency tensors: the
        same graph is visited thousands of times during finite-difference
        sweeps and once per epoch during training. Weights are always read
        from the current values.
        """
        if not a.requires_grad and a.meta is not None and "edges" in a.meta:
            return a.meta["edges"]
        senders, receivers = np.nonzero(a.values)
        if senders.size:
            scatter = np.zeros((a.values.shape[0], senders.size))
            scatter[receivers, np.arange(senders.size)] = 1.0
            scatter_t = ad.constant(scatter)
        else:
            scatter_t = None
        pattern = (senders, receivers, scatter_t)
        if not a.requires_grad:
            if a.meta is None:
                a.meta = {}
            a.meta["edges"] = pattern
        return pattern

    def __call__(self, h: ad.Tensor, a: ad.Tensor) -> ad.Tensor:
        n = h.shape[0]
        if a.shape != (n, n):
            raise ValueError(f"adjacency {a.shape} does not match {n} node states")
        senders, receivers, scatter = self._edge_pattern(a)
        if senders.size:
            h_recv = ad.gather_rows(h, receivers)
            h_send = ad.gather_rows(h, senders)
            messages = self.f_message(ad.concat_columns([h_recv, h_send]))
            if a.requires_grad:  # adjacency on the tape: differentiable weights
                weights = ad.gather(a, senders.reshape(-1, 1), receivers.reshape(-1, 1))
            else:
                weights = ad.constant(a.values[senders, receivers].reshape(-1, 1))
            messages = ad.multiply(messages, weights)
            aggregate = ad.matmul(scatter, messages)
        else:
            aggregate = ad.constant(np.zeros((n, self.f_message.out_dim)))
        return self.f_node(ad.concat_columns([h, aggregate]))

    def parameters(self) -> dict[str, ad.Tensor]:
        return {**self.f_message.parameters(), **self.f_node.parameters()}


class GcnLayer:
    """Symmetrically normalised graph convolution (self-loops added)."""

    def __init__(self, rng, in_dim: int, out_dim: int, activation: str, name: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.name = name
        self.activation = activation
        self.weight = ad.parameter(glorot(rng, in_dim, out_dim))

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, h: ad.Tensor, a: ad.Tensor) -> ad.Tensor:
        n = h.shape[0]
        if a.shape != (n, n):
            raise ValueError("adjacency must be square and match node states")
        if np.any(a.values < 0):
            raise ValueError("gcn requires non-negative adjacency")
        a_tilde = ad.add(a, ad.constant(np.eye(n)))
        inv_sqrt_deg = ad.reciprocal(ad.sqrt(ad.row_sum(a_tilde)))
        normalised = ad.multiply(ad.multiply(a_tilde, inv_sqrt_deg),
                                 ad.transpose(inv_sqrt_deg))
        out = ad.matmul(ad.matmul(normalised, h), self.weight)
        return ACTIVATIONS[self.activation](out)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {f"{self.name}.w": self.weight}


class PoolingBlock:
    """One coarsening stage: embedding net, assignment net, cluster count."""

    def __init__(self, embed_net, assign_net, clusters_out: int, assign_inputs: str):
        if assign_inputs not in ("structural", "node", "both"):
            raise ValueError(f"unknown assignment input mode {assign_inputs!r}")
        self.embed_net = embed_net
        self.assign_net = assign_net
        self.clusters_out = clusters_out
        self.assign_inputs = assign_inputs


def pool_forward(
    x: ad.Tensor,
    a: ad.Tensor,
    block: PoolingBlock,
    assign_features: ad.Tensor,
    node_mask: np.ndarray | None = None,
):
    """Coarsen a graph through soft cluster assignments.

    Returns (pooled features, tanh-bounded pooled adjacency, assignments).
    Padding nodes, when a mask is given, get uniform assignment rows and
    contribute nothing: their embedding rows are zeroed and their
    adjacency rows/columns are zero by construction.
    """
    if assign_features.shape[0] != x.shape[0]:
        raise ValueError("assignment features must have one row per node")
    z = block.embed_net(a, x)
    logits = block.assign_net(a, assign_features)
    if logits.shape[1] != block.clusters_out:
        raise ValueError(
            f"assignment net produced {logits.shape[1]} clusters, expected {block.clusters_out}"
        )
    if node_mask is not None:
        pad_rows = np.asarray(node_mask, dtype=float).reshape(-1) == 0
        pad_matrix = np.broadcast_to(pad_rows[:, None], logits.shape)
        logits = ad.masked_fill(logits, pad_matrix, 0.0)
        z = ad.multiply(z, ad.constant((~pad_rows).astype(float).reshape(-1, 1)))
    s = ad.row_softmax(logits)
    st = ad.transpose(s)
    x_next = ad.matmul(st, z)
    a_next = ad.tanh(ad.matmul(ad.matmul(st, a), s))
    return x_next, a_next, s


def _as_tensor(s) -> ad.Tensor:
    return s if isinstance(s, ad.Tensor) else ad.constant(np.asarray(s, dtype=np.float64))


def loss_le(s, node_count: int | None = None) -> ad.Tensor:
    """Mean row entropy of the assignment matrix (natural log).

    Zero exactly when every (real) row is one-hot, up to the 1e-12 clamp.
    """
    s = _as_tensor(s)
    if node_count is not None and node_count != s.shape[0]:
        s = ad.gather_rows(s, np.arange(node_count))
    n = s.shape[0]
    log_p = ad.log(ad.clamp_min(s, 1e-12))
    total = ad.sum_all(ad.multiply(s, log_p))
    return ad.scalar_multiply(total, -1.0 / n)


def loss_lc(s, node_count: int | None = None) -> ad.Tensor:
    """Uniformity deficit of the cluster mass distribution.

    The cluster mass q = (1/n) * 1^T S sums to one; the deficit
    ln(clusters) - H(q) is zero exactly at uniform mass and ln(clusters)
    when all mass sits on one cluster, so minimising it maximises the
    spread of nodes over clusters.
    """
    s = _as_tensor(s)
    if node_count is not None and node_count != s.shape[0]:
        s = ad.gather_rows(s, np.arange(node_count))
    n, clusters = s.shape
    q = ad.scalar_multiply(ad.col_sum(s), 1.0 / n)
    entropy = ad.scalar_multiply(
        ad.sum_all(ad.multiply(q, ad.log(ad.clamp_min(q, 1e-12)))), -1.0
    )
    deficit = ad.subtract(ad.constant([[np.log(clusters)]]), entropy)
    return ad.clamp_min(deficit, 0.0)


def cross_entropy(probs: ad.Tensor, label: int) -> ad.Tensor:
    """Negative log likelihood of one label under a softmax row."""
    picked = ad.gather(probs, np.array([[0]]), np.array([[int(label)]]))
    return ad.scalar_multiply(ad.log(ad.clamp_min(picked, 1e-12)), -1.0)
