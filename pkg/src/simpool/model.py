"""Hierarchical pooling model: two coarsening stages plus a classifier.

Stage 0 embeds nodes with a GMN encoder and two propagation steps and
assigns them to clusters from structural features, node features, or
both. Stage 1 embeds with a GCN and assigns through a two-layer MLP fed
by similarity features recomputed (differentiably) from the learned
coarse adjacency. Stage 2 sum-pools everything into a single row and a
dense softmax layer produces class probabilities. There is no link
prediction term anywhere.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import PaddedBatch
from .layers import (
    Dense,
    GcnLayer,
    GmnEncoder,
    GmnPropagation,
    MLP,
    PoolingBlock,
    cross_entropy,
    loss_lc,
    loss_le,
    pool_forward,
)
from .similarity import SimilarityConfig, symmetric_similarity_on_tape

__all__ = [
    "PropSpec",
    "GmnStackSpec",
    "ModelPreset",
    "PRESETS",
    "resolve_preset",
    "ConfigError",
    "LossTerms",
    "GraphForward",
    "BatchForward",
    "SimPoolModel",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"SPM1"


class ConfigError(ValueError):
    """Configuration inconsistent with the requested computation."""


@dataclass(frozen=True)
class PropSpec:
    message: int
    node: int
    activation: str


@dataclass(frozen=True)
class GmnStackSpec:
    encoder: int
    encoder_activation: str
    props: tuple[PropSpec, ...]


@dataclass(frozen=True)
class ModelPreset:
    """Architecture widths and training defaults for one dataset family."""

    name: str
    z_stack: GmnStackSpec
    s_stack: GmnStackSpec  # final prop node width equals clusters_1
    clusters_1: int
    clusters_2: int
    gcn1_units: int
    s1_hidden: int
    gcn2_units: int
    sim: SimilarityConfig
    w_e: float
    w_c: float
    learning_rate: float
    epochs: int


PRESETS: dict[str, ModelPreset] = {
    "enzymes": ModelPreset(
        name="enzymes",
        z_stack=GmnStackSpec(512, "relu", (PropSpec(512, 512, "relu"), PropSpec(512, 256, "linear"))),
        s_stack=GmnStackSpec(512, "relu", (PropSpec(512, 512, "relu"), PropSpec(512, 8, "linear"))),
        clusters_1=8,
        clusters_2=4,
        gcn1_units=512,
        s1_hidden=256,
        gcn2_units=1024,
        sim=SimilarityConfig(p=1, lam=0.0, alpha=1.0, k=12),
        w_e=1.0,
        w_c=1.0,
        learning_rate=1e-4,
        epochs=100,
    ),
    "dd": ModelPreset(
        name="dd",
        z_stack=GmnStackSpec(1024, "relu", (PropSpec(1024, 1024, "relu"), PropSpec(1024, 1024, "linear"))),
        s_stack=GmnStackSpec(1024, "relu", (PropSpec(1024, 1024, "relu"), PropSpec(1024, 32, "linear"))),
        clusters_1=32,
        clusters_2=8,
        gcn1_units=2048,
        s1_hidden=2048,
        gcn2_units=4096,
        sim=SimilarityConfig(p=1, lam=0.0, alpha=1.0, k=25),
        w_e=0.4,
        w_c=1.0,
        learning_rate=1e-4,
        epochs=230,
    ),
}
PRESET_ALIASES = {
    "enzymes-paper": "enzymes",
    "dd-paper": "dd",
}


def _scale_width(units: int, scale: float) -> int:
    return max(1, round(units * scale))


def resolve_preset(name: str, scale: float = 1.0) -> ModelPreset:
    """Look up a preset and multiply its hidden widths by `scale`.

    Cluster counts, top-k width and loss weights are structural choices
    and stay fixed.
    """
    key = PRESET_ALIASES.get(name, name)
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    preset = PRESETS[key]
    if scale == 1.0:
        return preset

    def scale_stack(stack: GmnStackSpec, final_node: int | None) -> GmnStackSpec:
        props = []
        for i, prop in enumerate(stack.props):
            node = prop.node
            if final_node is not None and i == len(stack.props) - 1:
                node = final_node
            else:
                node = _scale_width(node, scale)
            props.append(PropSpec(_scale_width(prop.message, scale), node, prop.activation))
        return GmnStackSpec(_scale_width(stack.encoder, scale), stack.encoder_activation, tuple(props))

    return replace(
        preset,
        z_stack=scale_stack(preset.z_stack, None),
        s_stack=scale_stack(preset.s_stack, preset.clusters_1),
        gcn1_units=_scale_width(preset.gcn1_units, scale),
        s1_hidden=_scale_width(preset.s1_hidden, scale),
        gcn2_units=_scale_width(preset.gcn2_units, scale),
    )


@dataclass
class LossTerms:
    """Scalar loss components of one forward pass."""

    task_loss: float
    l_e: tuple[float, ...]
    l_c_uniformity: tuple[float, ...]
    weighted_total: float


@dataclass
class GraphForward:
    probs: ad.Tensor  # 1 x num_classes, rows sum to 1
    ce: ad.Tensor
    le: tuple[ad.Tensor, ad.Tensor]
    lc: tuple[ad.Tensor, ad.Tensor]
    assign_argmax: tuple[np.ndarray, np.ndarray]


@dataclass
class BatchForward:
    probs: np.ndarray  # B x num_classes
    task_loss: ad.Tensor
    le: tuple[ad.Tensor, ad.Tensor]
    lc: tuple[ad.Tensor, ad.Tensor]
    cluster_ids: tuple[set[int], set[int]]

    def total(self, w_e: float, w_c: float) -> ad.Tensor:
        out = self.task_loss
        if w_e != 0.0:
            out = ad.add(out, ad.scalar_multiply(ad.add(self.le[0], self.le[1]), w_e))
        if w_c != 0.0:
            out = ad.add(out, ad.scalar_multiply(ad.add(self.lc[0], self.lc[1]), w_c))
        return out

    def loss_terms(self, w_e: float, w_c: float) -> LossTerms:
        le = tuple(t.item() for t in self.le)
        lc = tuple(t.item() for t in self.lc)
        task = self.task_loss.item()
        return LossTerms(
            task_loss=task,
            l_e=le,
            l_c_uniformity=lc,
            weighted_total=task + w_e * sum(le) + w_c * sum(lc),
        )


class _GmnStack:
    """Encoder followed by propagation layers; shared by Z- and S-nets."""

    def __init__(self, rng, in_dim: int, spec: GmnStackSpec, name: str):
        self.encoder = GmnEncoder(rng, in_dim, spec.encoder, spec.encoder_activation, f"{name}.enc")
        self.props = []
        width = spec.encoder
        for i, prop in enumerate(spec.props):
            self.props.append(
                GmnPropagation(rng, width, prop.message, prop.node, prop.activation, f"{name}.prop{i}")
            )
            width = prop.node
        self.out_dim = width

    def __call__(self, a: ad.Tensor, x: ad.Tensor) -> ad.Tensor:
        h = self.encoder(x)
        for prop in self.props:
            h = prop(h, a)
        return h

    def parameters(self) -> dict[str, ad.Tensor]:
        out = dict(self.encoder.parameters())
        for prop in self.props:
            out.update(prop.parameters())
        return out


class SimPoolModel:
    """Two pooling stages and a sum-pool classifier head."""

    def __init__(
        self,
        preset: ModelPreset,
        feature_dim: int,
        num_classes: int,
        assign_inputs: str = "structural",
        seed: int = 0,
        sim: SimilarityConfig | None = None,
    ):
        if assign_inputs not in ("structural", "node", "both"):
            raise ConfigError(f"unknown assignment input mode {assign_inputs!r}")
        self.preset = preset
        self.sim = sim if sim is not None else preset.sim
        self.assign_inputs = assign_inputs
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.seed = seed
        rng = np.random.default_rng(seed)

        k = self.sim.k
        f0_dim = {"structural": k, "node": feature_dim, "both": k + feature_dim}[assign_inputs]
        self.z_stack = _GmnStack(rng, feature_dim, preset.z_stack, "z")
        self.s_stack = _GmnStack(rng, f0_dim, preset.s_stack, "s0")
        d1 = self.z_stack.out_dim
        self.block0 = PoolingBlock(
            embed_net=self.z_stack,
            assign_net=self.s_stack,
            clusters_out=preset.clusters_1,
            assign_inputs=assign_inputs,
        )

        self.gcn1 = GcnLayer(rng, d1, preset.gcn1_units, "relu", "gcn1")
        f1_dim = {
            "structural": preset.clusters_1,
            "node": d1,
            "both": preset.clusters_1 + d1,
        }[assign_inputs]
        self.s1_mlp = MLP(
            rng,
            [f1_dim, preset.s1_hidden, preset.clusters_2],
            ["relu", "linear"],
            "s1",
        )
        self.block1 = PoolingBlock(
            embed_net=lambda a, x: self.gcn1(x, a),
            assign_net=lambda a, f: self.s1_mlp(f),
            clusters_out=preset.clusters_2,
            assign_inputs=assign_inputs,
        )

        self.gcn2 = GcnLayer(rng, preset.gcn1_units, preset.gcn2_units, "relu", "gcn2")
        self.classifier = Dense(rng, preset.gcn2_units, num_classes, "linear", "classifier")
        # single-slot memo of wrapped inputs; hit by repeated passes over the
        # same graph (finite differences, evaluation), replaced otherwise
        self._input_memo: tuple | None = None

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        out.update(self.z_stack.parameters())
        out.update(self.s_stack.parameters())
        out.update(self.gcn1.parameters())
        out.update(self.s1_mlp.parameters())
        out.update(self.gcn2.parameters())
        out.update(self.classifier.parameters())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------

    def _assign_features_0(self, x: ad.Tensor, mapped: np.ndarray | None) -> ad.Tensor:
        if self.assign_inputs == "node":
            return x
        if mapped is None:
            raise ConfigError(
                "structural assignment features requested but no precomputed "
                "mapped similarity was supplied; run preprocessing first"
            )
        if mapped.shape != (x.shape[0], self.sim.k):
            raise ConfigError(
                f"mapped similarity shape {mapped.shape} != ({x.shape[0]}, {self.sim.k})"
            )
        structural = ad.constant(mapped)
        if self.assign_inputs == "structural":
            return structural
        return ad.concat_columns([structural, x])

    def _assign_features_1(self, x1: ad.Tensor, a1: ad.Tensor) -> ad.Tensor:
        if self.assign_inputs == "node":
            return x1
        structural = symmetric_similarity_on_tape(a1, p=self.sim.p, lam=self.sim.lam)
        if self.assign_inputs == "structural":
            return structural
        return ad.concat_columns([structural, x1])

    def _wrap_inputs(self, adjacency, features, mapped):
        key = (id(adjacency), id(features), id(mapped))
        if self._input_memo is not None and self._input_memo[0] == key:
            return self._input_memo[2]
        a = ad.constant(np.asarray(adjacency, dtype=np.float64))
        x = ad.constant(np.asarray(features, dtype=np.float64))
        f0 = self._assign_features_0(x, mapped)
        wrapped = (a, x, f0)
        # hold references so ids stay valid while memoised
        self._input_memo = (key, (adjacency, features, mapped), wrapped)
        return wrapped

    def forward_graph(self, adjacency, features, mapped=None, label: int | None = None) -> GraphForward:
        a, x, f0 = self._wrap_inputs(adjacency, features, mapped)
        x1, a1, s0 = pool_forward(x, a, self.block0, f0)
        f1 = self._assign_features_1(x1, a1)
        x2, a2, s1 = pool_forward(x1, a1, self.block1, f1)
        z2 = self.gcn2(x2, a2)
        pooled = ad.col_sum(z2)  # global sum pool: all-ones assignment
        probs = ad.row_softmax(self.classifier(pooled))
        ce = cross_entropy(probs, label) if label is not None else ad.constant([[0.0]])
        return GraphForward(
            probs=probs,
            ce=ce,
            le=(loss_le(s0), loss_le(s1)),
            lc=(loss_lc(s0), loss_lc(s1)),
            assign_argmax=(
                np.argmax(s0.values, axis=1),
                np.argmax(s1.values, axis=1),
            ),
        )

    def forward_batch(self, batch: PaddedBatch, mapped_by_index=None) -> BatchForward:
        counts = batch.node_counts()
        b = batch.size
        ce_terms, le0, le1, lc0, lc1 = [], [], [], [], []
        probs = np.zeros((b, self.num_classes))
        ids0: set[int] = set()
        ids1: set[int] = set()
        for slot in range(b):
            n = int(counts[slot])
            mapped = None
            if mapped_by_index is not None:
                mapped = mapped_by_index[int(batch.indices[slot])][:n]
            out = self.forward_graph(
                batch.adjacency[slot, :n, :n],
                batch.features[slot, :n],
                mapped=mapped,
                label=int(batch.labels[slot]),
            )
            probs[slot] = out.probs.values[0]
            ce_terms.append(out.ce)
            le0.append(out.le[0])
            le1.append(out.le[1])
            lc0.append(out.lc[0])
            lc1.append(out.lc[1])
            ids0.update(int(c) for c in np.unique(out.assign_argmax[0]))
            ids1.update(int(c) for c in np.unique(out.assign_argmax[1]))

        def mean(terms):
            acc = terms[0]
            for t in terms[1:]:
                acc = ad.add(acc, t)
            return ad.scalar_multiply(acc, 1.0 / len(terms))

        return BatchForward(
            probs=probs,
            task_loss=mean(ce_terms),
            le=(mean(le0), mean(le1)),
            lc=(mean(lc0), mean(lc1)),
            cluster_ids=(ids0, ids1),
        )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: SimPoolModel) -> None:
    """Versioned binary container of named parameter tensors."""
    path = os.fspath(path)
    params = model.parameters()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<qq", 1, len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor.values, dtype="<f8")
            fh.write(struct.pack("<q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, model: SimPoolModel) -> None:
    """Restore parameters in place; names and shapes must match exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"bad checkpoint magic {raw[:4]!r}")
    pos = 4
    version, count = struct.unpack_from("<qq", raw, pos)
    pos += 16
    if version != 1:
        raise ConfigError(f"unsupported checkpoint version {version}")
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<q", raw, pos)
        pos += 8
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<q", raw, pos)
        pos += 8
        shape = struct.unpack_from(f"<{ndim}q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        loaded[name] = values.copy()
    params = model.parameters()
    if set(params) != set(loaded):
        missing = sorted(set(params) ^ set(loaded))
        raise ConfigError(f"checkpoint incompatible with model; mismatched names: {missing[:4]}")
    for name, tensor in params.items():
        if loaded[name].shape != tensor.values.shape:
            raise ConfigError(
                f"checkpoint tensor {name} has shape {loaded[name].shape}, "
                f"expected {tensor.values.shape}"
            )
        tensor.values[...] = loaded[name]
