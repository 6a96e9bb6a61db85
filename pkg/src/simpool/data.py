"""Graph-classification datasets: loading, validation, batching, splits.

Datasets arrive as TU-style text files (1-based edge list, graph
indicator, graph labels, optional node labels). Loaded graphs are
immutable; adjacency is kept coordinate-sparse, features dense.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Graph",
    "Dataset",
    "PaddedBatch",
    "DatasetFormatError",
    "DatasetIntegrityError",
    "load_tu_dataset",
    "make_batches",
    "kfold_split",
    "save_dataset_cache",
    "load_dataset_cache",
    "dataset_hash",
]

DATASET_MAGIC = b"SPG1"


class DatasetFormatError(ValueError):
    """A mandatory dataset file is missing or unparseable."""


class DatasetIntegrityError(ValueError):
    """Dataset files are present but internally inconsistent."""


@dataclass(frozen=True)
class Graph:
    """One labelled graph: sparse adjacency plus dense node features."""

    node_count: int
    adjacency: sp.csr_matrix
    node_features: np.ndarray
    label: int

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("graph must have at least one node")
        if self.adjacency.shape != (self.node_count, self.node_count):
            raise ValueError(
                f"adjacency shape {self.adjacency.shape} != node count {self.node_count}"
            )
        if self.adjacency.nnz and self.adjacency.data.min() < 0:
            raise ValueError("adjacency entries must be non-negative")
        if self.node_features.shape[0] != self.node_count:
            raise ValueError("feature rows must match node count")

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def dense_adjacency(self) -> np.ndarray:
        return self.adjacency.toarray()

    def check_symmetric(self) -> bool:
        return (self.adjacency != self.adjacency.T).nnz == 0


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of graphs sharing a feature space."""

    name: str
    graphs: tuple[Graph, ...]
    num_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("dataset needs at least one class")
        dims = {g.feature_dim for g in self.graphs}
        if len(dims) > 1:
            raise DatasetIntegrityError(f"inconsistent feature dims {sorted(dims)}")
        for g in self.graphs:
            if not 0 <= g.label < self.num_classes:
                raise DatasetIntegrityError(f"label {g.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].feature_dim if self.graphs else 0

    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)


@dataclass(frozen=True)
class PaddedBatch:
    """Dense, zero-padded batch; masked rows/columns are exactly zero."""

    adjacency: np.ndarray  # B x N x N
    features: np.ndarray  # B x N x d
    node_mask: np.ndarray  # B x N, leading ones
    labels: np.ndarray  # B
    indices: np.ndarray  # B source positions in the dataset

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]

    def node_counts(self) -> np.ndarray:
        return self.node_mask.sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# TU-format loading
# ---------------------------------------------------------------------------

def _read_int_rows(path: str, expected_cols: int) -> np.ndarray:
    """Parse whitespace/comma separated integer rows."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != expected_cols:
                raise DatasetFormatError(
                    f"{os.path.basename(path)}:{lineno}: expected {expected_cols} fields, got {len(parts)}"
                )
            try:
                rows.append([int(p) for p in parts])
            except ValueError as exc:
                raise DatasetFormatError(
                    f"{os.path.basename(path)}:{lineno}: non-integer field"
                ) from exc
    return np.asarray(rows, dtype=np.int64).reshape(-1, expected_cols)


def load_tu_dataset(root_path, name: str) -> Dataset:
    """Load a TU-format dataset directory.

    Node features are one-hot node labels when `<name>_node_labels.txt`
    exists, otherwise a single degree scalar normalised by the dataset's
    maximum degree. Adjacency is symmetrised; class labels are remapped to
    a contiguous range.
    """
    root = os.fspath(root_path)

    def path_of(suffix: str) -> str:
        return os.path.join(root, f"{name}_{suffix}.txt")

    for suffix in ("A", "graph_indicator", "graph_labels"):
        if not os.path.isfile(path_of(suffix)):
            raise DatasetFormatError(f"missing mandatory file {name}_{suffix}.txt under {root}")

    edges = _read_int_rows(path_of("A"), 2)
    indicator = _read_int_rows(path_of("graph_indicator"), 1).reshape(-1)
    graph_labels_raw = _read_int_rows(path_of("graph_labels"), 1).reshape(-1)

    num_nodes = indicator.shape[0]
    if num_nodes == 0:
        raise DatasetFormatError("empty graph indicator")
    num_graphs = graph_labels_raw.shape[0]
    if indicator.min() < 1 or indicator.max() != num_graphs:
        raise DatasetIntegrityError(
            f"graph indicator range [{indicator.min()}, {indicator.max()}] "
            f"inconsistent with {num_graphs} graph labels"
        )
    if np.any(np.diff(indicator) < 0) or len(np.unique(indicator)) != num_graphs:
        raise DatasetIntegrityError("graph indicator must be sorted and contiguous")

    # node id ranges per graph (TU ids are 1-based and globally consecutive)
    counts = np.bincount(indicator, minlength=num_graphs + 1)[1:]
    offsets = np.concatenate([[0], np.cumsum(counts)])

    if edges.size:
        if edges.min() < 1 or edges.max() > num_nodes:
            raise DatasetIntegrityError("edge endpoint outside the node id range")
        src = edges[:, 0] - 1
        dst = edges[:, 1] - 1
        if np.any(indicator[src] != indicator[dst]):
            bad = int(np.argmax(indicator[src] != indicator[dst]))
            raise DatasetIntegrityError(
                f"edge ({edges[bad, 0]}, {edges[bad, 1]}) crosses graph boundaries"
            )
    else:
        src = dst = np.zeros(0, dtype=np.int64)

    node_labels = None
    if os.path.isfile(path_of("node_labels")):
        node_labels = _read_int_rows(path_of("node_labels"), 1).reshape(-1)
        if node_labels.shape[0] != num_nodes:
            raise DatasetIntegrityError("node label count differs from node count")
        label_values = np.unique(node_labels)
        label_pos = {int(v): i for i, v in enumerate(label_values)}
        feature_dim = len(label_values)

    edge_graph = indicator[src] - 1 if src.size else np.zeros(0, dtype=np.int64)
    order = np.argsort(edge_graph, kind="stable")
    src, dst, edge_graph = src[order], dst[order], edge_graph[order]
    edge_offsets = np.searchsorted(edge_graph, np.arange(num_graphs + 1))

    adjacencies = []
    degrees = np.zeros(num_nodes)
    for g in range(num_graphs):
        lo, hi = edge_offsets[g], edge_offsets[g + 1]
        n = int(counts[g])
        rows = src[lo:hi] - offsets[g]
        cols = dst[lo:hi] - offsets[g]
        data = np.ones(hi - lo, dtype=np.float64)
        adj = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
        adj.data[:] = 1.0  # collapse duplicate listings
        adj = adj.maximum(adj.T)  # symmetrise
        adj.eliminate_zeros()
        adjacencies.append(adj)
        degrees[offsets[g]:offsets[g] + n] = np.asarray(adj.sum(axis=1)).reshape(-1)

    label_values_raw = np.unique(graph_labels_raw)
    class_of = {int(v): i for i, v in enumerate(label_values_raw)}
    num_classes = len(label_values_raw)

    max_degree = degrees.max() if num_nodes else 1.0
    graphs = []
    for g in range(num_graphs):
        n = int(counts[g])
        lo = offsets[g]
        if node_labels is not None:
            feats = np.zeros((n, feature_dim))
            for local, raw in enumerate(node_labels[lo:lo + n]):
                feats[local, label_pos[int(raw)]] = 1.0
        else:
            feats = (degrees[lo:lo + n] / max(max_degree, 1.0)).reshape(n, 1)
        graphs.append(
            Graph(
                node_count=n,
                adjacency=adjacencies[g],
                node_features=feats,
                label=class_of[int(graph_labels_raw[g])],
            )
        )

    ds = Dataset(
        name=name,
        graphs=tuple(graphs),
        num_classes=num_classes,
        metadata={
            "feature_kind": "node_label_onehot" if node_labels is not None else "degree_scalar",
            "source": root,
        },
    )
    ds.metadata["content_hash"] = dataset_hash(ds)
    return ds


# ---------------------------------------------------------------------------
# batching and splits
# ---------------------------------------------------------------------------

def make_batches(
    ds: Dataset,
    batch_size: int,
    shuffle_seed: int | None = None,
    subset: np.ndarray | None = None,
) -> list[PaddedBatch]:
    """Partition a dataset (or an index subset) into padded batches."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if len(ds) == 0:
        raise ValueError("cannot batch an empty dataset")
    positions = np.arange(len(ds)) if subset is None else np.asarray(subset, dtype=np.int64)
    if positions.size == 0:
        raise ValueError("cannot batch an empty index subset")
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        positions = positions[rng.permutation(positions.size)]

    batches = []
    for start in range(0, positions.size, batch_size):
        chunk = positions[start:start + batch_size]
        graphs = [ds.graphs[i] for i in chunk]
        n_max = max(g.node_count for g in graphs)
        b = len(graphs)
        adjacency = np.zeros((b, n_max, n_max))
        features = np.zeros((b, n_max, ds.feature_dim))
        mask = np.zeros((b, n_max))
        labels = np.zeros(b, dtype=np.int64)
        for slot, g in enumerate(graphs):
            n = g.node_count
            adjacency[slot, :n, :n] = g.dense_adjacency()
            features[slot, :n, :] = g.node_features
            mask[slot, :n] = 1.0
            labels[slot] = g.label
        batches.append(
            PaddedBatch(
                adjacency=adjacency,
                features=features,
                node_mask=mask,
                labels=labels,
                indices=chunk.copy(),
            )
        )
    return batches


def kfold_split(ds: Dataset, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold split: disjoint validation folds covering the dataset.

    Overall fold sizes differ by at most one, and so does each class's
    histogram across folds (items are dealt to folds round-robin with a
    pointer that carries over between classes).
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if folds > len(ds):
        raise ValueError(f"cannot split {len(ds)} graphs into {folds} folds")
    rng = np.random.default_rng(seed)
    labels = ds.labels()
    assignment = np.zeros(len(ds), dtype=np.int64)
    pointer = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        for idx in members:
            assignment[idx] = pointer % folds
            pointer += 1

    splits = []
    everything = np.arange(len(ds))
    for f in range(folds):
        val = everything[assignment == f]
        train = everything[assignment != f]
        splits.append((train, val))
    return splits


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------

def _serialize_dataset(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    name_bytes = ds.name.encode("utf-8")
    buf.write(struct.pack("<qqqq", 1, len(name_bytes), ds.num_classes, len(ds)))
    buf.write(name_bytes)
    buf.write(struct.pack("<q", ds.feature_dim))
    for g in ds.graphs:
        coo = g.adjacency.tocoo()
        buf.write(struct.pack("<qqq", g.node_count, g.label, coo.nnz))
        buf.write(np.ascontiguousarray(coo.row, dtype="<i8").tobytes())
        buf.write(np.ascontiguousarray(coo.col, dtype="<i8").tobytes())
        buf.write(np.ascontiguousarray(coo.data, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(g.node_features, dtype="<f8").tobytes())
    return buf.getvalue()


def save_dataset_cache(path, ds: Dataset) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(_serialize_dataset(ds))
    os.replace(tmp, path)


def load_dataset_cache(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"bad dataset cache magic {raw[:4]!r}")
    view = memoryview(raw)
    pos = 4
    version, name_len, num_classes, count = struct.unpack_from("<qqqq", view, pos)
    pos += 32
    if version != 1:
        raise DatasetFormatError(f"unsupported dataset cache version {version}")
    name = bytes(view[pos:pos + name_len]).decode("utf-8")
    pos += name_len
    (feature_dim,) = struct.unpack_from("<q", view, pos)
    pos += 8
    graphs = []
    for _ in range(count):
        n, label, nnz = struct.unpack_from("<qqq", view, pos)
        pos += 24
        rows = np.frombuffer(view, dtype="<i8", count=nnz, offset=pos)
        pos += 8 * nnz
        cols = np.frombuffer(view, dtype="<i8", count=nnz, offset=pos)
        pos += 8 * nnz
        data = np.frombuffer(view, dtype="<f8", count=nnz, offset=pos)
        pos += 8 * nnz
        feats = np.frombuffer(view, dtype="<f8", count=n * feature_dim, offset=pos)
        pos += 8 * n * feature_dim
        adj = sp.coo_matrix((data.copy(), (rows.copy(), cols.copy())), shape=(n, n)).tocsr()
        graphs.append(
            Graph(
                node_count=int(n),
                adjacency=adj,
                node_features=feats.reshape(n, feature_dim).copy(),
                label=int(label),
            )
        )
    ds = Dataset(name=name, graphs=tuple(graphs), num_classes=int(num_classes))
    ds.metadata["content_hash"] = dataset_hash(ds)
    return ds


def dataset_hash(ds: Dataset) -> str:
    """Content hash over the canonical serialization."""
    return hashlib.sha256(_serialize_dataset(ds)).hexdigest()
