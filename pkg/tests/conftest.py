"""Shared fixtures: synthetic TU-format datasets and tiny graph factories."""

import numpy as np
import pytest

from simpool.data import load_tu_dataset


def write_tu_dataset(root, name, graphs, graph_labels, node_labels=None):
    """Write TU-format text files for a list of dense adjacency matrices.

    `graphs` is a list of (n, n) 0/1 arrays; undirected edges are emitted
    in both directions, matching the common convention.
    """
    root.mkdir(parents=True, exist_ok=True)
    edge_lines = []
    indicator_lines = []
    offset = 0
    for gid, adj in enumerate(graphs, start=1):
        n = adj.shape[0]
        for i in range(n):
            indicator_lines.append(str(gid))
            for j in range(n):
                if adj[i, j] != 0:
                    edge_lines.append(f"{offset + i + 1}, {offset + j + 1}")
        offset += n
    (root / f"{name}_A.txt").write_text("\n".join(edge_lines) + "\n")
    (root / f"{name}_graph_indicator.txt").write_text("\n".join(indicator_lines) + "\n")
    (root / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(l) for l in graph_labels) + "\n"
    )
    if node_labels is not None:
        (root / f"{name}_node_labels.txt").write_text(
            "\n".join(str(l) for l in node_labels) + "\n"
        )
    return root


def ring_graph(n):
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1.0
    return a


def clique_pair_graph(m):
    """Two m-cliques joined by a single bridge edge."""
    n = 2 * m
    a = np.zeros((n, n))
    a[:m, :m] = 1.0
    a[m:, m:] = 1.0
    np.fill_diagonal(a, 0.0)
    a[m - 1, m] = a[m, m - 1] = 1.0
    return a


def random_graph(rng, n, p):
    a = (rng.random((n, n)) < p).astype(np.float64)
    a = np.triu(a, 1)
    return a + a.T


@pytest.fixture
def toy_dataset(tmp_path):
    """Ten small graphs, two structurally distinct classes, node labels."""
    rng = np.random.default_rng(99)
    graphs, labels, node_labels = [], [], []
    for i in range(10):
        if i % 2 == 0:
            g = ring_graph(int(rng.integers(5, 9)))
            labels.append(1)
        else:
            g = clique_pair_graph(int(rng.integers(3, 5)))
            labels.append(2)
        graphs.append(g)
        node_labels.extend(int(d) for d in g.sum(axis=1))
    root = write_tu_dataset(tmp_path / "TOY", "TOY", graphs, labels, node_labels)
    return load_tu_dataset(root, "TOY")


def separable_dataset(tmp_path, count=60, seed=5):
    """Rings vs bridged cliques: separable by structure and degree."""
    rng = np.random.default_rng(seed)
    graphs, labels = [], []
    for i in range(count):
        if i % 2 == 0:
            graphs.append(ring_graph(int(rng.integers(6, 13))))
            labels.append(0)
        else:
            graphs.append(clique_pair_graph(int(rng.integers(3, 6))))
            labels.append(1)
    root = write_tu_dataset(tmp_path / "SEP", "SEP", graphs, [l + 1 for l in labels])
    return load_tu_dataset(root, "SEP")
