"""Tests for GMN/GCN layers, pooling, and the assignment regularisers."""

import numpy as np
import pytest

from simpool import autodiff as ad
from simpool.layers import (
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

from conftest import random_graph


def scalarize_with(rng, out):
    c = ad.constant(rng.normal(size=out.shape))
    return ad.sum_all(ad.multiply(out, c))


class TestGmnEncoder:
    def test_identity_weights_pass_through_activation(self):
        rng = np.random.default_rng(0)
        enc = GmnEncoder(rng, 4, 4, "relu", "enc")
        enc.dense.weight.values[...] = np.eye(4)
        enc.dense.bias.values[...] = 0.0
        x = rng.normal(size=(6, 4))
        out = enc(ad.constant(x))
        np.testing.assert_array_equal(out.values, np.maximum(x, 0.0))

    def test_rowwise_map_no_mixing(self):
        rng = np.random.default_rng(1)
        enc = GmnEncoder(rng, 3, 5, "tanh", "enc")
        x = rng.normal(size=(4, 3))
        x[2] = x[0]  # duplicate row
        out = enc(ad.constant(x)).values
        np.testing.assert_array_equal(out[2], out[0])

    def test_gradient_check(self):
        rng = np.random.default_rng(2)
        enc = GmnEncoder(rng, 3, 4, "relu", "enc")
        x = ad.constant(rng.normal(size=(5, 3)))
        c = rng.normal(size=(5, 4))

        def f(w):
            return ad.sum_all(ad.multiply(enc(x), ad.constant(c)))

        for p in enc.parameters().values():
            assert ad.grad_check(lambda _: f(None), p) < 1e-4


class TestGmnPropagation:
    def test_no_edges_uses_zero_aggregate(self):
        rng = np.random.default_rng(3)
        prop = GmnPropagation(rng, 3, 4, 3, "tanh", "prop")
        h = rng.normal(size=(5, 3))
        out = prop(ad.constant(h), ad.constant(np.zeros((5, 5)))).values
        expected = prop.f_node(ad.constant(np.concatenate([h, np.zeros((5, 4))], axis=1))).values
        np.testing.assert_array_equal(out, expected)

    def test_single_edge_aggregate_is_sole_message(self):
        rng = np.random.default_rng(4)
        prop = GmnPropagation(rng, 2, 3, 2, "linear", "prop")
        h = rng.normal(size=(2, 2))
        a = np.zeros((2, 2))
        a[0, 1] = 1.0  # message 0 -> 1 only
        out = prop(ad.constant(h), ad.constant(a)).values
        msg = prop.f_message(ad.constant(np.concatenate([h[1], h[0]]).reshape(1, -1))).values
        agg = np.zeros((2, 3))
        agg[1] = msg[0]
        expected = prop.f_node(ad.constant(np.concatenate([h, agg], axis=1))).values
        np.testing.assert_allclose(out, expected, atol=1e-14)

    def test_edge_weight_scales_message(self):
        rng = np.random.default_rng(5)
        prop = GmnPropagation(rng, 2, 2, 2, "linear", "prop")
        h = rng.normal(size=(2, 2))
        a1 = np.zeros((2, 2))
        a1[0, 1] = 1.0
        a3 = a1 * 3.0
        out1 = prop(ad.constant(h), ad.constant(a1)).values
        out3 = prop(ad.constant(h), ad.constant(a3)).values
        # receiver 1's aggregate triples; f_node is affine so difference scales
        assert not np.allclose(out1[1], out3[1])
        np.testing.assert_allclose(out1[0], out3[0], atol=1e-14)

    def test_gradient_through_two_stacked_propagations(self):
        rng = np.random.default_rng(6)
        p1 = GmnPropagation(rng, 3, 4, 4, "relu", "p1")
        p2 = GmnPropagation(rng, 4, 4, 3, "linear", "p2")
        a = ad.constant(random_graph(rng, 6, 0.5))
        x = rng.normal(size=(6, 3))
        c = rng.normal(size=(6, 3))

        def forward():
            h = p2(p1(ad.constant(x), a), a)
            return ad.sum_all(ad.multiply(h, ad.constant(c)))

        params = {**p1.parameters(), **p2.parameters()}
        for name, p in params.items():
            err = ad.grad_check(lambda _: forward(), p)
            assert err < 1e-4, f"{name}: {err:.2e}"


class TestGcn:
    def test_empty_graph_reduces_to_dense(self):
        rng = np.random.default_rng(7)
        gcn = GcnLayer(rng, 3, 3, "relu", "gcn")
        gcn.weight.values[...] = np.eye(3)
        h = rng.normal(size=(4, 3))
        out = gcn(ad.constant(h), ad.constant(np.zeros((4, 4)))).values
        np.testing.assert_allclose(out, np.maximum(h, 0.0), atol=1e-14)

    def test_symmetric_inputs_give_equal_rows(self):
        rng = np.random.default_rng(8)
        gcn = GcnLayer(rng, 3, 5, "relu", "gcn")
        h = np.tile(rng.normal(size=(1, 3)), (2, 1))
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = gcn(ad.constant(h), ad.constant(a)).values
        np.testing.assert_allclose(out[0], out[1], atol=1e-14)

    def test_negative_adjacency_rejected(self):
        rng = np.random.default_rng(9)
        gcn = GcnLayer(rng, 2, 2, "relu", "gcn")
        with pytest.raises(ValueError):
            gcn(ad.constant(np.ones((2, 2))), ad.constant(-np.ones((2, 2))))

    def test_gradient_check(self):
        rng = np.random.default_rng(10)
        gcn = GcnLayer(rng, 3, 4, "relu", "gcn")
        a = ad.constant(random_graph(rng, 5, 0.6))
        x = rng.normal(size=(5, 3))
        c = rng.normal(size=(5, 4))

        def f(_):
            return ad.sum_all(ad.multiply(gcn(ad.constant(x), a), ad.constant(c)))

        assert ad.grad_check(f, gcn.weight) < 1e-4

    def test_gradient_flows_into_adjacency(self):
        rng = np.random.default_rng(11)
        gcn = GcnLayer(rng, 3, 3, "tanh", "gcn")
        x = rng.normal(size=(4, 3))
        c = rng.normal(size=(4, 3))
        a = ad.parameter(random_graph(rng, 4, 0.7) + 0.05)

        def f(t):
            sym = ad.scalar_multiply(ad.add(t, ad.transpose(t)), 0.5)
            return ad.sum_all(ad.multiply(gcn(ad.constant(x), sym), ad.constant(c)))

        assert ad.grad_check(f, a) < 1e-4


def make_identity_block(rng, n, d):
    """Pooling block whose assignment logits force S = I exactly."""
    embed = lambda a, x: x
    assign = lambda a, f: ad.constant(1000.0 * np.eye(n))
    return PoolingBlock(embed, assign, clusters_out=n, assign_inputs="node")


class TestPoolForward:
    def test_identity_assignment(self):
        rng = np.random.default_rng(12)
        n, d = 5, 3
        x = ad.constant(rng.normal(size=(n, d)))
        a_vals = random_graph(rng, n, 0.5)
        block = make_identity_block(rng, n, d)
        x1, a1, s = pool_forward(x, ad.constant(a_vals), block, x)
        np.testing.assert_array_equal(s.values, np.eye(n))
        np.testing.assert_array_equal(x1.values, x.values)
        np.testing.assert_allclose(a1.values, np.tanh(a_vals), atol=1e-15)

    def test_collapse_to_single_cluster(self):
        rng = np.random.default_rng(13)
        n, d, c = 4, 3, 3
        z = rng.normal(size=(n, d))
        logits = np.zeros((n, c))
        logits[:, 0] = 1000.0
        block = PoolingBlock(
            embed_net=lambda a, x: ad.constant(z),
            assign_net=lambda a, f: ad.constant(logits),
            clusters_out=c,
            assign_inputs="node",
        )
        x = ad.constant(rng.normal(size=(n, d)))
        x1, a1, s = pool_forward(x, ad.constant(random_graph(rng, n, 0.5)), block, x)
        np.testing.assert_allclose(x1.values[0], z.sum(axis=0), atol=1e-12)
        np.testing.assert_allclose(x1.values[1:], 0.0, atol=1e-12)

    def test_coarse_adjacency_double_sum_oracle(self):
        rng = np.random.default_rng(14)
        n, c = 8, 3
        a_vals = random_graph(rng, n, 0.4)
        logits = rng.normal(size=(n, c))
        block = PoolingBlock(
            embed_net=lambda a, x: x,
            assign_net=lambda a, f: ad.constant(logits),
            clusters_out=c,
            assign_inputs="node",
        )
        x = ad.constant(rng.normal(size=(n, 2)))
        _, a1, s = pool_forward(x, ad.constant(a_vals), block, x)
        sv = s.values
        expected = np.zeros((c, c))
        for ci in range(c):
            for cj in range(c):
                acc = 0.0
                for i in range(n):
                    for j in range(n):
                        acc += sv[i, ci] * a_vals[i, j] * sv[j, cj]
                expected[ci, cj] = acc
        np.testing.assert_allclose(a1.values, np.tanh(expected), rtol=1e-10)

    def test_coarse_adjacency_range(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            n, c = 7, 4
            a_vals = random_graph(rng, n, 0.6) * rng.uniform(0.5, 3.0)
            logits = rng.normal(size=(n, c))
            block = PoolingBlock(
                embed_net=lambda a, x: x,
                assign_net=lambda a, f: ad.constant(logits),
                clusters_out=c,
                assign_inputs="node",
            )
            x = ad.constant(rng.normal(size=(n, 2)))
            _, a1, _ = pool_forward(x, ad.constant(a_vals), block, x)
            assert np.all(a1.values >= 0.0)
            assert np.all(a1.values < 1.0)

    def test_cluster_count_mismatch_rejected(self):
        rng = np.random.default_rng(16)
        block = PoolingBlock(
            embed_net=lambda a, x: x,
            assign_net=lambda a, f: ad.constant(np.zeros((4, 5))),
            clusters_out=3,
            assign_inputs="node",
        )
        x = ad.constant(rng.normal(size=(4, 2)))
        with pytest.raises(ValueError):
            pool_forward(x, ad.constant(np.zeros((4, 4))), block, x)

    def test_masked_nodes_uniform_and_inert(self):
        rng = np.random.default_rng(17)
        n_real, n_pad, c = 3, 2, 4
        n = n_real + n_pad
        a_vals = np.zeros((n, n))
        a_vals[:n_real, :n_real] = random_graph(rng, n_real, 0.8)
        x_vals = np.zeros((n, 2))
        x_vals[:n_real] = rng.normal(size=(n_real, 2))
        logits = rng.normal(size=(n, c))
        block = PoolingBlock(
            embed_net=lambda a, x: x,
            assign_net=lambda a, f: ad.constant(logits),
            clusters_out=c,
            assign_inputs="node",
        )
        mask = np.array([1.0, 1.0, 1.0, 0.0, 0.0])
        x = ad.constant(x_vals)
        x1, a1, s = pool_forward(x, ad.constant(a_vals), block, x, node_mask=mask)
        # padded rows of S are uniform
        np.testing.assert_allclose(s.values[n_real:], 1.0 / c, atol=1e-15)
        # result equals the unpadded computation
        block_small = PoolingBlock(
            embed_net=lambda a, x: x,
            assign_net=lambda a, f: ad.constant(logits[:n_real]),
            clusters_out=c,
            assign_inputs="node",
        )
        x_small = ad.constant(x_vals[:n_real])
        x1_small, a1_small, _ = pool_forward(
            x_small, ad.constant(a_vals[:n_real, :n_real]), block_small, x_small
        )
        np.testing.assert_allclose(x1.values, x1_small.values, atol=1e-12)
        np.testing.assert_allclose(a1.values, a1_small.values, atol=1e-12)

    def test_pooling_gradients_through_eq9(self):
        rng = np.random.default_rng(18)
        n, c, d = 6, 3, 2
        a_vals = random_graph(rng, n, 0.5)
        assign = Dense(rng, d, c, "linear", "assign")
        embed = Dense(rng, d, d, "tanh", "embed")
        block = PoolingBlock(
            embed_net=lambda a, x: embed(x),
            assign_net=lambda a, f: assign(f),
            clusters_out=c,
            assign_inputs="node",
        )
        x_vals = rng.normal(size=(n, d))
        cx = rng.normal(size=(c, d))
        ca = rng.normal(size=(c, c))

        def f(_):
            x = ad.constant(x_vals)
            x1, a1, s = pool_forward(x, ad.constant(a_vals), block, x)
            return ad.add(
                ad.sum_all(ad.multiply(x1, ad.constant(cx))),
                ad.sum_all(ad.multiply(a1, ad.constant(ca))),
            )

        for name, p in {**assign.parameters(), **embed.parameters()}.items():
            err = ad.grad_check(f, p)
            assert err < 1e-4, f"{name}: {err:.2e}"


class TestLosses:
    def test_le_one_hot_is_zero(self):
        s = np.eye(4)[[0, 1, 2, 0]]
        assert loss_le(s).item() < 1e-9

    def test_le_uniform_is_log_c(self):
        for c in (2, 3, 5):
            s = np.full((6, c), 1.0 / c)
            np.testing.assert_allclose(loss_le(s).item(), np.log(c), rtol=1e-12)

    def test_le_half_half(self):
        s = np.full((3, 2), 0.5)
        np.testing.assert_allclose(loss_le(s).item(), np.log(2.0), rtol=1e-12)

    def test_lc_uniform_mass_zero(self):
        s = np.eye(4)[[0, 1, 0, 1]][:, :2]
        assert abs(loss_lc(s).item()) < 1e-12

    def test_lc_single_cluster_max(self):
        s = np.zeros((5, 3))
        s[:, 1] = 1.0
        np.testing.assert_allclose(loss_lc(s).item(), np.log(3.0), rtol=1e-12)

    def test_lc_three_one_split(self):
        s = np.zeros((4, 2))
        s[:3, 0] = 1.0
        s[3, 1] = 1.0
        expected = np.log(2.0) - (-(0.75 * np.log(0.75) + 0.25 * np.log(0.25)))
        np.testing.assert_allclose(loss_lc(s).item(), expected, rtol=1e-10)
        np.testing.assert_allclose(loss_lc(s).item(), 0.1308, atol=5e-5)

    def test_joint_minimum_at_balanced_one_hot(self):
        # all 2^4 hard assignments of 4 nodes to 2 clusters
        best = []
        for code in range(16):
            s = np.zeros((4, 2))
            for node in range(4):
                s[node, (code >> node) & 1] = 1.0
            combined = loss_le(s).item() + loss_lc(s).item()
            best.append((combined, int(np.sum(s[:, 0]))))
        values = np.array([v for v, _ in best])
        balanced = np.array([count == 2 for _, count in best])
        assert np.all(values[balanced] < values[~balanced].min() - 1e-6)

    def test_loss_gradients(self):
        rng = np.random.default_rng(19)
        logits = ad.parameter(rng.normal(size=(5, 3)))

        def f_le(t):
            return loss_le(ad.row_softmax(t))

        def f_lc(t):
            return loss_lc(ad.row_softmax(t))

        assert ad.grad_check(f_le, logits) < 1e-4
        assert ad.grad_check(f_lc, logits) < 1e-4

    def test_node_count_slicing(self):
        s = np.vstack([np.eye(2)[[0, 1]], np.full((2, 2), 0.5)])
        # full matrix has entropy from the uniform pad rows; sliced does not
        assert loss_le(s).item() > 0.1
        assert loss_le(s, node_count=2).item() < 1e-9

    def test_cross_entropy_matches_log(self):
        probs = ad.constant([[0.2, 0.5, 0.3]])
        np.testing.assert_allclose(cross_entropy(probs, 1).item(), -np.log(0.5), rtol=1e-12)


class TestMlp:
    def test_dims_validated(self):
        rng = np.random.default_rng(20)
        with pytest.raises(ValueError):
            MLP(rng, [3, 4], ["relu", "relu"], "bad")
        mlp = MLP(rng, [3, 4, 2], ["relu", "linear"], "ok")
        out = mlp(ad.constant(np.ones((5, 3))))
        assert out.shape == (5, 2)

    def test_width_mismatch_raises(self):
        rng = np.random.default_rng(21)
        layer = Dense(rng, 3, 2, "relu", "d")
        with pytest.raises(ValueError):
            layer(ad.constant(np.ones((4, 5))))
