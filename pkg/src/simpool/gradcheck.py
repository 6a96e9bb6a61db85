"""Finite-difference verification of every differentiable component.

Each check draws seeded random graphs (|V| <= 10), builds the component
with fresh random parameters, and compares analytic gradients of a scalar
projection of the output against central differences, parameter
coordinate by coordinate.

ReLU networks are piecewise linear: occasionally a pre-activation lies
within epsilon of its kink and the epsilon-wide secant spans two linear
pieces, making that single comparison meaningless. When a parameter
exceeds tolerance it is re-checked at smaller epsilon; a kink artefact
vanishes once the secant no longer crosses the kink, while a genuine
backward defect persists at every scale and still fails.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import Dense, GcnLayer, GmnEncoder, GmnPropagation, PoolingBlock, loss_lc, loss_le, pool_forward
from .model import SimPoolModel, resolve_preset
from .similarity import SimilarityConfig, index_map, similarity_dense_symmetric

__all__ = ["CheckResult", "run_suite", "SUITE_CHECKS"]


@dataclass
class CheckResult:
    name: str
    graphs: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _random_graph(rng, n: int) -> np.ndarray:
    a = (rng.random((n, n)) < 0.5).astype(np.float64)
    a = np.triu(a, 1)
    return a + a.T


def _project(rng, out: ad.Tensor) -> ad.Tensor:
    c = ad.constant(rng.normal(size=out.shape))
    return ad.sum_all(ad.multiply(out, c))


REFINEMENT_EPSILONS = (1e-6, 1e-7)
TOLERANCE = 1e-4


def _graded_check(f, x: ad.Tensor, epsilon: float) -> float:
    err = ad.grad_check(f, x, epsilon=epsilon)
    for finer in REFINEMENT_EPSILONS:
        if err < TOLERANCE or finer >= epsilon:
            break
        err = ad.grad_check(f, x, epsilon=finer)
    return err


def _check_params(forward, params: dict[str, ad.Tensor], epsilon: float) -> float:
    worst = 0.0
    for p in params.values():
        worst = max(worst, _graded_check(lambda _: forward(), p, epsilon))
    return worst


def _check_gmn_encoder(rng, n, epsilon):
    enc = GmnEncoder(rng, 3, 5, "relu", "enc")
    x = ad.constant(rng.uniform(-2, 2, size=(n, 3)))
    proj = rng.normal(size=(n, 5))
    forward = lambda: ad.sum_all(ad.multiply(enc(x), ad.constant(proj)))
    return _check_params(forward, enc.parameters(), epsilon)


def _check_gmn_propagation(rng, n, epsilon):
    p1 = GmnPropagation(rng, 3, 4, 4, "relu", "p1")
    p2 = GmnPropagation(rng, 4, 4, 3, "linear", "p2")
    a = ad.constant(_random_graph(rng, n))
    x = ad.constant(rng.uniform(-2, 2, size=(n, 3)))
    proj = rng.normal(size=(n, 3))
    forward = lambda: ad.sum_all(ad.multiply(p2(p1(x, a), a), ad.constant(proj)))
    return _check_params(forward, {**p1.parameters(), **p2.parameters()}, epsilon)


def _check_gcn(rng, n, epsilon):
    gcn = GcnLayer(rng, 3, 4, "relu", "gcn")
    a = ad.constant(_random_graph(rng, n))
    x = ad.constant(rng.uniform(-2, 2, size=(n, 3)))
    proj = rng.normal(size=(n, 4))
    forward = lambda: ad.sum_all(ad.multiply(gcn(x, a), ad.constant(proj)))
    return _check_params(forward, gcn.parameters(), epsilon)


def _check_pooling(rng, n, epsilon):
    clusters = 3
    embed = Dense(rng, 3, 4, "tanh", "embed")
    assign = Dense(rng, 3, clusters, "linear", "assign")
    block = PoolingBlock(
        embed_net=lambda a, x: embed(x),
        assign_net=lambda a, f: assign(f),
        clusters_out=clusters,
        assign_inputs="node",
    )
    a_vals = _random_graph(rng, n)
    x = ad.constant(rng.uniform(-2, 2, size=(n, 3)))
    proj_x = rng.normal(size=(clusters, 4))
    proj_a = rng.normal(size=(clusters, clusters))

    def forward():
        x1, a1, s = pool_forward(x, ad.constant(a_vals), block, x)
        term = ad.add(
            ad.sum_all(ad.multiply(x1, ad.constant(proj_x))),
            ad.sum_all(ad.multiply(a1, ad.constant(proj_a))),
        )
        return ad.add(term, ad.add(loss_le(s), loss_lc(s)))

    return _check_params(forward, {**embed.parameters(), **assign.parameters()}, epsilon)


def _check_loss_le(rng, n, epsilon):
    logits = ad.parameter(rng.uniform(-2, 2, size=(n, 4)))
    return _graded_check(lambda t: loss_le(ad.row_softmax(t)), logits, epsilon)


def _check_loss_lc(rng, n, epsilon):
    logits = ad.parameter(rng.uniform(-2, 2, size=(n, 4)))
    return _graded_check(lambda t: loss_lc(ad.row_softmax(t)), logits, epsilon)


def _check_full_model(rng, n, epsilon):
    preset = resolve_preset("enzymes", scale=1 / 32)  # width-16 variant
    model = SimPoolModel(
        preset,
        feature_dim=3,
        num_classes=6,
        assign_inputs="structural",
        seed=int(rng.integers(0, 2**31)),
    )
    a = _random_graph(rng, n)
    x = rng.uniform(-1, 1, size=(n, 3))
    mapped = index_map(
        similarity_dense_symmetric(a, model.sim), model.sim
    ).mapped
    label = int(rng.integers(0, 6))

    def forward():
        out = model.forward_graph(a, x, mapped=mapped, label=label)
        loss = ad.add(out.ce, ad.add(out.le[0], out.le[1]))
        return ad.add(loss, ad.add(out.lc[0], out.lc[1]))

    return _check_params(forward, model.parameters(), epsilon)


SUITE_CHECKS = {
    "gmn_encoder": _check_gmn_encoder,
    "gmn_propagation": _check_gmn_propagation,
    "gcn": _check_gcn,
    "pooling_eq9": _check_pooling,
    "loss_le": _check_loss_le,
    "loss_lc": _check_loss_lc,
    "full_model_width16": _check_full_model,
}


def run_suite(
    seed: int = 7,
    graphs_per_check: int = 20,
    tolerance: float = 1e-4,
    epsilon: float = 1e-5,
    checks: list[str] | None = None,
    progress=None,
) -> list[CheckResult]:
    """Run the finite-difference suite; one result per component."""
    results = []
    for name, check in SUITE_CHECKS.items():
        if checks is not None and name not in checks:
            continue
        start = time.perf_counter()
        worst = 0.0
        for g in range(graphs_per_check):
            rng = np.random.default_rng(seed * 100_003 + g)
            n = int(rng.integers(3, 11))
            worst = max(worst, check(rng, n, epsilon))
        results.append(
            CheckResult(
                name=name,
                graphs=graphs_per_check,
                max_error=worst,
                tolerance=tolerance,
                seconds=time.perf_counter() - start,
            )
        )
        if progress is not None:
            progress(results[-1])
    return results
