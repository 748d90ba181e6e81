"""Finite-difference verification of every differentiable op and loss.

Each check draws ``instances`` random problems from a seeded generator and
records the worst relative error |analytic - numeric| / max(1, |analytic|)
over all of them. Inputs to piecewise ops are kept away from their kinks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import numerics as nx
from ..losses import (BatchFeatures, LossHeads, LossSettings, LossWeights, PhiMapping, center_loss, hc_loss,
                      id_loss, mac_loss, maid_loss, mae_loss, overall_loss, wrt_loss)
from ..model import CrossModalityTransformer, EmbeddingTables, ModelConfig
from ..numerics import Tensor

TOLERANCE = 1e-4
EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    worst: float
    instances: int

    @property
    def passed(self) -> bool:
        return bool(self.worst < TOLERANCE)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} worst={self.worst:.2e} n={self.instances}"


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _leaves(*arrays):
    return [Tensor(a, requires_grad=True) for a in arrays]


# (name, builder) where builder(rng) -> (closure, leaves)
def _op_cases() -> list:
    def unary(fn, sampler=None):
        def build(rng):
            (x,) = _leaves(sampler(rng) if sampler else rng.standard_normal((3, 4)))
            w = Tensor(rng.standard_normal((3, 4)))
            return (lambda: nx.sum(nx.mul(fn(x), w))), [x]

        return build

    def binary(fn, shape_b=(3, 4), positive_b=False):
        def build(rng):
            a, b = _leaves(rng.standard_normal((3, 4)),
                           rng.uniform(0.5, 2.0, shape_b) if positive_b else rng.standard_normal(shape_b))
            w = Tensor(rng.standard_normal(np.broadcast_shapes((3, 4), shape_b)))
            return (lambda: nx.sum(nx.mul(fn(a, b), w))), [a, b]

        return build

    def weighted(fn, shape, sampler=None):
        def build(rng):
            (x,) = _leaves(sampler(rng, shape) if sampler else rng.standard_normal(shape))
            probe = fn(x)
            w = Tensor(rng.standard_normal(probe.shape))
            return (lambda: nx.sum(nx.mul(fn(x), w))), [x]

        return build

    def matmul_case(rng):
        a, b = _leaves(rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)))
        w = Tensor(rng.standard_normal((2, 3, 5)))
        return (lambda: nx.sum(nx.mul(nx.matmul(a, b), w))), [a, b]

    def bmm_case(rng):
        a, b = _leaves(rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2)))
        w = Tensor(rng.standard_normal((2, 3, 2)))
        return (lambda: nx.sum(nx.mul(nx.matmul(a, b), w))), [a, b]

    def concat_case(rng):
        a, b = _leaves(rng.standard_normal((2, 3)), rng.standard_normal((4, 3)))
        w = Tensor(rng.standard_normal((6, 3)))
        return (lambda: nx.sum(nx.mul(nx.concat([a, b], axis=0), w))), [a, b]

    def layer_norm_case(rng):
        x, g, b = _leaves(rng.standard_normal((2, 3, 5)), rng.standard_normal(5), rng.standard_normal(5))
        w = Tensor(rng.standard_normal((2, 3, 5)))
        return (lambda: nx.sum(nx.mul(nx.layer_norm(x, g, b, 1e-6), w))), [x, g, b]

    def masked_softmax_case(rng):
        (x,) = _leaves(rng.standard_normal((4, 5)))
        mask = rng.random((4, 5)) < 0.6
        mask[:, 0] = True
        w = Tensor(rng.standard_normal((4, 5)))
        return (lambda: nx.sum(nx.mul(nx.masked_softmax(x, mask, axis=1), w))), [x]

    def cosine_case(rng):
        a, b = _leaves(rng.standard_normal((4, 6)), rng.standard_normal((4, 6)))
        w = Tensor(rng.standard_normal(4))
        return (lambda: nx.sum(nx.mul(nx.cosine_similarity(a, b), w))), [a, b]

    def linear_case(rng):
        x, wt, b = _leaves(rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3))
        w = Tensor(rng.standard_normal((5, 3)))
        return (lambda: nx.sum(nx.mul(nx.linear(x, wt, b), w))), [x, wt, b]

    def ce_case(rng):
        (x,) = _leaves(rng.standard_normal((6, 4)))
        labels = rng.integers(0, 4, 6)
        return (lambda: nx.cross_entropy(x, labels)), [x]

    def getitem_case(rng):
        (x,) = _leaves(rng.standard_normal((5, 4)))
        idx = rng.integers(0, 5, 7)
        w = Tensor(rng.standard_normal((7, 4)))
        return (lambda: nx.sum(nx.mul(x[idx], w))), [x]

    def norm_case(rng):
        (x,) = _leaves(rng.standard_normal((4, 5)) + 0.5)
        w = Tensor(rng.standard_normal(4))
        return (lambda: nx.sum(nx.mul(nx.norm(x, axis=1), w))), [x]

    pos = lambda rng: rng.uniform(0.2, 3.0, size=(3, 4))  # noqa: E731
    kinked = lambda rng: _away_from_zero(rng, (3, 4))  # noqa: E731
    smooth = lambda rng: _away_from_zero(rng, (3, 4)) * np.where(rng.random((3, 4)) < 0.5, 0.4, 1.5)  # noqa: E731
    return [
        ("add", binary(nx.add, (4,))),
        ("sub", binary(nx.sub, (3, 1))),
        ("mul", binary(nx.mul)),
        ("div", binary(nx.div, positive_b=True)),
        ("neg", unary(nx.neg)),
        ("power", unary(lambda x: nx.ops.power(x, 3.0))),
        ("matmul", matmul_case),
        ("matmul_batched", bmm_case),
        ("transpose", weighted(lambda x: nx.transpose(x, (2, 0, 1)), (2, 3, 4))),
        ("swapaxes", weighted(lambda x: nx.swapaxes(x, 0, 2), (2, 3, 4))),
        ("reshape", weighted(lambda x: nx.reshape(x, (4, 6)), (2, 3, 4))),
        ("broadcast_to", weighted(lambda x: nx.broadcast_to(x, (2, 3, 4)), (1, 4))),
        ("concat", concat_case),
        ("getitem", getitem_case),
        ("sum", weighted(lambda x: nx.sum(x, axis=1), (3, 4))),
        ("mean", weighted(lambda x: nx.mean(x, axis=0, keepdims=True), (3, 4))),
        ("exp", unary(nx.exp)),
        ("log", unary(nx.log, pos)),
        ("sqrt", unary(nx.sqrt, pos)),
        ("abs", unary(nx.abs, kinked)),
        ("relu", unary(nx.relu, kinked)),
        ("clamp_min", unary(lambda x: nx.clamp_min(x, 0.05), kinked)),
        ("gelu", unary(nx.gelu)),
        ("softplus", unary(nx.softplus)),
        ("softmax", weighted(lambda x: nx.softmax(x, axis=1), (3, 4))),
        ("log_softmax", weighted(lambda x: nx.log_softmax(x, axis=0), (3, 4))),
        ("masked_softmax", masked_softmax_case),
        ("layer_norm", layer_norm_case),
        ("norm", norm_case),
        ("smooth_l1", unary(nx.smooth_l1, smooth)),
        ("cosine_similarity", cosine_case),
        ("linear", linear_case),
        ("cross_entropy", ce_case),
    ]


def _qk_batch(rng, q=3, k=4, d=16):
    labels = np.repeat(np.arange(q), k)
    mods = np.tile(np.repeat([0, 1], k // 2), q)
    v, f = _leaves(rng.standard_normal((q * k, d)), rng.standard_normal((q * k, d)))
    return BatchFeatures(v, f, labels, mods)


def _tables(rng, d=16):
    pos, me_vis, me_ir, cls = _leaves(rng.standard_normal((2, d)), rng.standard_normal(d) * 0.5,
                                      rng.standard_normal(d) * 0.5, rng.standard_normal(d))
    return EmbeddingTables(pos, me_vis, me_ir, cls)


def _phi(rng, mode, d=16):
    phi = PhiMapping(mode, d, rng=rng, init_std=0.3)
    for _, b in phi.weights.values():
        b.data[:] = rng.standard_normal(d) * 0.1
    return phi


def _loss_cases() -> list:
    cases = []

    def id_case(rng):
        (logits,) = _leaves(rng.standard_normal((8, 5)))
        labels = rng.integers(0, 5, 8)
        return (lambda: id_loss(logits, labels)), [logits]

    def wrt_case(rng):
        batch = _qk_batch(rng)
        return (lambda: wrt_loss(batch.v, batch.labels)), [batch.v]

    def mac_case(metric, shared, phi_mode):
        def build(rng):
            batch, tables, phi = _qk_batch(rng), _tables(rng), _phi(rng, phi_mode)
            leaves = [batch.f, tables.me_vis, tables.me_ir] + list(phi.parameters().values())
            return (lambda: mac_loss(batch, tables, phi, metric, shared)), leaves

        return build

    def maid_case(rng):
        batch, tables, phi = _qk_batch(rng), _tables(rng), _phi(rng, "fully_connected")
        w, b = _leaves(rng.standard_normal((16, 3)), rng.standard_normal(3))
        leaves = [batch.f, tables.me_vis, tables.me_ir, w, b] + list(phi.parameters().values())
        return (lambda: maid_loss(batch, tables, phi, w, b)), leaves

    def mae_case(rng):
        batch, tables, phi = _qk_batch(rng), _tables(rng), _phi(rng, "fully_connected")
        w, b = _leaves(rng.standard_normal((16, 3)), rng.standard_normal(3))
        leaves = [batch.f, tables.me_vis, tables.me_ir, w, b] + list(phi.parameters().values())
        return (lambda: mae_loss(batch, tables, phi, w, b, "cosine")[0]), leaves

    def center_case(rng):
        batch = _qk_batch(rng)
        (c,) = _leaves(rng.standard_normal((3, 16)))
        return (lambda: center_loss(batch.f, batch.labels, c)), [batch.f, c]

    def hc_case(rng):
        batch = _qk_batch(rng)
        return (lambda: hc_loss(batch.f, batch.labels, batch.modalities)), [batch.f]

    cases.append(("loss:id", id_case))
    cases.append(("loss:wrt", wrt_case))
    for metric in ("cosine", "l1", "l2", "smooth_l1"):
        cases.append((f"loss:mac[{metric}]", mac_case(metric, False, "identity")))
    cases.append(("loss:mac[shared_center]", mac_case("cosine", True, "identity")))
    cases.append(("loss:mac[fc_phi]", mac_case("cosine", False, "fully_connected")))
    cases.append(("loss:maid", maid_case))
    cases.append(("loss:mae", mae_case))
    cases.append(("loss:center", center_case))
    cases.append(("loss:hc", hc_case))
    return cases


def _model_case(rng):
    """Overall objective of a tiny network against a probe of every parameter."""
    cfg = ModelConfig(num_ids=3, img_h=12, img_w=8, patch=4, stride=2, dim=16, depth=2, heads=2)
    model = CrossModalityTransformer(cfg, seed=int(rng.integers(1 << 31)))
    for p in model.named_parameters().values():
        p.data = p.data + rng.standard_normal(p.shape) * 0.05
    heads = LossHeads(16, 3, "fully_connected", seed=int(rng.integers(1 << 31)), init_std=0.2)
    images = rng.random((6, 3, 12, 8))
    labels = np.repeat(np.arange(3), 2)
    mods = np.tile([0, 1], 3)
    settings = LossSettings(metric="cosine")
    leaves = list(model.named_parameters().values()) + list(heads.named_parameters().values())

    def f():
        v, feat, logits = model.forward(images, mods, training=True)
        return overall_loss(BatchFeatures(v, feat, labels, mods), logits, model.tables, heads,
                            LossWeights(4.0), settings).total

    return f, leaves


def run_case(name: str, builder: Callable, instances: int, seed: int, max_coords=None) -> CheckResult:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        f, leaves = builder(rng)
        worst = max(worst, nx.grad_check_tensors(f, leaves, EPS, max_coords=max_coords, rng=rng))
    return CheckResult(name, worst, instances)


def op_cases() -> list:
    return _op_cases()


def loss_cases() -> list:
    return _loss_cases()


def run_suite(instances: int = 20, seed: int = 0, include_model: bool = True, model_instances: int = 20) -> list:
    """All checks; returns a list of :class:`CheckResult`."""
    results = [run_case(f"op:{n}", b, instances, seed) for n, b in _op_cases()]
    results += [run_case(n, b, instances, seed) for n, b in _loss_cases()]
    if include_model:
        results.append(run_case("model:overall_loss", _model_case, model_instances, seed, max_coords=2))
    return results
