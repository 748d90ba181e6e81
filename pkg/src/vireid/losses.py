"""Training objectives.

Placement follows the network: the weighted triplet loss acts on pre-neck
vectors ``v``; the ID loss on classifier logits of the neck features ``f``;
the modality-aware losses and the center / hetero-center baselines on ``f``.

Reductions: ``id_loss`` and ``wrt_loss`` are means over the batch;
``mac_loss``, ``maid_loss``, ``center_loss`` and ``hc_loss`` are sums.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError
from .model import Modality, modality_array
from .numerics import Tensor

WRT_ON = "v"
ID_ON = "f"
MAE_ON = "f"
DIST_FLOOR = 1e-12


class DistanceMetric(str, enum.Enum):
    COSINE = "cosine"
    L1 = "l1"
    L2 = "l2"
    SMOOTH_L1 = "smooth_l1"


class PhiMode(str, enum.Enum):
    IDENTITY = "identity"
    FULLY_CONNECTED = "fully_connected"


def distance(a, b, metric="cosine", beta: float = 1.0) -> Tensor:
    """Row-wise distance between ``a`` and ``b`` (last axis)."""
    metric = DistanceMetric(metric)
    if metric is DistanceMetric.COSINE:
        return nx.cosine_distance(a, b)
    diff = nx.sub(a, b)
    if metric is DistanceMetric.L1:
        return nx.sum(nx.abs(diff), axis=-1)
    if metric is DistanceMetric.L2:
        return nx.norm(diff, axis=-1)
    return nx.sum(nx.smooth_l1(diff, beta), axis=-1)


@dataclass
class BatchFeatures:
    v: Tensor
    f: Tensor
    labels: np.ndarray
    modalities: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.modalities = modality_array(self.modalities)
        b = self.labels.shape[0]
        if self.modalities.shape[0] != b or self.f.shape[0] != b or self.v.shape[0] != b:
            raise ShapeError("features, labels and modality tags disagree on batch size")


class PhiMapping:
    """Maps a modality embedding into feature space before it is removed.

    ``identity`` has no parameters. ``fully_connected`` holds one affine map
    per modality, or a single shared one with ``shared=True``.
    """

    def __init__(self, mode="identity", dim: Optional[int] = None, shared: bool = False,
                 rng: Optional[np.random.Generator] = None, init_std: float = 0.02):
        self.mode = PhiMode(mode)
        self.shared = shared
        self.weights: dict = {}
        if self.mode is PhiMode.FULLY_CONNECTED:
            if dim is None:
                raise ContractError("fully_connected phi needs dim")
            rng = rng if rng is not None else np.random.default_rng(0)
            keys = ("shared",) if shared else ("vis", "ir")
            for key in keys:
                w = rng.standard_normal((dim, dim)) * init_std
                self.weights[key] = (
                    Tensor(w, requires_grad=True, name=f"phi.{key}.weight"),
                    Tensor(np.zeros(dim), requires_grad=True, name=f"phi.{key}.bias"),
                )

    def parameters(self) -> dict:
        return {t.name: t for pair in self.weights.values() for t in pair}

    def __call__(self, e, m) -> Tensor:
        if self.mode is PhiMode.IDENTITY:
            return nx.as_tensor(e)
        key = "shared" if self.shared else Modality.parse(m).short
        w, b = self.weights[key]
        return nx.add(nx.matmul(nx.reshape(e, (1, -1)), w), nx.reshape(b, (1, -1)))[0]


def modality_removal(f, m, tables, phi: PhiMapping) -> Tensor:
    """f - phi_m(e^m) for a single modality tag ``m``."""
    return nx.sub(f, phi(tables.modality(m), m))


def _remove_batch(f: Tensor, modalities: np.ndarray, tables, phi: PhiMapping) -> Tensor:
    # per-sample subtraction of the mapped embedding of its own modality
    vis = (modalities == Modality.VISIBLE).astype(np.float64)[:, None]
    shift = nx.add(nx.mul(vis, phi(tables.me_vis, Modality.VISIBLE)),
                   nx.mul(1.0 - vis, phi(tables.me_ir, Modality.INFRARED)))
    return nx.sub(f, shift)


def _group_mean_matrix(groups: np.ndarray) -> np.ndarray:
    same = groups[:, None] == groups[None, :]
    return same / same.sum(axis=1, keepdims=True)


def _check_qk(labels, modalities, need_both=True):
    for q in np.unique(labels):
        mods = modalities[labels == q]
        if need_both and (not (mods == Modality.VISIBLE).any() or not (mods == Modality.INFRARED).any()):
            raise ContractError(f"identity {q} lacks images in one modality")


def id_loss(logits, labels) -> Tensor:
    """Mean cross-entropy over the batch."""
    return nx.cross_entropy(logits, labels, reduction="mean")


def pairwise_euclidean(x) -> Tensor:
    x = nx.as_tensor(x)
    sq = nx.sum(nx.mul(x, x), axis=1, keepdims=True)
    d2 = nx.sub(nx.add(sq, nx.transpose(sq)), nx.mul(2.0, nx.matmul(x, nx.transpose(x))))
    return nx.sqrt(nx.clamp_min(d2, DIST_FLOOR))


def wrt_from_distances(dist, labels) -> Tensor:
    """Weighted regularization triplet from a (B, B) distance matrix.

    Per anchor, positives are weighted by a softmax over their distances and
    negatives by a softmax over their negated distances; the loss is
    softplus(weighted positive distance - weighted negative distance),
    averaged over anchors. The anchor itself is not its own positive.
    """
    labels = np.asarray(labels)
    b = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    neg = ~same
    if not pos.any(axis=1).all() or not neg.any(axis=1).all():
        raise ContractError("every anchor needs at least one positive and one negative")
    dist = nx.as_tensor(dist)
    w_p = nx.masked_softmax(dist, pos, axis=1)
    w_n = nx.masked_softmax(nx.neg(dist), neg, axis=1)
    far_pos = nx.sum(nx.mul(dist, w_p), axis=1)
    close_neg = nx.sum(nx.mul(dist, w_n), axis=1)
    return nx.mean(nx.softplus(nx.sub(far_pos, close_neg)))


def wrt_loss(v, labels) -> Tensor:
    return wrt_from_distances(pairwise_euclidean(v), labels)


def mac_loss(batch: BatchFeatures, tables, phi: PhiMapping, metric="cosine",
             shared_center: bool = False) -> Tensor:
    """Soft-margin pull of modality-removed features toward their centers.

    Each sample's center is the mean of the modality-removed features of its
    identity within its own modality (or across both modalities with
    ``shared_center``). Gradients flow through the centers.
    """
    _check_qk(batch.labels, batch.modalities)
    removed = _remove_batch(nx.as_tensor(batch.f), batch.modalities, tables, phi)
    groups = batch.labels * 2 + (0 if shared_center else batch.modalities)
    centers = nx.matmul(_group_mean_matrix(groups), removed)
    return nx.sum(nx.softplus(distance(removed, centers, metric)))


def maid_loss(batch: BatchFeatures, tables, phi: PhiMapping, aux_w, aux_b=None) -> Tensor:
    """Summed cross-entropy of the auxiliary classifier on modality-removed features."""
    removed = _remove_batch(nx.as_tensor(batch.f), batch.modalities, tables, phi)
    logits = nx.linear(removed, aux_w, aux_b)
    return nx.cross_entropy(logits, batch.labels, reduction="sum")


def mae_loss(batch: BatchFeatures, tables, phi: PhiMapping, aux_w, aux_b=None, metric="cosine",
             shared_center: bool = False, use_mac: bool = True, use_maid: bool = True):
    """MAC + MAID on one tape. Returns (total, mac, maid); disabled parts are None."""
    parts = []
    mac = maid = None
    if use_mac:
        mac = mac_loss(batch, tables, phi, metric, shared_center)
        parts.append(mac)
    if use_maid:
        maid = maid_loss(batch, tables, phi, aux_w, aux_b)
        parts.append(maid)
    if not parts:
        raise ContractError("mae_loss with both components disabled")
    total = parts[0] if len(parts) == 1 else nx.add(parts[0], parts[1])
    return total, mac, maid


def center_loss(f, labels, centers) -> Tensor:
    """sum_i ||f_i - c_{y_i}||^2 / 2 with a learnable (num_ids, D) center table."""
    labels = np.asarray(labels, dtype=np.int64)
    centers = nx.as_tensor(centers)
    if labels.size and (labels.min() < 0 or labels.max() >= centers.shape[0]):
        raise ContractError("label without a center")
    diff = nx.sub(f, centers[labels])
    return nx.mul(0.5, nx.sum(nx.mul(diff, diff)))


def hc_loss(f, labels, modalities) -> Tensor:
    """sum_q ||c_q^vis - c_q^ir||^2 with per-identity, per-modality batch centers."""
    labels = np.asarray(labels, dtype=np.int64)
    mods = modality_array(modalities)
    _check_qk(labels, mods)
    ids = np.unique(labels)
    vis = np.zeros((ids.size, labels.size))
    ir = np.zeros((ids.size, labels.size))
    for row, q in enumerate(ids):
        vm = (labels == q) & (mods == Modality.VISIBLE)
        im = (labels == q) & (mods == Modality.INFRARED)
        vis[row, vm] = 1.0 / vm.sum()
        ir[row, im] = 1.0 / im.sum()
    gap = nx.matmul(vis - ir, nx.as_tensor(f))
    return nx.sum(nx.mul(gap, gap))


class LossHeads:
    """Trainable parameters owned by the loss stack.

    The auxiliary classifier used by the modality-aware ID loss is separate
    from the network's main classifier.
    """

    def __init__(self, dim: int, num_ids: int, phi_mode="identity", shared_phi: bool = False,
                 with_centers: bool = False, seed: int = 0, init_std: float = 0.02):
        rng = np.random.default_rng(seed)
        self.aux_w = Tensor(rng.standard_normal((dim, num_ids)) * init_std, requires_grad=True,
                            name="aux_classifier.weight")
        self.aux_b = Tensor(np.zeros(num_ids), requires_grad=True, name="aux_classifier.bias")
        self.phi = PhiMapping(phi_mode, dim, shared_phi, rng, init_std)
        self.centers = None
        if with_centers:
            self.centers = Tensor(rng.standard_normal((num_ids, dim)) * init_std, requires_grad=True,
                                  name="centers")

    def named_parameters(self) -> dict:
        out = {self.aux_w.name: self.aux_w, self.aux_b.name: self.aux_b}
        out.update(self.phi.parameters())
        if self.centers is not None:
            out[self.centers.name] = self.centers
        return out


@dataclass
class LossWeights:
    lam: float = 4.0
    constraint_weight: float = 0.1

    def __post_init__(self):
        if self.lam < 0 or self.constraint_weight < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class LossSettings:
    """Which terms enter the objective and how they are configured."""

    use_mac: bool = True
    use_maid: bool = True
    metric: str = "cosine"
    shared_center: bool = False
    extra: str = "mae"  # one of none, center, hc, mae

    def __post_init__(self):
        DistanceMetric(self.metric)
        if self.extra not in ("none", "center", "hc", "mae"):
            raise ContractError(f"unknown extra constraint {self.extra!r}")


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict = field(default_factory=dict)


def overall_loss(batch: BatchFeatures, logits, tables, heads: LossHeads,
                 weights: LossWeights = None, settings: LossSettings = None) -> LossBreakdown:
    """L_ID + L_WRT + lambda * L_MAE (or a baseline constraint in its place).

    Components are reported as floats; absent terms are reported as 0.
    """
    weights = weights or LossWeights()
    settings = settings or LossSettings()
    l_id = id_loss(logits, batch.labels)
    l_wrt = wrt_loss(batch.v, batch.labels)
    total = nx.add(l_id, l_wrt)
    comps = {"L_ID": l_id.item(), "L_WRT": l_wrt.item(), "L_MAC": 0.0, "L_MAID": 0.0,
             "L_CENTER": 0.0, "L_HC": 0.0, "lambda": float(weights.lam)}
    if settings.extra == "mae" and weights.lam > 0 and (settings.use_mac or settings.use_maid):
        mae, mac, maid = mae_loss(batch, tables, heads.phi, heads.aux_w, heads.aux_b, settings.metric,
                                  settings.shared_center, settings.use_mac, settings.use_maid)
        comps["L_MAC"] = mac.item() if mac is not None else 0.0
        comps["L_MAID"] = maid.item() if maid is not None else 0.0
        total = nx.add(total, nx.mul(weights.lam, mae))
    elif settings.extra == "center":
        if heads.centers is None:
            raise ContractError("center constraint needs LossHeads(with_centers=True)")
        c = center_loss(batch.f, batch.labels, heads.centers)
        comps["L_CENTER"] = c.item()
        total = nx.add(total, nx.mul(weights.constraint_weight, c))
    elif settings.extra == "hc":
        c = hc_loss(batch.f, batch.labels, batch.modalities)
        comps["L_HC"] = c.item()
        total = nx.add(total, nx.mul(weights.constraint_weight, c))
    comps["total"] = total.item()
    return LossBreakdown(total, comps)

