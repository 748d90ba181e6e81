"""Cross-modality retrieval evaluation.

Queries are ranked against a gallery of the opposite modality by cosine
distance, ties broken by gallery index. Metrics:

* Rank-k: fraction of queries whose first correct match is within the top k.
* AP: mean over the relevant positions r of (relevant items in top r) / r.
* INP: number of relevant items / rank of the last relevant item, i.e. the
  precision at the point where the hardest match is retrieved. mAP and mINP
  average these over queries.

Per-query AP and INP are correctly rounded values of the exact rationals,
and every mean (over queries, over trials) is the correctly rounded exact
mean, so results do not depend on summation order.

Queries with no relevant gallery item are skipped with a warning and do not
count in any denominator.
"""
from __future__ import annotations

import csv
import io
import warnings
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError
from .model import Modality

DEFAULT_KS = (1, 10, 20)
METRIC_COLUMNS = ("R1", "R10", "R20", "mAP", "mINP")


@dataclass
class RankingList:
    order: np.ndarray  # gallery positions sorted by ascending distance
    relevant: np.ndarray  # bool, aligned with order
    distances: np.ndarray  # sorted distances
    query_id: int = -1

    @property
    def has_match(self) -> bool:
        return bool(self.relevant.any())


def cosine_distance_matrix(query, gallery) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    return 1.0 - qn @ gn.T


def _rank_rows(dist: np.ndarray, query_ids, gallery_ids) -> list:
    gallery_ids = np.asarray(gallery_ids)
    order = np.argsort(dist, axis=1, kind="stable")
    out = []
    for i, qid in enumerate(np.asarray(query_ids)):
        o = order[i]
        out.append(RankingList(o, gallery_ids[o] == qid, dist[i, o], int(qid)))
    return out


def rank_gallery(query_f, gallery_fs, query_id, gallery_ids) -> RankingList:
    """Rank one query against the gallery."""
    dist = cosine_distance_matrix(np.reshape(query_f, (1, -1)), gallery_fs)
    ranking = _rank_rows(dist, [query_id], gallery_ids)[0]
    if not ranking.has_match:
        warnings.warn(f"query identity {query_id} has no match in the gallery; it will be skipped")
    return ranking


def _stats(rankings: Sequence[RankingList]):
    if not rankings:
        raise ContractError("no rankings to score")
    width = max(len(r.relevant) for r in rankings)
    rel = np.zeros((len(rankings), width), dtype=np.uint8)
    for i, r in enumerate(rankings):
        rel[i, : len(r.relevant)] = r.relevant
    first, num_rel, ap, inp = _kernels.ranking_stats(rel)
    valid = num_rel > 0
    if not valid.any():
        raise ContractError("no query has a relevant gallery item")
    return first[valid], ap[valid], inp[valid]


def exact_mean(values) -> float:
    """Correctly rounded arithmetic mean (exact rational sum, one rounding)."""
    values = [float(v) for v in np.ravel(values)]
    return float(sum(map(Fraction, values), Fraction(0)) / len(values))


def cmc(rankings: Sequence[RankingList], ks=DEFAULT_KS) -> dict:
    first, _, _ = _stats(rankings)
    return {int(k): int((first <= k).sum()) / first.size for k in ks}


def mean_ap(rankings: Sequence[RankingList]) -> float:
    _, ap, _ = _stats(rankings)
    return exact_mean(ap)


def mean_inp(rankings: Sequence[RankingList]) -> float:
    _, _, inp = _stats(rankings)
    return exact_mean(inp)


def score(rankings: Sequence[RankingList], ks=DEFAULT_KS) -> dict:
    """All metrics at once: {"R1", "R10", "R20", "mAP", "mINP", "num_queries", "num_skipped"}."""
    first, ap, inp = _stats(rankings)
    out = {f"R{k}": int((first <= k).sum()) / first.size for k in ks}
    out["mAP"] = exact_mean(ap)
    out["mINP"] = exact_mean(inp)
    out["num_queries"] = int(first.size)
    out["num_skipped"] = len(rankings) - int(first.size)
    return out


@dataclass
class EvalProtocol:
    """Gallery protocol.

    Each identity's gallery-modality images are split once into ``groups``
    disjoint pseudo-camera groups. Every trial draws ``shots`` images per
    identity per group (default 1 for single-shot, 10 for multi-shot; groups
    smaller than that are kept whole).
    """

    mode: str = "single_shot"
    shots: Optional[int] = None
    groups: int = 2
    trials: int = 10
    seed: int = 0
    direction: str = "ir_to_vis"

    def __post_init__(self):
        if self.mode not in ("single_shot", "multi_shot"):
            raise ContractError(f"unknown protocol mode {self.mode!r}")
        if self.trials < 1:
            raise ContractError("trials must be >= 1")
        if self.groups < 1:
            raise ContractError("groups must be >= 1")
        if self.direction not in ("ir_to_vis", "vis_to_ir"):
            raise ContractError(f"unknown direction {self.direction!r}")
        if self.shots is not None and self.shots < 1:
            raise ContractError("shots must be >= 1")

    @property
    def shots_per_group(self) -> Optional[int]:
        if self.shots is not None:
            return self.shots
        return 1 if self.mode == "single_shot" else 10

    @property
    def query_modality(self) -> Modality:
        return Modality.INFRARED if self.direction == "ir_to_vis" else Modality.VISIBLE

    def describe(self) -> str:
        shots = self.shots_per_group
        return (f"{self.mode} shots={'all' if shots is None else shots} groups={self.groups} "
                f"trials={self.trials} seed={self.seed} direction={self.direction}")


@dataclass
class EvalReport:
    trials: list
    protocol: str
    checkpoint: str = ""
    mean: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.mean:
            self.mean = {c: exact_mean(np.array([t[c] for t in self.trials])) for c in METRIC_COLUMNS}

    def rows(self) -> list:
        out = [dict(trial=str(t["trial"]), **{c: t[c] for c in METRIC_COLUMNS}) for t in self.trials]
        out.append(dict(trial="MEAN", **self.mean))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("trial",) + METRIC_COLUMNS)
        for row in self.rows():
            writer.writerow([row["trial"]] + [repr(float(row[c])) for c in METRIC_COLUMNS])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"checkpoint: {self.checkpoint or '-'}", f"protocol: {self.protocol}",
                 f"trials: {len(self.trials)}"]
        for c in METRIC_COLUMNS:
            vals = np.array([t[c] for t in self.trials])
            lines.append(f"{c:>5}: {100 * self.mean[c]:6.2f}  (min {100 * vals.min():.2f}, max {100 * vals.max():.2f})")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "eval") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.csv").write_text(self.to_csv())
        (out_dir / "report.txt").write_text(self.summary())


def _camera_groups(gallery_labels: np.ndarray, groups: int, rng) -> list:
    """[(identity, [indices of group 0], [group 1], ...)] with a fixed random split."""
    out = []
    for q in np.unique(gallery_labels):
        idx = np.flatnonzero(gallery_labels == q)
        if idx.size == 0:
            raise ContractError(f"identity {q} has no gallery images")
        perm = rng.permutation(idx)
        out.append((int(q), [g for g in np.array_split(perm, min(groups, idx.size)) if g.size]))
    return out


def evaluate_features(features, labels, modalities, protocol: EvalProtocol, checkpoint: str = "",
                      dump_rankings: Optional[list] = None) -> EvalReport:
    """Run ``protocol`` on precomputed matching features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    modalities = np.asarray(modalities)
    qm = int(protocol.query_modality)
    q_idx = np.flatnonzero(modalities == qm)
    g_all = np.flatnonzero(modalities != qm)
    if q_idx.size == 0 or g_all.size == 0:
        raise ContractError("evaluation needs both query and gallery modality images")
    missing = set(labels[q_idx].tolist()) - set(labels[g_all].tolist())
    if missing:
        raise ContractError(f"identities without gallery images: {sorted(missing)}")
    groups = _camera_groups(labels[g_all], protocol.groups, np.random.default_rng([protocol.seed, 10007]))
    shots = protocol.shots_per_group
    trials = []
    for t in range(protocol.trials):
        rng = np.random.default_rng([protocol.seed, t])
        picked = []
        for _, parts in groups:
            for part in parts:
                take = part if shots is None or shots >= part.size else rng.choice(part, size=shots, replace=False)
                picked.extend(sorted(take.tolist()))
        g_idx = g_all[np.array(picked, dtype=np.int64)]
        dist = cosine_distance_matrix(features[q_idx], features[g_idx])
        rankings = _rank_rows(dist, labels[q_idx], labels[g_idx])
        skipped = sum(not r.has_match for r in rankings)
        if skipped:
            warnings.warn(f"trial {t}: {skipped} queries without a gallery match were skipped")
        row = score(rankings)
        row["trial"] = t
        trials.append(row)
        if dump_rankings is not None:
            for qi, r in zip(q_idx, rankings):
                dump_rankings.append({"trial": t, "query": int(qi), "query_id": r.query_id,
                                      "gallery": g_idx[r.order].tolist(),
                                      "gallery_ids": labels[g_idx][r.order].tolist(),
                                      "distances": r.distances.tolist()})
    return EvalReport(trials, protocol.describe(), checkpoint)


def run_protocol(model, dataset, protocol: EvalProtocol, checkpoint: str = "",
                 dump_rankings: Optional[list] = None) -> EvalReport:
    """Extract inference-mode features for ``dataset`` and evaluate them."""
    feats = model.extract_features(dataset.images, dataset.modalities)
    return evaluate_features(feats, dataset.labels, dataset.modalities, protocol, checkpoint, dump_rankings)
