"""Ranking metrics: R@K, MRR, mean rank and NDCG.

Ranks are 1-based under descending score with ties broken by ascending
candidate index. NDCG truncates at K = number of candidates with positive
relevance.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

REPORT_KEYS = ("r1", "r5", "r10", "mrr", "mean", "ndcg")


@dataclass
class RankingInstance:
    scores: np.ndarray
    gt_index: int
    relevance: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")
        if not 0 <= self.gt_index < len(self.scores):
            raise ValueError("gt_index out of range")
        if self.relevance is not None:
            self.relevance = np.asarray(self.relevance, dtype=np.float64)
            if self.relevance.shape != self.scores.shape:
                raise ValueError("relevance must match scores")


def ranking_order(scores: np.ndarray) -> np.ndarray:
    """Candidate indices best-first (stable sort on negated scores keeps index order on ties)."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def rank_of_gt(inst: RankingInstance) -> int:
    s = inst.scores
    g = s[inst.gt_index]
    ahead = np.count_nonzero(s > g) + np.count_nonzero(s[: inst.gt_index] == g)
    return int(ahead) + 1


def _ranks(instances: Sequence[RankingInstance]) -> np.ndarray:
    if len(instances) == 0:
        raise ValueError("metrics need at least one instance")
    return np.array([rank_of_gt(i) for i in instances], dtype=np.float64)


def recall_at_k(instances: Sequence[RankingInstance], k: int) -> float:
    return float((_ranks(instances) <= k).mean())


def mrr(instances: Sequence[RankingInstance]) -> float:
    return float((1.0 / _ranks(instances)).mean())


def mean_rank(instances: Sequence[RankingInstance]) -> float:
    return float(_ranks(instances).mean())


def ndcg(inst: RankingInstance) -> float:
    rel = inst.relevance
    if rel is None or not (rel > 0).any():
        raise ValueError("NDCG needs relevance with at least one positive entry")
    k = int(np.count_nonzero(rel > 0))
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float((rel[ranking_order(inst.scores)[:k]] * discounts).sum())
    idcg = float((np.sort(rel)[::-1][:k] * discounts).sum())
    return dcg / idcg


def report(instances: Sequence[RankingInstance]) -> dict[str, float]:
    """MetricsReport; ``ndcg`` averages over instances that carry relevance (NaN if none)."""
    ranks = _ranks(instances)
    dense = [ndcg(i) for i in instances if i.relevance is not None and (i.relevance > 0).any()]
    return {
        "r1": float((ranks <= 1).mean()),
        "r5": float((ranks <= 5).mean()),
        "r10": float((ranks <= 10).mean()),
        "mrr": float((1.0 / ranks).mean()),
        "mean": float(ranks.mean()),
        "ndcg": float(np.mean(dense)) if dense else float("nan"),
    }


# -- files -------------------------------------------------------------------
def write_predictions(path, rows: Iterable[Mapping]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps({"image_id": int(r["image_id"]), "round_id": int(r["round_id"]),
                                 "scores": [float(x) for x in r["scores"]]}) + "\n")


def read_predictions(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out


def evaluate_predictions(predictions: Sequence[Mapping], dialogs, dense: Mapping | None = None) -> dict[str, float]:
    """Join predictions with dialogs (and optional dense table) and compute the report."""
    by_key = {}
    for d in dialogs:
        for t, r in enumerate(d.rounds, start=1):
            by_key[(d.image_id, t)] = r
    instances = []
    for p in predictions:
        key = (int(p["image_id"]), int(p["round_id"]))
        r = by_key[key]
        rel = None
        if dense is not None and key in dense:
            rel = dense[key]
        elif r.dense_relevance is not None:
            rel = r.dense_relevance
        instances.append(RankingInstance(np.asarray(p["scores"]), r.gt_index, rel))
    return report(instances)


def write_report(path, rep: Mapping[str, float]) -> None:
    Path(path).write_text(json.dumps({k: rep[k] for k in REPORT_KEYS}, indent=2) + "\n")
